//! Dataset ingestion: IDX image files, `label,text` CSV, synthetic blobs,
//! and seeded subset sampling.

use std::fs;
use std::path::{Path, PathBuf};

use gradcore::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{InputBatch, PAD_ID};
use crate::seed::{rng, stream_rng};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} at byte {offset}: {reason}")]
    Idx { path: PathBuf, offset: usize, reason: String },
    #[error("{images} holds {n_images} images but {labels} holds {n_labels} labels")]
    CountMismatch {
        images: PathBuf,
        labels: PathBuf,
        n_images: usize,
        n_labels: usize,
    },
    #[error("{path} line {line}: {reason}")]
    Csv { path: PathBuf, line: u64, reason: String },
    #[error("label {label} outside [0, {classes})")]
    Label { label: usize, classes: usize },
    #[error("subset of {m} requested from a split of {available}")]
    SubsetTooLarge { m: usize, available: usize },
    #[error("subset size must be at least 1")]
    EmptySubset,
    #[error("invalid dataset parameters: {0}")]
    Params(String),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Image,
    Text,
    /// Dense feature vectors (synthetic data).
    Vector,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Inputs {
    /// Samples of `sample_shape`, stored back to back.
    Dense { sample_shape: Vec<usize>, data: Vec<f32> },
    /// Right-padded token ids, `len` per sample.
    Tokens { len: usize, ids: Vec<u32> },
}

impl Inputs {
    fn sample_len(&self) -> usize {
        match self {
            Inputs::Dense { sample_shape, .. } => sample_shape.iter().product(),
            Inputs::Tokens { len, .. } => *len,
        }
    }

    fn count(&self) -> usize {
        let n = self.sample_len();
        match self {
            Inputs::Dense { data, .. } if n > 0 => data.len() / n,
            Inputs::Tokens { ids, .. } if n > 0 => ids.len() / n,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Train,
    Test,
}

/// One split: inputs plus labels in matching order.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    inputs: Inputs,
    labels: Vec<usize>,
}

impl Split {
    pub fn new(inputs: Inputs, labels: Vec<usize>) -> Result<Self> {
        if inputs.count() != labels.len() || inputs.sample_len() == 0 {
            return Err(DataError::Params(format!(
                "{} samples but {} labels",
                inputs.count(),
                labels.len()
            )));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn inputs(&self) -> &Inputs {
        &self.inputs
    }

    /// Shape of one sample (`[C, H, W]`, `[dim]` or `[max_len]`).
    pub fn sample_shape(&self) -> Vec<usize> {
        match &self.inputs {
            Inputs::Dense { sample_shape, .. } => sample_shape.clone(),
            Inputs::Tokens { len, .. } => vec![*len],
        }
    }

    /// Gathers the samples at `indices` into a network input batch.
    pub fn batch(&self, indices: &[usize]) -> InputBatch {
        let n = self.inputs.sample_len();
        match &self.inputs {
            Inputs::Dense { sample_shape, data } => {
                let mut out = Vec::with_capacity(indices.len() * n);
                for &i in indices {
                    out.extend_from_slice(&data[i * n..(i + 1) * n]);
                }
                let shape: Vec<usize> = std::iter::once(indices.len()).chain(sample_shape.iter().copied()).collect();
                InputBatch::Dense(Tensor::new(&shape, out).expect("gathered batch"))
            }
            Inputs::Tokens { len, ids } => {
                let mut out = Vec::with_capacity(indices.len() * n);
                for &i in indices {
                    out.extend_from_slice(&ids[i * n..(i + 1) * n]);
                }
                InputBatch::Tokens {
                    ids: out,
                    batch: indices.len(),
                    len: *len,
                }
            }
        }
    }

    pub fn batch_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    /// Raw f32 view of one dense sample.
    pub fn dense_sample(&self, i: usize) -> Option<&[f32]> {
        match &self.inputs {
            Inputs::Dense { data, .. } => {
                let n = self.inputs.sample_len();
                Some(&data[i * n..(i + 1) * n])
            }
            Inputs::Tokens { .. } => None,
        }
    }

    /// Keeps only the samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Split {
        let inputs = match self.batch(indices) {
            InputBatch::Dense(t) => Inputs::Dense {
                sample_shape: self.sample_shape(),
                data: t.into_data(),
            },
            InputBatch::Tokens { ids, len, .. } => Inputs::Tokens { len, ids },
        };
        Split {
            inputs,
            labels: self.batch_labels(indices),
        }
    }

    /// Fraction of samples in each class.
    pub fn class_priors(&self, num_classes: usize) -> Vec<f64> {
        let mut counts = vec![0usize; num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts.iter().map(|&c| c as f64 / self.len().max(1) as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetHandle {
    pub id: String,
    pub modality: Modality,
    pub num_classes: usize,
    pub train: Split,
    pub test: Split,
}

impl DatasetHandle {
    pub fn new(id: impl Into<String>, modality: Modality, num_classes: usize, train: Split, test: Split) -> Result<Self> {
        if num_classes < 2 {
            return Err(DataError::Params(format!("need at least 2 classes, got {num_classes}")));
        }
        if train.sample_shape() != test.sample_shape() {
            return Err(DataError::Params(format!(
                "train samples {:?} vs test samples {:?}",
                train.sample_shape(),
                test.sample_shape()
            )));
        }
        for &label in train.labels.iter().chain(&test.labels) {
            if label >= num_classes {
                return Err(DataError::Label {
                    label,
                    classes: num_classes,
                });
            }
        }
        Ok(Self {
            id: id.into(),
            modality,
            num_classes,
            train,
            test,
        })
    }

    pub fn input_shape(&self) -> Vec<usize> {
        self.train.sample_shape()
    }

    pub fn split(&self, kind: SplitKind) -> &Split {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Test => &self.test,
        }
    }

    /// Accuracy of always predicting the most frequent test class.
    pub fn majority_baseline(&self) -> f64 {
        self.test.class_priors(self.num_classes).into_iter().fold(0.0, f64::max)
    }

    /// Caps the training split at `limit` samples drawn without replacement.
    pub fn with_train_limit(mut self, limit: usize, seed: u64) -> Result<Self> {
        if limit < self.train.len() {
            let mut keep = sample_subset(&self.train, limit, seed)?;
            keep.sort_unstable();
            self.train = self.train.select(&keep);
            self.id = format!("{}-limit{limit}", self.id);
        }
        Ok(self)
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| DataError::Idx {
            path: path.to_path_buf(),
            offset,
            reason: "file ends inside the header".into(),
        })
}

/// Reads an IDX image/label file pair. Pixels are scaled to `[0, 1]` and
/// optionally area-averaged down to `side × side`.
pub fn load_idx(images_path: &Path, labels_path: &Path, downsample_to: Option<usize>) -> Result<Split> {
    let img = fs::read(images_path).map_err(io_err(images_path))?;
    let lab = fs::read(labels_path).map_err(io_err(labels_path))?;
    let idx_err = |path: &Path, offset: usize, reason: String| DataError::Idx {
        path: path.to_path_buf(),
        offset,
        reason,
    };
    let magic = be_u32(&img, 0, images_path)?;
    if magic != 0x0000_0803 {
        return Err(idx_err(images_path, 0, format!("image magic {magic:#010x}, expected 0x00000803")));
    }
    let magic = be_u32(&lab, 0, labels_path)?;
    if magic != 0x0000_0801 {
        return Err(idx_err(labels_path, 0, format!("label magic {magic:#010x}, expected 0x00000801")));
    }
    let n_images = be_u32(&img, 4, images_path)? as usize;
    let rows = be_u32(&img, 8, images_path)? as usize;
    let cols = be_u32(&img, 12, images_path)? as usize;
    let n_labels = be_u32(&lab, 4, labels_path)? as usize;
    if n_images != n_labels {
        return Err(DataError::CountMismatch {
            images: images_path.to_path_buf(),
            labels: labels_path.to_path_buf(),
            n_images,
            n_labels,
        });
    }
    let need = 16 + n_images * rows * cols;
    if img.len() != need {
        return Err(idx_err(images_path, img.len().min(need), format!("expected {need} bytes, file has {}", img.len())));
    }
    if lab.len() != 8 + n_labels {
        return Err(idx_err(
            labels_path,
            lab.len().min(8 + n_labels),
            format!("expected {} bytes, file has {}", 8 + n_labels, lab.len()),
        ));
    }
    let pixels: Vec<f32> = img[16..].iter().map(|&p| p as f32 / 255.0).collect();
    let labels: Vec<usize> = lab[8..].iter().map(|&l| l as usize).collect();
    let (data, side_h, side_w) = match downsample_to {
        Some(side) if side != rows || side != cols => {
            if side == 0 || side > rows || side > cols {
                return Err(DataError::Params(format!("cannot downsample {rows}x{cols} to {side}x{side}")));
            }
            let wr = area_weights(rows, side);
            let wc = area_weights(cols, side);
            let mut out = Vec::with_capacity(n_images * side * side);
            for chunk in pixels.chunks(rows * cols) {
                out.extend(area_downsample(chunk, rows, cols, &wr, &wc));
            }
            (out, side, side)
        }
        _ => (pixels, rows, cols),
    };
    Split::new(
        Inputs::Dense {
            sample_shape: vec![1, side_h, side_w],
            data,
        },
        labels,
    )
}

/// Overlap weights `[to][from]` for averaging a length-`from` axis into `to` cells.
fn area_weights(from: usize, to: usize) -> Vec<Vec<(usize, f32)>> {
    let scale = from as f64 / to as f64;
    (0..to)
        .map(|i| {
            let (lo, hi) = (i as f64 * scale, (i + 1) as f64 * scale);
            (lo.floor() as usize..(hi.ceil() as usize).min(from))
                .filter_map(|j| {
                    let overlap = (hi.min(j as f64 + 1.0) - lo.max(j as f64)).max(0.0);
                    (overlap > 0.0).then_some((j, (overlap / scale) as f32))
                })
                .collect()
        })
        .collect()
}

fn area_downsample(img: &[f32], rows: usize, cols: usize, wr: &[Vec<(usize, f32)>], wc: &[Vec<(usize, f32)>]) -> Vec<f32> {
    // columns first, then rows
    let mut tmp = vec![0.0f32; rows * wc.len()];
    for r in 0..rows {
        for (o, ws) in wc.iter().enumerate() {
            tmp[r * wc.len() + o] = ws.iter().map(|&(j, w)| img[r * cols + j] * w).sum();
        }
    }
    let mut out = vec![0.0f32; wr.len() * wc.len()];
    for (o, ws) in wr.iter().enumerate() {
        for c in 0..wc.len() {
            out[o * wc.len() + c] = ws.iter().map(|&(j, w)| tmp[j * wc.len() + c] * w).sum();
        }
    }
    out
}

/// Loads `train-images-idx3-ubyte` / `t10k-images-idx3-ubyte` (and label
/// files) from `dir`, keeping the provided train/test split.
pub fn load_idx_dir(dir: &Path, downsample_to: Option<usize>, id: &str) -> Result<DatasetHandle> {
    let train = load_idx(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
        downsample_to,
    )?;
    let test = load_idx(
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
        downsample_to,
    )?;
    let classes = train.labels.iter().chain(&test.labels).max().map_or(0, |m| m + 1);
    DatasetHandle::new(id, Modality::Image, classes, train, test)
}

/// Byte-level tokens of `text`, truncated to `max_len` and padded with
/// [`PAD_ID`].
pub fn encode_text(text: &str, max_len: usize) -> Vec<u32> {
    let mut ids: Vec<u32> = text.bytes().take(max_len).map(u32::from).collect();
    ids.resize(max_len, PAD_ID);
    ids
}

/// Inverse of [`encode_text`] up to truncation.
pub fn decode_text(ids: &[u32]) -> String {
    let bytes: Vec<u8> = ids.iter().take_while(|&&t| t != PAD_ID).map(|&t| t as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

/// Reads `label,text` rows. Extra columns are joined into the text with a
/// space (title and body columns). `label_base` is subtracted from each
/// label; a first row whose label is not an integer is taken as a header.
pub fn load_text_csv(path: &Path, max_len: usize, label_base: usize) -> Result<Split> {
    if max_len == 0 {
        return Err(DataError::Params("max_len must be positive".into()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| DataError::Csv {
            path: path.to_path_buf(),
            line: 0,
            reason: e.to_string(),
        })?;
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let line = row as u64 + 1;
        let csv_err = |reason: String| DataError::Csv {
            path: path.to_path_buf(),
            line,
            reason,
        };
        let record = record.map_err(|e| csv_err(e.to_string()))?;
        let line = record.position().map_or(line, |p| p.line());
        let csv_err = |reason: String| DataError::Csv {
            path: path.to_path_buf(),
            line,
            reason,
        };
        if record.len() < 2 {
            return Err(csv_err(format!("expected label,text but found {} field(s)", record.len())));
        }
        let label = match record[0].trim().parse::<usize>() {
            Ok(l) => l,
            Err(_) if row == 0 => continue,
            Err(_) => return Err(csv_err(format!("label {:?} is not a non-negative integer", &record[0]))),
        };
        let label = label
            .checked_sub(label_base)
            .ok_or_else(|| csv_err(format!("label {label} is below the label base {label_base}")))?;
        let text = record.iter().skip(1).map(str::trim).filter(|s| !s.is_empty()).collect::<Vec<_>>().join(" ");
        if text.is_empty() {
            return Err(csv_err("empty text".into()));
        }
        ids.extend(encode_text(&text, max_len));
        labels.push(label);
    }
    Split::new(Inputs::Tokens { len: max_len, ids }, labels).map_err(|_| DataError::Csv {
        path: path.to_path_buf(),
        line: 0,
        reason: "no data rows".into(),
    })
}

/// Loads a train/test pair of text CSV files.
pub fn load_text_dataset(
    train_path: &Path,
    test_path: &Path,
    max_len: usize,
    label_base: usize,
    num_classes: usize,
    id: &str,
) -> Result<DatasetHandle> {
    let train = load_text_csv(train_path, max_len, label_base)?;
    let test = load_text_csv(test_path, max_len, label_base)?;
    DatasetHandle::new(id, Modality::Text, num_classes, train, test)
}

/// Gaussian clusters (unit variance) around seeded centers with pairwise
/// distance at least `separation`, split 80/20 per class.
pub fn synth_blobs(k: usize, n_per_class: usize, dim: usize, separation: f64, seed: u64) -> Result<DatasetHandle> {
    if k < 2 || dim == 0 || n_per_class < 2 || !(separation > 0.0) {
        return Err(DataError::Params(format!(
            "blobs need k >= 2, dim >= 1, n_per_class >= 2 and separation > 0 (got k={k}, dim={dim}, n={n_per_class}, sep={separation})"
        )));
    }
    let mut r = stream_rng(seed, "blobs/centers");
    let centers = blob_centers(k, dim, separation, &mut r);
    let mut r = stream_rng(seed, "blobs/samples");
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (class, c) in centers.iter().enumerate() {
        let n_train = n_per_class * 4 / 5;
        for i in 0..n_per_class {
            let x: Vec<f32> = c.iter().map(|&m| (m + r.sample::<f64, _>(StandardNormal)) as f32).collect();
            if i < n_train {
                train.push((x, class));
            } else {
                test.push((x, class));
            }
        }
    }
    train.shuffle(&mut r);
    test.shuffle(&mut r);
    let pack = |rows: Vec<(Vec<f32>, usize)>| {
        let labels = rows.iter().map(|(_, l)| *l).collect();
        let data = rows.into_iter().flat_map(|(x, _)| x).collect();
        Split::new(
            Inputs::Dense {
                sample_shape: vec![dim],
                data,
            },
            labels,
        )
    };
    DatasetHandle::new(
        format!("blobs-k{k}-d{dim}-n{n_per_class}-s{separation}-seed{seed}"),
        Modality::Vector,
        k,
        pack(train)?,
        pack(test)?,
    )
}

fn blob_centers(k: usize, dim: usize, separation: f64, r: &mut impl Rng) -> Vec<Vec<f64>> {
    let on_sphere = |radius: f64, r: &mut dyn rand::RngCore| -> Vec<f64> {
        loop {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(r)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-9 {
                return v.into_iter().map(|x| x * radius / norm).collect();
            }
        }
    };
    if k == 2 {
        let c = on_sphere(separation / 2.0, r);
        let neg = c.iter().map(|x| -x).collect();
        return vec![c, neg];
    }
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let mut radius = separation;
    loop {
        let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
        for _ in 0..1000 {
            let c = on_sphere(radius, r);
            if centers.iter().all(|o| dist(o, &c) >= separation) {
                centers.push(c);
                if centers.len() == k {
                    return centers;
                }
            }
        }
        radius *= 1.25;
    }
}

/// Draws `m` distinct training indices uniformly at random.
pub fn sample_subset(split: &Split, m: usize, seed: u64) -> Result<Vec<usize>> {
    sample_subset_with(split, m, &mut rng(seed))
}

pub fn sample_subset_with(split: &Split, m: usize, r: &mut impl Rng) -> Result<Vec<usize>> {
    if m == 0 {
        return Err(DataError::EmptySubset);
    }
    if m > split.len() {
        return Err(DataError::SubsetTooLarge {
            m,
            available: split.len(),
        });
    }
    Ok(rand::seq::index::sample(r, split.len(), m).into_vec())
}
