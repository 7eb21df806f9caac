//! Experiment configuration: one JSON document per experiment.

use std::path::{Path, PathBuf};

use neurogen::arch::{builtin_arch_with, ArchKind, ArchSpec, Widths};
use neurogen::generator::GeneratorConfig;
use neurogen::refcorpus::TrainConfig;
use neurogen::training::LrSchedule;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root of every random stream in the experiment.
    pub seed: u64,
    pub arch: ArchSection,
    pub dataset: DatasetSection,
    #[serde(default)]
    pub reference: TrainConfig,
    #[serde(default)]
    pub generator: GeneratorConfig,
    #[serde(default)]
    pub stage1: Stage1Section,
    #[serde(default)]
    pub stage2: Stage2Section,
    #[serde(default)]
    pub ablation: AblationSection,
    #[serde(default)]
    pub adapt: Option<AdaptSection>,
    /// Relative paths resolve against the config file's directory.
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSection {
    pub kind: ArchKind,
    pub input_shape: Vec<usize>,
    pub classes: usize,
    #[serde(default)]
    pub widths: Widths,
}

impl ArchSection {
    pub fn build(&self) -> neurogen::arch::Result<ArchSpec> {
        builtin_arch_with(self.kind, &self.input_shape, self.classes, &self.widths)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    /// Name used in the task instruction, e.g. "MNIST".
    pub name: String,
    pub source: DataSource,
    /// Caps the training split (seeded draw without replacement).
    #[serde(default)]
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Directory with the four standard IDX files.
    Idx {
        dir: PathBuf,
        #[serde(default)]
        downsample: Option<usize>,
    },
    Blobs {
        k: usize,
        n_per_class: usize,
        dim: usize,
        separation: f64,
    },
    /// "label,text" CSV files.
    TextCsv {
        train: PathBuf,
        test: PathBuf,
        max_len: usize,
        #[serde(default)]
        label_base: usize,
        classes: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Section {
    pub epochs: usize,
    pub lr: LrSchedule,
    /// Corpus size N.
    pub n: usize,
}

impl Default for Stage1Section {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: LrSchedule::default(),
            n: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Section {
    pub epochs: usize,
    pub lr: LrSchedule,
    pub m: usize,
    pub task: String,
    /// Replaces the templated instruction when set.
    pub instruction_text: Option<String>,
}

impl Default for Stage2Section {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: LrSchedule::default(),
            m: 32,
            task: "classification".into(),
            instruction_text: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub phase2_only: bool,
    /// Soft-clip bound; `null` disables clipping.
    pub alpha: Option<f64>,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            phase2_only: false,
            alpha: Some(0.5),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptSection {
    pub small_arch: ArchSection,
    #[serde(default)]
    pub limit: Option<usize>,
    pub epochs: usize,
    pub lr: LrSchedule,
    /// Classical baseline on the same samples, trained for the same epochs.
    pub baseline_lr: LrSchedule,
    #[serde(default = "default_batch")]
    pub baseline_batch_size: usize,
}

fn default_batch() -> usize {
    64
}

/// Parses `text`, reporting schema errors with the JSON pointer of the
/// offending value.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let pointer = json_pointer(e.path());
        CliError::config(pointer, e.into_inner())
    })
}

fn json_pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        out.push('/');
        match seg {
            Segment::Seq { index } => out.push_str(&index.to_string()),
            Segment::Map { key } => out.push_str(&key.replace('~', "~0").replace('/', "~1")),
            Segment::Enum { variant } => out.push_str(variant),
            Segment::Unknown => out.push('?'),
        }
    }
    if out.is_empty() {
        out.push('/');
    }
    out
}

/// Hex SHA-256 of the canonical JSON of `config`.
pub fn config_hash(config: &ExperimentConfig) -> String {
    let bytes = serde_json::to_vec(config).expect("config serializes");
    hex::encode(Sha256::digest(&bytes))
}

impl ExperimentConfig {
    /// Checks everything that can be checked before any work starts.
    pub fn validate(&self, base_dir: &Path) -> Result<()> {
        self.arch.build().map_err(|e| CliError::config("/arch", e))?;
        match &self.dataset.source {
            DataSource::Idx { dir, downsample } => {
                let dir = base_dir.join(dir);
                for f in ["train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"] {
                    if !dir.join(f).is_file() {
                        return Err(CliError::config("/dataset/source/dir", format!("{} not found", dir.join(f).display())));
                    }
                }
                if *downsample == Some(0) {
                    return Err(CliError::config("/dataset/source/downsample", "must be positive"));
                }
            }
            DataSource::Blobs { k, separation, .. } => {
                if *k < 2 || !(*separation > 0.0) {
                    return Err(CliError::config("/dataset/source", "blobs need k >= 2 and separation > 0"));
                }
            }
            DataSource::TextCsv { train, test, .. } => {
                for (key, p) in [("train", train), ("test", test)] {
                    if !base_dir.join(p).is_file() {
                        return Err(CliError::config(
                            format!("/dataset/source/{key}"),
                            format!("{} not found", base_dir.join(p).display()),
                        ));
                    }
                }
            }
        }
        if self.dataset.limit == Some(0) {
            return Err(CliError::config("/dataset/limit", "must be positive"));
        }
        self.generator.validate().map_err(|e| CliError::config("/generator", e))?;
        positive("/reference/epochs", self.reference.epochs)?;
        positive("/reference/batch_size", self.reference.batch_size)?;
        positive_lr("/reference/lr/initial", &self.reference.lr)?;
        positive("/stage1/epochs", self.stage1.epochs)?;
        positive("/stage1/n", self.stage1.n)?;
        positive_lr("/stage1/lr/initial", &self.stage1.lr)?;
        positive("/stage2/epochs", self.stage2.epochs)?;
        positive("/stage2/m", self.stage2.m)?;
        positive_lr("/stage2/lr/initial", &self.stage2.lr)?;
        if let Some(a) = self.ablation.alpha {
            if !(a > 0.0 && a.is_finite()) {
                return Err(CliError::config("/ablation/alpha", "must be positive or null"));
            }
        }
        if let Some(adapt) = &self.adapt {
            let small = adapt.small_arch.build().map_err(|e| CliError::config("/adapt/small_arch", e))?;
            let big = self.arch.build().expect("checked above");
            if small.id() == big.id() {
                return Err(CliError::config("/adapt/small_arch", "must differ from /arch"));
            }
            positive("/adapt/epochs", adapt.epochs)?;
            positive("/adapt/baseline_batch_size", adapt.baseline_batch_size)?;
            positive_lr("/adapt/lr/initial", &adapt.lr)?;
            positive_lr("/adapt/baseline_lr/initial", &adapt.baseline_lr)?;
            if adapt.limit == Some(0) {
                return Err(CliError::config("/adapt/limit", "must be positive"));
            }
        }
        Ok(())
    }
}

fn positive(pointer: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(CliError::config(pointer, "must be at least 1"));
    }
    Ok(())
}

fn positive_lr(pointer: &str, lr: &LrSchedule) -> Result<()> {
    if !(lr.initial > 0.0 && lr.initial.is_finite()) {
        return Err(CliError::config(pointer, "must be a positive number"));
    }
    Ok(())
}
