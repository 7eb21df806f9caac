use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use neurogen::arch::{read_weights, write_weights, ArchSpec, FrozenTables};
use neurogen::data::{load_idx_dir, load_text_dataset, synth_blobs, DatasetHandle};
use neurogen::generator::{read_checkpoint, write_checkpoint, ContextEncoder, GeneratorConfig, GeneratorState, Instruction};
use neurogen::refcorpus::{build_corpus as train_corpus, corpus_stats, read_corpus, train_reference_logged, write_corpus, TrainConfig};
use neurogen::seed::derive_seed;
use neurogen::training::{
    adapt_architecture, evaluate, relative_distance, stage1_train, stage2_train, EpochRecord, LossCurve, SoftClipConfig, StageConfig,
};
use serde::{Deserialize, Serialize};

use crate::config::{config_hash, parse_config, ArchSection, DataSource, ExperimentConfig};
use crate::error::{CliError, Result};

pub const CORPUS_FILE: &str = "corpus.ngpc";
pub const STAGE1_DIR: &str = "stage1";
pub const STAGE2_DIR: &str = "stage2";
pub const ADAPT_DIR: &str = "adapt";
pub const GENERATOR_FILE: &str = "generator.nggs";
pub const WEIGHTS_FILE: &str = "weights.ngpw";
pub const CURVE_FILE: &str = "curve.csv";
pub const METRICS_DIR: &str = "metrics";
pub const REPORT_FILE: &str = "report.csv";

/// Outcome of one completed command. Contains nothing time-dependent, so
/// reruns of the same config produce identical files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub command: String,
    pub config_hash: String,
    pub metrics: BTreeMap<String, f64>,
    /// Paths relative to the output directory.
    pub artifacts: Vec<String>,
}

impl MetricsRecord {
    pub fn metric(&self, name: &str) -> f64 {
        self.metrics.get(name).copied().unwrap_or(f64::NAN)
    }
}

/// A validated config plus the directory its relative paths resolve against.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub base_dir: PathBuf,
}

impl Experiment {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::config("/", format!("{}: {e}", path.display())))?;
        let config = parse_config(&text)?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::new(config, base_dir)
    }

    pub fn new(config: ExperimentConfig, base_dir: PathBuf) -> Result<Self> {
        config.validate(&base_dir)?;
        Ok(Self { config, base_dir })
    }

    pub fn hash(&self) -> String {
        config_hash(&self.config)
    }

    pub fn output_dir(&self) -> PathBuf {
        self.base_dir.join(&self.config.output_dir)
    }

    fn stream(&self, name: &str) -> u64 {
        derive_seed(self.config.seed, name)
    }

    pub fn arch(&self) -> ArchSpec {
        self.config.arch.build().expect("validated architecture")
    }

    pub fn small_arch(&self) -> Result<ArchSpec> {
        let adapt = self.config.adapt.as_ref().ok_or_else(|| CliError::config("/adapt", "section required for adapt"))?;
        Ok(build(&adapt.small_arch))
    }

    /// The configured dataset with the optional training cap applied.
    pub fn dataset(&self) -> Result<DatasetHandle> {
        self.dataset_limited(self.config.dataset.limit)
    }

    pub fn dataset_limited(&self, limit: Option<usize>) -> Result<DatasetHandle> {
        let name = &self.config.dataset.name;
        let ds = match &self.config.dataset.source {
            DataSource::Idx { dir, downsample } => load_idx_dir(&self.base_dir.join(dir), *downsample, name)?,
            DataSource::Blobs {
                k,
                n_per_class,
                dim,
                separation,
            } => synth_blobs(*k, *n_per_class, *dim, *separation, self.stream("data"))?,
            DataSource::TextCsv {
                train,
                test,
                max_len,
                label_base,
                classes,
            } => load_text_dataset(
                &self.base_dir.join(train),
                &self.base_dir.join(test),
                *max_len,
                *label_base,
                *classes,
                name,
            )?,
        };
        match limit {
            Some(n) => Ok(ds.with_train_limit(n, self.stream("data/limit"))?),
            None => Ok(ds),
        }
    }

    pub fn tables(&self, arch: &ArchSpec) -> FrozenTables {
        FrozenTables::seeded(arch, self.stream("tables"))
    }

    pub fn instruction(&self, arch: &ArchSpec) -> Result<Instruction> {
        let s2 = &self.config.stage2;
        let max = self.config.generator.max_seq_len;
        let instr = match &s2.instruction_text {
            Some(text) => Instruction::new(text, max),
            None => Instruction::for_task(arch.kind.display_name(), &s2.task, &self.config.dataset.name, max),
        };
        instr.map_err(|e| CliError::config("/stage2/instruction_text", e))
    }

    /// The generator config with its seed folded into the experiment seed.
    pub fn generator_config(&self) -> GeneratorConfig {
        let mut cfg = self.config.generator.clone();
        cfg.seed = self.stream(&format!("generator/{}", cfg.seed));
        cfg
    }

    pub fn fresh_generator(&self, arch: &ArchSpec, dataset: &DatasetHandle) -> Result<GeneratorState> {
        let encoder = ContextEncoder::for_samples(dataset.modality, &dataset.input_shape());
        Ok(GeneratorState::new(self.generator_config(), arch, encoder)?)
    }

    pub fn stage1_config(&self) -> StageConfig {
        let s1 = &self.config.stage1;
        StageConfig {
            epochs: s1.epochs,
            lr: s1.lr.clone(),
            m: 1,
            seed: self.stream("stage1"),
        }
    }

    pub fn stage2_config(&self) -> StageConfig {
        let s2 = &self.config.stage2;
        StageConfig {
            epochs: s2.epochs,
            lr: s2.lr.clone(),
            m: s2.m,
            seed: self.stream("stage2"),
        }
    }

    fn record(&self, command: &str, metrics: BTreeMap<String, f64>, artifacts: Vec<String>) -> Result<MetricsRecord> {
        let hash = self.hash();
        let run_id = hex::encode(&sha(&format!("{hash}/{command}"))[..8]);
        let record = MetricsRecord {
            run_id,
            command: command.to_string(),
            config_hash: hash,
            metrics,
            artifacts,
        };
        let dir = self.output_dir().join(METRICS_DIR);
        fs::create_dir_all(&dir)?;
        let mut json = serde_json::to_string_pretty(&record)?;
        json.push('\n');
        fs::write(dir.join(format!("{command}.json")), json)?;
        Ok(record)
    }

    fn ensure_dir(&self, sub: &str) -> Result<PathBuf> {
        let dir = self.output_dir().join(sub);
        fs::create_dir_all(&dir)?;
        Ok(dir)
    }
}

fn build(section: &ArchSection) -> ArchSpec {
    section.build().expect("validated architecture")
}

fn sha(text: &str) -> Vec<u8> {
    use sha2::{Digest, Sha256};
    Sha256::digest(text.as_bytes()).to_vec()
}

fn load_generator(path: &Path, arch: &ArchSpec, dataset: &DatasetHandle) -> Result<GeneratorState> {
    let gen = read_checkpoint(path).map_err(|e| match e {
        neurogen::generator::GenError::Io(io) => CliError::Mismatch(format!("{}: {io}", path.display())),
        other => other.into(),
    })?;
    gen.check_arch(arch)?;
    let expected = ContextEncoder::for_samples(dataset.modality, &dataset.input_shape());
    if gen.encoder() != expected {
        return Err(CliError::Mismatch(format!(
            "{} encodes {:?} context, dataset needs {:?}",
            path.display(),
            gen.encoder(),
            expected
        )));
    }
    Ok(gen)
}

fn metrics<const N: usize>(pairs: [(&str, f64); N]) -> BTreeMap<String, f64> {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

fn corpus_path(exp: &Experiment) -> PathBuf {
    exp.output_dir().join(CORPUS_FILE)
}

/// Trains the N reference checkpoints and writes the corpus.
pub fn build_corpus(exp: &Experiment) -> Result<MetricsRecord> {
    let arch = exp.arch();
    let ds = exp.dataset()?;
    let tables = exp.tables(&arch);
    let corpus = train_corpus(&arch, &tables, &ds, exp.config.stage1.n, exp.stream("corpus"), &exp.config.reference)?;
    fs::create_dir_all(exp.output_dir())?;
    write_corpus(&corpus_path(exp), &corpus)?;
    let mut m = BTreeMap::new();
    let accs: Vec<f64> = corpus.entries.iter().map(|(_, meta)| meta.test_accuracy).collect();
    for (i, (_, meta)) in corpus.entries.iter().enumerate() {
        println!(
            "entry {i}: seed {} loss {:.4} test accuracy {:.4}",
            meta.seed, meta.final_train_loss, meta.test_accuracy
        );
        m.insert(format!("entry_{i}_accuracy"), meta.test_accuracy);
    }
    m.insert("min_accuracy".into(), accs.iter().copied().fold(f64::INFINITY, f64::min));
    m.insert("mean_accuracy".into(), accs.iter().sum::<f64>() / accs.len() as f64);
    m.insert("entries".into(), corpus.len() as f64);
    m.insert("param_count".into(), arch.param_count() as f64);
    exp.record("build-corpus", m, vec![CORPUS_FILE.into()])
}

/// Stage 1: aligns a fresh generator with the corpus.
pub fn stage1(exp: &Experiment, corpus: Option<&Path>) -> Result<MetricsRecord> {
    let arch = exp.arch();
    let ds = exp.dataset()?;
    let tables = exp.tables(&arch);
    let path = corpus.map(Path::to_path_buf).unwrap_or_else(|| corpus_path(exp));
    let corpus = read_corpus(&path, &arch).map_err(|e| match e {
        neurogen::refcorpus::RefError::Io(io) => CliError::Mismatch(format!("{}: {io}", path.display())),
        other => other.into(),
    })?;
    let mut gen = exp.fresh_generator(&arch, &ds)?;
    let curve = stage1_train(&mut gen, &corpus, &arch, &exp.stage1_config(), None)?;
    let dir = exp.ensure_dir(STAGE1_DIR)?;
    write_checkpoint(&dir.join(GENERATOR_FILE), &gen)?;
    curve.write_csv(&dir.join(CURVE_FILE))?;

    let w = gen.generate(&Instruction::stage1(gen.config().max_seq_len)?, None, &arch)?;
    let (mean, var) = corpus_stats(&corpus);
    let floor = var.iter().sum::<f64>() / var.len() as f64;
    let final_loss = curve.last().expect("at least one epoch").loss;
    let mean32: Vec<f32> = mean.iter().map(|&v| v as f32).collect();
    let mut m = metrics([
        ("final_loss", final_loss),
        ("floor", floor),
        ("rel_distance_to_mean", relative_distance(w.values(), &mean32)),
        ("test_accuracy", evaluate(&arch, &w, &ds.test, &tables)?),
    ]);
    if floor > 0.0 {
        m.insert("loss_over_floor".into(), final_loss / floor);
    }
    if corpus.len() == 1 {
        let rel = relative_distance(w.values(), corpus.entries[0].0.values());
        println!("relative distance to w_1: {rel:.5}");
        m.insert("rel_distance_to_w1".into(), rel);
    }
    println!("final loss {final_loss:.6e}, corpus floor {floor:.6e}");
    exp.record(
        "stage1",
        m,
        vec![format!("{STAGE1_DIR}/{GENERATOR_FILE}"), format!("{STAGE1_DIR}/{CURVE_FILE}")],
    )
}

/// Name of the stage-2 run: `stage2`, or `ablate-<clip>` for phase-2-only.
pub fn stage2_run_name(config: &ExperimentConfig) -> String {
    if !config.ablation.phase2_only {
        return STAGE2_DIR.into();
    }
    match config.ablation.alpha {
        Some(a) => format!("ablate-alpha{a}"),
        None => "ablate-noclip".into(),
    }
}

/// Stage 2 from a stage-1 checkpoint, or from scratch in phase-2-only mode.
pub fn stage2(exp: &Experiment, generator: Option<&Path>) -> Result<MetricsRecord> {
    let arch = exp.arch();
    let ds = exp.dataset()?;
    let tables = exp.tables(&arch);
    let ablation = &exp.config.ablation;
    let (mut gen, softclip, stage1_done) = if ablation.phase2_only {
        let clip = ablation.alpha.map_or(SoftClipConfig::off(), SoftClipConfig::with_alpha);
        (exp.fresh_generator(&arch, &ds)?, clip, false)
    } else {
        let path = generator
            .map(Path::to_path_buf)
            .unwrap_or_else(|| exp.output_dir().join(STAGE1_DIR).join(GENERATOR_FILE));
        (load_generator(&path, &arch, &ds)?, SoftClipConfig::off(), true)
    };
    let instruction = exp.instruction(&arch)?;
    let out = stage2_train(&mut gen, &ds, &tables, &instruction, &arch, &exp.stage2_config(), &softclip, stage1_done)?;
    let name = stage2_run_name(&exp.config);
    let dir = exp.ensure_dir(&name)?;
    write_checkpoint(&dir.join(GENERATOR_FILE), &gen)?;
    write_weights(&dir.join(WEIGHTS_FILE), &out.weights)?;
    out.curve.write_csv(&dir.join(CURVE_FILE))?;
    let last = out.curve.last().expect("at least one epoch");
    println!("final train loss {:.4}, test accuracy {:.4}", last.loss, out.test_accuracy);
    let m = metrics([
        ("test_accuracy", out.test_accuracy),
        ("final_loss", last.loss),
        ("majority_baseline", ds.majority_baseline()),
    ]);
    exp.record(
        &name,
        m,
        vec![
            format!("{name}/{GENERATOR_FILE}"),
            format!("{name}/{WEIGHTS_FILE}"),
            format!("{name}/{CURVE_FILE}"),
        ],
    )
}

/// Test-split accuracy of a weights file for the configured architecture.
pub fn eval(exp: &Experiment, weights: &Path) -> Result<MetricsRecord> {
    let arch = exp.arch();
    let ds = exp.dataset()?;
    let flat = read_weights(weights, &arch).map_err(|e| match e {
        neurogen::arch::ArchError::Io(io) => CliError::Mismatch(format!("{}: {io}", weights.display())),
        other => other.into(),
    })?;
    let acc = evaluate(&arch, &flat, &ds.test, &exp.tables(&arch))?;
    println!("accuracy {acc:.4}");
    let stem = weights.file_stem().and_then(|s| s.to_str()).unwrap_or("weights");
    let parent = weights
        .parent()
        .and_then(|p| p.file_name())
        .and_then(|s| s.to_str())
        .unwrap_or("");
    let name = if parent.is_empty() { format!("eval-{stem}") } else { format!("eval-{parent}-{stem}") };
    exp.record(&name, metrics([("accuracy", acc)]), vec![weights.display().to_string()])
}

fn classical_curve(stats: &[neurogen::refcorpus::EpochStat]) -> LossCurve {
    LossCurve {
        records: stats
            .iter()
            .map(|s| EpochRecord {
                epoch: s.epoch,
                loss: s.loss as f64,
                test_acc: Some(s.test_accuracy),
                lr: s.lr,
            })
            .collect(),
    }
}

/// Stage-2-only adaptation to the small architecture, plus a classical
/// baseline trained on the same samples for the same number of epochs.
pub fn adapt(exp: &Experiment, generator: Option<&Path>) -> Result<MetricsRecord> {
    let adapt = exp.config.adapt.clone().ok_or_else(|| CliError::config("/adapt", "section required for adapt"))?;
    let big = exp.arch();
    let small = exp.small_arch()?;
    let ds = exp.dataset_limited(adapt.limit.or(exp.config.dataset.limit))?;
    let path = generator
        .map(Path::to_path_buf)
        .unwrap_or_else(|| exp.output_dir().join(STAGE2_DIR).join(GENERATOR_FILE));
    let mut gen = load_generator(&path, &big, &ds)?;
    let tables = exp.tables(&small);
    let instruction = exp.instruction(&small)?;
    let config = StageConfig {
        epochs: adapt.epochs,
        lr: adapt.lr.clone(),
        m: exp.config.stage2.m,
        seed: exp.stream("adapt"),
    };
    let out = adapt_architecture(&mut gen, &small, &ds, &tables, &instruction, &config, &SoftClipConfig::off())?;
    let baseline = TrainConfig {
        epochs: adapt.epochs,
        batch_size: adapt.baseline_batch_size,
        lr: adapt.baseline_lr.clone(),
    };
    let (net, meta, stats) = train_reference_logged(&small, &tables, &ds, exp.stream("adapt/baseline"), &baseline, true)?;
    let classical = classical_curve(&stats);

    let dir = exp.ensure_dir(ADAPT_DIR)?;
    write_checkpoint(&dir.join(GENERATOR_FILE), &gen)?;
    write_weights(&dir.join(WEIGHTS_FILE), &out.weights)?;
    write_weights(&dir.join("classical.ngpw"), &net.to_flat()?)?;
    out.curve.write_csv(&dir.join("generated.csv"))?;
    classical.write_csv(&dir.join("classical.csv"))?;
    println!(
        "{} train samples: generated {:.4}, classical {:.4}, majority {:.4}",
        ds.train.len(),
        out.test_accuracy,
        meta.test_accuracy,
        ds.majority_baseline()
    );
    let m = metrics([
        ("generated_accuracy", out.test_accuracy),
        ("classical_accuracy", meta.test_accuracy),
        ("majority_baseline", ds.majority_baseline()),
        ("gap", out.test_accuracy - meta.test_accuracy),
        ("train_samples", ds.train.len() as f64),
    ]);
    exp.record(
        "adapt",
        m,
        ["generator.nggs", "weights.ngpw", "classical.ngpw", "generated.csv", "classical.csv"]
            .iter()
            .map(|f| format!("{ADAPT_DIR}/{f}"))
            .collect(),
    )
}

/// Collects every MetricsRecord under the output directory into one
/// long-format CSV (`run_id,command,config_hash,metric,value`).
pub fn report(exp: &Experiment) -> Result<PathBuf> {
    let dir = exp.output_dir().join(METRICS_DIR);
    let mut files: Vec<PathBuf> = match fs::read_dir(&dir) {
        Ok(entries) => entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect(),
        Err(_) => Vec::new(),
    };
    files.sort();
    let out = exp.output_dir().join(REPORT_FILE);
    fs::create_dir_all(exp.output_dir())?;
    let mut w = csv::Writer::from_path(&out).map_err(|e| CliError::Other(e.to_string()))?;
    w.write_record(["run_id", "command", "config_hash", "metric", "value"])
        .map_err(|e| CliError::Other(e.to_string()))?;
    for f in &files {
        let record: MetricsRecord =
            serde_json::from_slice(&fs::read(f)?).map_err(|e| CliError::Mismatch(format!("{}: {e}", f.display())))?;
        for (k, v) in &record.metrics {
            w.write_record([&record.run_id, &record.command, &record.config_hash, k, &v.to_string()])
                .map_err(|e| CliError::Other(e.to_string()))?;
        }
    }
    w.flush()?;
    println!("{} records -> {}", files.len(), out.display());
    Ok(out)
}
