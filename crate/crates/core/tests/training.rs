use neurogen::arch::*;
use neurogen::data::{synth_blobs, DatasetHandle};
use neurogen::generator::*;
use neurogen::refcorpus::*;
use neurogen::training::*;
use proptest::prelude::*;

fn blobs_mlp(dim: usize, hidden: usize) -> (DatasetHandle, ArchSpec) {
    let ds = synth_blobs(3, 100, dim, 6.0, 1).unwrap();
    let arch = builtin_arch_with(
        ArchKind::Mlp,
        &[dim],
        3,
        &Widths {
            hidden: Some(hidden),
            ..Default::default()
        },
    )
    .unwrap();
    (ds, arch)
}

fn reference_config() -> TrainConfig {
    TrainConfig {
        epochs: 30,
        batch_size: 64,
        lr: LrSchedule {
            initial: 0.05,
            halve_every: 10,
        },
    }
}

fn miniature_generator(arch: &ArchSpec) -> GeneratorState {
    let cfg = GeneratorConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        p_init_std: 1.0,
        ..GeneratorConfig::default()
    };
    GeneratorState::new(cfg, arch, ContextEncoder::Vector { dim: arch.input_shape[0] }).unwrap()
}

fn miniature_stage1() -> StageConfig {
    StageConfig {
        epochs: 200,
        lr: LrSchedule {
            initial: 1.0,
            halve_every: 0,
        },
        ..StageConfig::stage1()
    }
}

/// (1/N) Σᵢ mean((wᵢ − g)²), computed directly.
fn stage1_objective(corpus: &CheckpointCorpus, g: &[f64]) -> f64 {
    let n = corpus.len() as f64;
    corpus
        .entries
        .iter()
        .map(|(w, _)| w.values().iter().zip(g).map(|(&a, b)| (a as f64 - b).powi(2)).sum::<f64>() / g.len() as f64)
        .sum::<f64>()
        / n
}

fn synthetic_corpus(arch: &ArchSpec, rows: &[Vec<f32>]) -> CheckpointCorpus {
    CheckpointCorpus {
        arch_id: arch.id(),
        entries: rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                (
                    FlatParams::new(arch, r.clone()).unwrap(),
                    CheckpointMeta {
                        seed: i as u64,
                        epochs: 0,
                        final_train_loss: 0.0,
                        test_accuracy: 0.0,
                        dataset_id: "synthetic".into(),
                    },
                )
            })
            .collect(),
    }
}

#[test]
fn schedule_halves_every_ten_epochs() {
    let s = LrSchedule::default();
    assert_eq!(lr_at(&s, 0), 1e-3);
    assert_eq!(lr_at(&s, 10), 5e-4);
    assert_eq!(lr_at(&s, 20), 2.5e-4);
    assert_eq!(StageConfig::stage1().epochs, 30);
    assert_eq!(StageConfig::stage2().epochs, 20);
}

#[test]
fn soft_clip_examples() {
    let arch = builtin_arch_with(ArchKind::Mlp, &[1], 2, &Widths { hidden: Some(1), ..Default::default() }).unwrap();
    let mut values = vec![0.0; arch.param_count()];
    values[1] = 0.01;
    values[2] = -1e6;
    let w = FlatParams::new(&arch, values).unwrap();
    let c = soft_clip(&w, 1.0, &arch).unwrap();
    assert_eq!(c.values()[0], 0.0);
    assert!((c.values()[1] - 0.0099997).abs() < 1e-7);
    assert_eq!(c.values()[2], -1.0);
    assert!(soft_clip(&w, 0.0, &arch).is_err());
}

proptest! {
    #[test]
    fn soft_clip_is_bounded(values in prop::collection::vec(-1e4f32..1e4, 8), alpha in 0.01f64..10.0) {
        let arch = builtin_arch_with(ArchKind::Mlp, &[1], 2, &Widths { hidden: Some(2), ..Default::default() }).unwrap();
        prop_assume!(arch.param_count() == 10);
        let mut v = values.clone();
        v.extend([0.0, 0.0]);
        let c = soft_clip(&FlatParams::new(&arch, v).unwrap(), alpha, &arch).unwrap();
        for &x in c.values() {
            prop_assert!((x as f64).abs() <= alpha * (1.0 + 1e-6));
        }
    }

    #[test]
    fn soft_clip_error_is_cubic(values in prop::collection::vec(-1.0f32..1.0, 10), alpha in 0.01f64..10.0) {
        let arch = builtin_arch_with(ArchKind::Mlp, &[1], 2, &Widths { hidden: Some(2), ..Default::default() }).unwrap();
        let scale = (alpha / 10.0) as f32;
        let v: Vec<f32> = values.iter().map(|x| x * scale).collect();
        let c = soft_clip(&FlatParams::new(&arch, v.clone()).unwrap(), alpha, &arch).unwrap();
        // u − tanh(u) ≤ u³/3
        for (a, b) in c.values().iter().zip(&v) {
            let bound = (*b as f64).abs().powi(3) / (3.0 * alpha * alpha);
            prop_assert!(((a - b) as f64).abs() <= bound + 1e-6 * alpha);
        }
    }

    #[test]
    fn soft_clip_is_near_identity_for_small_weights(values in prop::collection::vec(-1.0f32..1.0, 10), alpha in 0.01f64..0.3) {
        let arch = builtin_arch_with(ArchKind::Mlp, &[1], 2, &Widths { hidden: Some(2), ..Default::default() }).unwrap();
        let scale = (alpha / 10.0) as f32;
        let v: Vec<f32> = values.iter().map(|x| x * scale).collect();
        let c = soft_clip(&FlatParams::new(&arch, v.clone()).unwrap(), alpha, &arch).unwrap();
        for (a, b) in c.values().iter().zip(&v) {
            prop_assert!((a - b).abs() <= 1e-4);
        }
    }

    #[test]
    fn corpus_mean_attains_the_variance_floor(
        rows in prop::collection::vec(prop::collection::vec(-3.0f32..3.0, 10), 1..6),
        probe in prop::collection::vec(-3.0f64..3.0, 10),
    ) {
        let arch = builtin_arch_with(ArchKind::Mlp, &[1], 2, &Widths { hidden: Some(2), ..Default::default() }).unwrap();
        let corpus = synthetic_corpus(&arch, &rows);
        let (mean, var) = corpus_stats(&corpus);
        let floor = var.iter().sum::<f64>() / var.len() as f64;
        prop_assert!((stage1_objective(&corpus, &mean) - floor).abs() < 1e-9);
        prop_assert!(stage1_objective(&corpus, &probe) >= floor - 1e-9);
    }
}

#[test]
fn corpus_stats_of_opposite_pair() {
    let arch = builtin_arch_with(ArchKind::Mlp, &[1], 2, &Widths { hidden: Some(2), ..Default::default() }).unwrap();
    let w: Vec<f32> = (0..10).map(|i| i as f32 - 4.5).collect();
    let neg: Vec<f32> = w.iter().map(|v| -v).collect();
    let (mean, var) = corpus_stats(&synthetic_corpus(&arch, &[w.clone(), neg]));
    assert!(mean.iter().all(|&m| m == 0.0));
    for (v, x) in var.iter().zip(&w) {
        assert_eq!(*v, (*x as f64).powi(2));
    }
}

#[test]
fn first_stage1_loss_is_mean_square_of_corpus() {
    let (ds, arch) = blobs_mlp(4, 16);
    let corpus = build_corpus(&arch, &FrozenTables::empty(), &ds, 3, 100, &reference_config()).unwrap();
    let mut gen = miniature_generator(&arch);
    let config = StageConfig {
        epochs: 1,
        ..miniature_stage1()
    };
    let curve = stage1_train(&mut gen, &corpus, &arch, &config, None).unwrap();
    let expected = stage1_objective(&corpus, &vec![0.0; arch.param_count()]);
    assert!((curve.records[0].loss - expected).abs() < 1e-5 * expected);
}

#[test]
fn stage1_recovers_a_single_checkpoint() {
    let (ds, arch) = blobs_mlp(4, 16);
    assert!(arch.param_count() <= 200);
    let corpus = build_corpus(&arch, &FrozenTables::empty(), &ds, 1, 100, &reference_config()).unwrap();
    let mut gen = miniature_generator(&arch);
    let curve = stage1_train(&mut gen, &corpus, &arch, &miniature_stage1(), None).unwrap();
    assert_eq!(curve.len(), 200);
    let w = gen.generate(&Instruction::stage1(1024).unwrap(), None, &arch).unwrap();
    let rel = relative_distance(w.values(), corpus.entries[0].0.values());
    assert!(rel < 0.05, "relative distance {rel}");
    let losses: Vec<f64> = curve.records.iter().map(|r| r.loss).collect();
    for window in losses.windows(5) {
        assert!(window.windows(2).all(|p| p[1] <= p[0]), "loss rose within {window:?}");
    }
}

#[test]
fn stage1_approaches_the_corpus_floor() {
    let (ds, arch) = blobs_mlp(4, 16);
    let corpus = build_corpus(&arch, &FrozenTables::empty(), &ds, 8, 100, &reference_config()).unwrap();
    let (_, var) = corpus_stats(&corpus);
    let floor = var.iter().sum::<f64>() / var.len() as f64;
    let mut gen = miniature_generator(&arch);
    let curve = stage1_train(&mut gen, &corpus, &arch, &miniature_stage1(), None).unwrap();
    let last = curve.last().unwrap().loss;
    assert!(last >= floor * (1.0 - 1e-4), "loss {last} below floor {floor}");
    assert!(last <= floor * 1.1, "loss {last} vs floor {floor}");
}

#[test]
fn stage1_rejects_foreign_corpus() {
    let (ds, arch) = blobs_mlp(4, 16);
    let (_, other) = blobs_mlp(4, 8);
    let corpus = build_corpus(&other, &FrozenTables::empty(), &ds, 1, 0, &reference_config()).unwrap();
    let mut gen = miniature_generator(&arch);
    let err = stage1_train(&mut gen, &corpus, &arch, &miniature_stage1(), None).unwrap_err();
    assert!(matches!(err, TrainError::CorpusMismatch { .. }));
}

fn blobs_pipeline() -> (DatasetHandle, ArchSpec, GeneratorState, Instruction) {
    let ds = synth_blobs(3, 200, 8, 6.0, 1).unwrap();
    let (_, arch) = blobs_mlp(8, 64);
    let corpus = build_corpus(&arch, &FrozenTables::empty(), &ds, 8, 100, &reference_config()).unwrap();
    let cfg = GeneratorConfig {
        d_model: 128,
        n_layers: 2,
        n_heads: 4,
        p_init_std: 1.0,
        ..GeneratorConfig::default()
    };
    let mut gen = GeneratorState::new(cfg, &arch, ContextEncoder::Vector { dim: 8 }).unwrap();
    let stage1 = StageConfig {
        epochs: 30,
        lr: LrSchedule {
            initial: 5.0,
            halve_every: 10,
        },
        ..StageConfig::stage1()
    };
    stage1_train(&mut gen, &corpus, &arch, &stage1, None).unwrap();
    let instr = Instruction::for_task("MLP", "classification", "Blobs", 1024).unwrap();
    (ds, arch, gen, instr)
}

#[test]
fn stage2_fits_blobs_and_keeps_the_base_frozen() {
    let (ds, arch, mut gen, instr) = blobs_pipeline();
    let base = gen.base_fingerprint();
    let table = gen.token_embedding().clone();
    let config = StageConfig {
        epochs: 20,
        m: 32,
        seed: 2,
        ..StageConfig::stage2()
    };
    let out = stage2_train(&mut gen, &ds, &FrozenTables::empty(), &instr, &arch, &config, &SoftClipConfig::off(), true).unwrap();
    assert_eq!(out.curve.len(), 20);
    assert!(out.test_accuracy >= 0.9, "accuracy {}", out.test_accuracy);
    assert_eq!(gen.base_fingerprint(), base);
    assert_eq!(gen.token_embedding(), &table);
    let again = generate_for_eval(&gen, &ds, &instr, &arch, &config, &SoftClipConfig::off()).unwrap();
    assert_eq!(again.values(), out.weights.values());
    assert_eq!(evaluate(&arch, &again, &ds.test, &FrozenTables::empty()).unwrap(), out.test_accuracy);
}

#[test]
fn stage2_rejects_oversized_subsets() {
    let (ds, arch) = blobs_mlp(4, 16);
    let mut gen = miniature_generator(&arch);
    let instr = Instruction::stage1(1024).unwrap();
    let config = StageConfig {
        m: ds.train.len() + 1,
        ..StageConfig::stage2()
    };
    assert!(stage2_train(&mut gen, &ds, &FrozenTables::empty(), &instr, &arch, &config, &SoftClipConfig::off(), false).is_err());
}

/// A generator whose outputs are so large that the target's logits overflow.
fn exploding_setup() -> (DatasetHandle, ArchSpec, GeneratorState, Instruction) {
    let (ds, arch) = blobs_mlp(4, 16);
    let mut gen = miniature_generator(&arch);
    for v in gen.head.b2.data_mut() {
        *v = 1e25;
    }
    let instr = Instruction::stage1(1024).unwrap();
    (ds, arch, gen, instr)
}

#[test]
fn exploding_logits_map_to_the_unbounded_failure() {
    let config = StageConfig {
        epochs: 1,
        m: 8,
        ..StageConfig::stage2()
    };
    let (ds, arch, mut gen, instr) = exploding_setup();
    let err = stage2_train(&mut gen, &ds, &FrozenTables::empty(), &instr, &arch, &config, &SoftClipConfig::off(), false).unwrap_err();
    assert!(matches!(err, TrainError::UnboundedLogits { .. }), "{err}");
    let (ds, arch, mut gen, instr) = exploding_setup();
    let err = stage2_train(&mut gen, &ds, &FrozenTables::empty(), &instr, &arch, &config, &SoftClipConfig::off(), true).unwrap_err();
    assert!(matches!(err, TrainError::Diverged { stage: 2, .. }), "{err}");
}

#[test]
fn adaptation_emits_weights_for_the_new_architecture() {
    let (ds, _, mut gen, instr) = blobs_pipeline();
    let (_, small) = blobs_mlp(8, 16);
    let config = StageConfig {
        epochs: 2,
        m: 32,
        ..StageConfig::stage2()
    };
    let lora_before = gen.lora.clone();
    let (base, tokens) = (gen.base_fingerprint(), gen.token_embedding().clone());
    let out = adapt_architecture(&mut gen, &small, &ds, &FrozenTables::empty(), &instr, &config, &SoftClipConfig::off()).unwrap();
    assert_eq!(out.weights.len(), small.param_count());
    assert_eq!(gen.target().arch_id, small.id());
    assert_ne!(gen.lora, lora_before);
    assert_eq!(gen.base_fingerprint(), base);
    assert_eq!(gen.token_embedding(), &tokens);
    let same = adapt_architecture(&mut gen, &small, &ds, &FrozenTables::empty(), &instr, &config, &SoftClipConfig::off());
    assert!(matches!(same, Err(TrainError::Config(_))));
}

#[test]
fn curve_csv_header() {
    let curve = LossCurve::default();
    assert_eq!(curve.to_csv(), "epoch,loss,test_acc,lr\n");
}

#[test]
fn corpus_is_deterministic_and_matches_single_runs() {
    let (ds, arch) = blobs_mlp(8, 64);
    let tables = FrozenTables::empty();
    let a = build_corpus(&arch, &tables, &ds, 8, 100, &reference_config()).unwrap();
    let b = build_corpus(&arch, &tables, &ds, 8, 100, &reference_config()).unwrap();
    assert_eq!(encode_corpus(&a), encode_corpus(&b));
    let (single, meta) = train_reference(&arch, &tables, &ds, 100, &reference_config()).unwrap();
    assert_eq!(a.entries[0].0.values(), single.values());
    assert_eq!(a.entries[0].1, meta);
    for (i, (w, m)) in a.entries.iter().enumerate() {
        assert_eq!(m.seed, 100 + i as u64);
        assert!(m.test_accuracy >= 0.9, "entry {i}: {}", m.test_accuracy);
        assert_eq!(evaluate(&arch, w, &ds.test, &tables).unwrap(), m.test_accuracy);
    }
    for i in 1..a.len() {
        assert_ne!(a.entries[i].0.values(), a.entries[0].0.values());
    }
    assert!(a.entries.iter().any(|(_, m)| m.test_accuracy >= 0.95));
}

#[test]
fn corpus_file_round_trip() {
    let (ds, arch) = blobs_mlp(4, 16);
    let corpus = build_corpus(&arch, &FrozenTables::empty(), &ds, 2, 7, &reference_config()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ngpc");
    write_corpus(&path, &corpus).unwrap();
    assert_eq!(read_corpus(&path, &arch).unwrap(), corpus);
    let (_, other) = blobs_mlp(4, 8);
    assert!(read_corpus(&path, &other).is_err());
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.push(0);
    assert!(decode_corpus(&bytes, &arch).is_err());
}

#[test]
fn corpus_size_zero_is_rejected() {
    let (ds, arch) = blobs_mlp(4, 16);
    assert!(build_corpus(&arch, &FrozenTables::empty(), &ds, 0, 0, &reference_config()).is_err());
}
