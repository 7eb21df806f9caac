use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use neurogen::arch::{builtin_arch, builtin_arch_with, write_weights, ArchKind, FlatParams, Widths};
use neurogen::data::synth_blobs;
use neurogen_cli::commands::{CORPUS_FILE, CURVE_FILE, STAGE1_DIR};
use neurogen_cli::MetricsRecord;

fn neurogen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_neurogen")).args(args).output().expect("spawn neurogen")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Writes a small blobs config into `dir` and returns its path.
fn small_config(dir: &Path, edit: impl FnOnce(&mut serde_json::Value)) -> PathBuf {
    let mut v = serde_json::json!({
        "seed": 5,
        "arch": {"kind": "mlp", "input_shape": [4], "classes": 3, "widths": {"hidden": 8}},
        "dataset": {"name": "Blobs", "source": {"kind": "blobs", "k": 3, "n_per_class": 40, "dim": 4, "separation": 6.0}},
        "reference": {"epochs": 5, "batch_size": 16, "lr": {"initial": 0.05, "halve_every": 0}},
        "generator": {"d_model": 16, "n_layers": 1, "n_heads": 2, "p_init_std": 1.0},
        "stage1": {"epochs": 6, "lr": {"initial": 1.0, "halve_every": 0}, "n": 2},
        "stage2": {"epochs": 2, "m": 8},
        "adapt": {
            "small_arch": {"kind": "mlp", "input_shape": [4], "classes": 3, "widths": {"hidden": 4}},
            "epochs": 3,
            "lr": {"initial": 0.001, "halve_every": 0},
            "baseline_lr": {"initial": 0.05, "halve_every": 0},
            "baseline_batch_size": 16
        },
        "output_dir": "out"
    });
    edit(&mut v);
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    path
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn missing_dataset_is_a_config_error_with_pointer() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), |v| {
        v["arch"] = serde_json::json!({"kind": "cnn2", "input_shape": [1, 14, 14], "classes": 10});
        v["dataset"]["source"] = serde_json::json!({"kind": "idx", "dir": "no-such-dir"});
        v.as_object_mut().unwrap().remove("adapt");
    });
    let out = neurogen(&["build-corpus", "-c", arg(&cfg)]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("/dataset/source/dir"), "{}", stderr(&out));
}

#[test]
fn unknown_config_key_is_reported_by_pointer() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), |v| v["stage1"]["epoch"] = 3.into());
    let out = neurogen(&["stage1", "-c", arg(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("/stage1/epoch"), "{}", stderr(&out));
}

#[test]
fn artifacts_for_another_architecture_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), |_| {});
    assert!(neurogen(&["build-corpus", "-c", arg(&cfg)]).status.success());

    let other = tempfile::tempdir().unwrap();
    let wide = small_config(other.path(), |v| v["arch"]["widths"]["hidden"] = 12.into());
    let corpus = dir.path().join("out").join(CORPUS_FILE);
    let out = neurogen(&["stage1", "-c", arg(&wide), "--corpus", arg(&corpus)]);
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));

    let cnn = builtin_arch(ArchKind::Cnn2, &[1, 14, 14], 10).unwrap();
    let weights = dir.path().join("cnn2.ngpw");
    write_weights(&weights, &FlatParams::zeros(&cnn)).unwrap();
    let out = neurogen(&["eval", "-c", arg(&cfg), "--weights", arg(&weights)]);
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));
}

#[test]
fn zero_weights_score_the_first_class_prior() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), |_| {});
    let widths = Widths {
        hidden: Some(8),
        ..Default::default()
    };
    let arch = builtin_arch_with(ArchKind::Mlp, &[4], 3, &widths).unwrap();
    let weights = dir.path().join("zeros.ngpw");
    write_weights(&weights, &FlatParams::zeros(&arch)).unwrap();
    let out = neurogen(&["eval", "-c", arg(&cfg), "--weights", arg(&weights)]);
    assert!(out.status.success(), "{}", stderr(&out));

    // Same data the binary draws: blobs seeded from the "data" stream.
    let ds = synth_blobs(3, 40, 4, 6.0, neurogen::seed::derive_seed(5, "data")).unwrap();
    let prior = ds.test.class_priors(3)[0];
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(stdout.trim(), format!("accuracy {prior:.4}"));
}

#[test]
fn pipeline_is_reproducible_and_writes_curves() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), |_| {});
    let out_dir = dir.path().join("out");
    let c = arg(&cfg);

    assert!(neurogen(&["build-corpus", "-c", c]).status.success());
    let first = fs::read(out_dir.join(CORPUS_FILE)).unwrap();
    assert!(neurogen(&["build-corpus", "-c", c]).status.success());
    assert_eq!(first, fs::read(out_dir.join(CORPUS_FILE)).unwrap());

    let out = neurogen(&["stage1", "-c", c, "--epochs", "4"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let curve = fs::read_to_string(out_dir.join(STAGE1_DIR).join(CURVE_FILE)).unwrap();
    assert_eq!(curve.lines().count(), 1 + 4);

    for args in [
        vec!["stage2", "-c", c],
        vec!["ablate", "-c", c, "--alpha", "0.2"],
        vec!["adapt", "-c", c],
        vec!["report", "-c", c],
    ] {
        let out = neurogen(&args);
        assert!(out.status.success(), "{args:?}: {}", stderr(&out));
    }
    assert!(out_dir.join("ablate-alpha0.2").join(CURVE_FILE).is_file());

    let generated = fs::read_to_string(out_dir.join("adapt/generated.csv")).unwrap();
    let classical = fs::read_to_string(out_dir.join("adapt/classical.csv")).unwrap();
    assert_eq!(generated.lines().count(), 1 + 3);
    assert_eq!(generated.lines().count(), classical.lines().count());

    let record: MetricsRecord = serde_json::from_slice(&fs::read(out_dir.join("metrics/adapt.json")).unwrap()).unwrap();
    assert_eq!(record.command, "adapt");
    assert_eq!(record.config_hash.len(), 64);
    assert!(record.metrics.contains_key("classical_accuracy"));
    let report = fs::read_to_string(out_dir.join("report.csv")).unwrap();
    assert!(report.starts_with("run_id,command,config_hash,metric,value"));
    assert!(report.contains(",stage2,"));
}

#[test]
fn conflicting_clip_flags_are_rejected_by_the_parser() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), |_| {});
    let out = neurogen(&["ablate", "-c", arg(&cfg), "--alpha", "0.5", "--no-clip"]);
    assert_eq!(out.status.code(), Some(2));
}
