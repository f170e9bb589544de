//! Black-box tests of the `iconnet` binary: the synth -> train -> eval ->
//! inspect -> export-response flow, plus the exit-code contract on the
//! documented failure classes.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use iconnet::frontend::{LrnParams, Variant};
use iconnet::harness::{
    Architecture, BandInitSpec, BlockSpec, ClassRecipe, DatasetSource, ExperimentConfig,
    SynthSpec, ToneBand,
};
use iconnet::nn::{Pool, TrainConfig};
use iconnet::windows::WindowPreset;

fn iconnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iconnet"))
        .args(args)
        .output()
        .unwrap()
}

fn two_class_spec() -> SynthSpec {
    let band = |name: &str, low: f64, high: f64| ClassRecipe {
        name: name.to_string(),
        bands: vec![ToneBand {
            low_hz: low,
            high_hz: high,
            amplitude: 1.0,
        }],
    };
    SynthSpec {
        classes: vec![band("low", 300.0, 600.0), band("high", 1200.0, 1800.0)],
        n_per_class: 4,
        duration_s: 0.2,
        sample_rate: 8_000.0,
        noise_db: Some(-20.0),
        tones_per_band: 2,
    }
}

fn tiny_config(manifest: &Path) -> ExperimentConfig {
    ExperimentConfig {
        dataset: Some(DatasetSource {
            manifest: manifest.to_path_buf(),
            resample_to_hz: None,
        }),
        synth: None,
        preset: None,
        architecture: Some(Architecture {
            blocks: vec![BlockSpec {
                num_kernels: 4,
                kernel_taps: 33,
                window_preset: WindowPreset::Hann,
                downsample_factor: 4,
                lrn: LrnParams::default(),
                nlrelu_beta: 1.0,
                band_init: BandInitSpec::default(),
            }],
            pool: Pool::Mean,
            hidden_nodes: 8,
        }),
        variant: Variant::BW,
        training: TrainConfig {
            max_epochs: 1,
            batch_size: 4,
            max_lr: 5e-3,
            ..TrainConfig::default()
        },
        cv_folds: 2,
        validation_fraction: 0.25,
        seed: 1,
        export_responses: None,
        response_points: 64,
    }
}

#[test]
fn full_pipeline_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    let spec_path = dir.path().join("spec.json");
    fs::write(&spec_path, serde_json::to_string(&two_class_spec()).unwrap()).unwrap();

    let out = iconnet(&[
        "synth",
        "--spec",
        spec_path.to_str().unwrap(),
        "--out",
        data_dir.to_str().unwrap(),
        "--seed",
        "5",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = data_dir.join("manifest.csv");
    let manifest_text = fs::read_to_string(&manifest).unwrap();
    assert_eq!(manifest_text.lines().next(), Some("path,label"));
    assert_eq!(manifest_text.lines().count(), 9, "header plus 8 items");

    let config_path = dir.path().join("config.json");
    fs::write(
        &config_path,
        serde_json::to_string_pretty(&tiny_config(&manifest)).unwrap(),
    )
    .unwrap();
    let checkpoint = dir.path().join("model.ckpt");
    let out = iconnet(&[
        "train",
        "--config",
        config_path.to_str().unwrap(),
        "--out",
        checkpoint.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(checkpoint.exists());

    let report_path = dir.path().join("metrics.json");
    let out = iconnet(&[
        "eval",
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--report",
        report_path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("UA"), "eval output: {stdout}");
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
    assert!(report["ua"].is_number());

    let out = iconnet(&["inspect", "--checkpoint", checkpoint.to_str().unwrap()]);
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("kernel") && stdout.contains("f0"), "inspect output: {stdout}");

    let resp_dir = dir.path().join("responses");
    let out = iconnet(&[
        "export-response",
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--out",
        resp_dir.to_str().unwrap(),
        "--points",
        "64",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(resp_dir.join("summary.csv").exists());
    let first = fs::read_to_string(resp_dir.join("kernel_0000.csv")).unwrap();
    assert_eq!(first.lines().count(), 65, "header plus one row per point");
}

#[test]
fn synth_is_deterministic_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let spec_path = dir.path().join("spec.json");
    fs::write(&spec_path, serde_json::to_string(&two_class_spec()).unwrap()).unwrap();
    let gen = |name: &str| -> Vec<u8> {
        let out_dir = dir.path().join(name);
        let out = iconnet(&[
            "synth",
            "--spec",
            spec_path.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
            "--seed",
            "11",
        ]);
        assert!(out.status.success());
        let mut names: Vec<_> = fs::read_dir(&out_dir)
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        names.sort();
        names
            .iter()
            .flat_map(|n| fs::read(out_dir.join(n)).unwrap())
            .collect()
    };
    assert_eq!(gen("a"), gen("b"), "same seed must reproduce every byte");
}

#[test]
fn usage_and_config_errors_exit_2() {
    // Config file that does not exist.
    let out = iconnet(&["train", "--config", "/nonexistent/c.json", "--out", "/tmp/x.ckpt"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("c.json"));

    // Config that fails validation: no dataset source at all.
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("bad.json");
    fs::write(&config_path, "{}").unwrap();
    let out = iconnet(&[
        "train",
        "--config",
        config_path.to_str().unwrap(),
        "--out",
        dir.path().join("m.ckpt").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    // Unknown flag is a clap usage error.
    let out = iconnet(&["synth", "--nope"]);
    assert_eq!(out.status.code(), Some(2));

    // Bad worker-count environment variable.
    let out = Command::new(env!("CARGO_BIN_EXE_iconnet"))
        .env("ICONNET_THREADS", "many")
        .args(["inspect", "--checkpoint", "whatever.ckpt"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ICONNET_THREADS"));
}

#[test]
fn data_and_format_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();

    // Garbage checkpoint bytes.
    let bad_ckpt = dir.path().join("bad.ckpt");
    fs::write(&bad_ckpt, b"not a checkpoint at all").unwrap();
    let out = iconnet(&["inspect", "--checkpoint", bad_ckpt.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint"));

    // Missing checkpoint file is an I/O error, reported with its path.
    let gone = dir.path().join("gone.ckpt");
    let out = iconnet(&["inspect", "--checkpoint", gone.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gone.ckpt"));

    // Manifest with a wrong header.
    let manifest = dir.path().join("manifest.csv");
    fs::write(&manifest, "file,class\nx.wav,low\n").unwrap();
    let ckpt = dir.path().join("m.ckpt");
    fs::write(&ckpt, b"junk").unwrap();
    let out = iconnet(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn help_exits_0() {
    for args in [
        vec!["--help"],
        vec!["synth", "--help"],
        vec!["train", "--help"],
        vec!["eval", "--help"],
        vec!["inspect", "--help"],
        vec!["export-response", "--help"],
        vec!["kfold", "--help"],
    ] {
        let out = iconnet(&args);
        assert_eq!(out.status.code(), Some(0), "args: {args:?}");
        assert!(!out.stdout.is_empty());
    }
}
