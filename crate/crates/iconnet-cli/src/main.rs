//! Command-line front door: dataset synthesis, training, evaluation,
//! checkpoint inspection, and frequency-response export.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use iconnet::firconv::frequency_response;
use iconnet::harness::{
    atomic_write, compute_metrics, export_model_responses, load_experiment_config,
    load_manifest_dataset, load_synth_spec, run_experiment, stratified_holdout, synth_dataset,
    write_wav, DatasetSource, ExperimentConfig, SynthSpec,
};
use iconnet::nn::{
    model_from_checkpoint, read_checkpoint, train, write_checkpoint, Checkpoint, CheckpointMeta,
    EpochStats, Model, TrainConfig,
};
use iconnet::{Error, Result};

#[derive(Parser)]
#[command(
    name = "iconnet",
    version,
    about = "Waveform classifier with interpretable band-pass filters"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic WAV dataset plus a CSV manifest.
    Synth {
        /// JSON synthesis spec; omitted, the built-in 3-class band task is used.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Output directory for the WAV files and manifest.csv.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one model per the experiment config and write a checkpoint.
    Train {
        /// JSON experiment config.
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Optional JSON training-history report.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Score a checkpoint against a labeled WAV manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// CSV manifest (`path,label`); audio is resampled to the model rate.
        #[arg(long)]
        manifest: PathBuf,
        /// Optional JSON metrics report.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Print every kernel's band, window coefficients, and peak gain.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Write per-kernel frequency-response CSVs plus a band summary.
    ExportResponse {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory for the CSV files.
        #[arg(long)]
        out: PathBuf,
        /// Frequency grid size from DC to Nyquist.
        #[arg(long, default_value_t = 512)]
        points: usize,
    },
    /// Run stratified k-fold cross-validation per the experiment config.
    Kfold {
        /// JSON experiment config.
        #[arg(long)]
        config: PathBuf,
        /// JSON report output path.
        #[arg(long)]
        report: PathBuf,
    },
}

/// 0 ok, 2 usage/config error, 3 data/format error, 4 numeric failure.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config { .. } | Error::InvalidArgument(_) | Error::SignalTooShort { .. } => 2,
        Error::Numeric(_) => 4,
        _ => 3,
    }
}

fn init_threads() -> Result<()> {
    if let Ok(raw) = std::env::var("ICONNET_THREADS") {
        let n: usize = raw
            .parse()
            .map_err(|_| Error::config("ICONNET_THREADS", format!("not a thread count: {raw}")))?;
        if n == 0 {
            return Err(Error::config("ICONNET_THREADS", "must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::config("ICONNET_THREADS", e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    // Die quietly when a downstream pipe closes (`iconnet inspect | head`)
    // instead of panicking mid-print.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    let outcome = init_threads().and_then(|()| match cli.command {
        Command::Synth { spec, out, seed } => cmd_synth(spec.as_deref(), &out, seed),
        Command::Train {
            config,
            out,
            report,
        } => cmd_train(&config, &out, report.as_deref()),
        Command::Eval {
            checkpoint,
            manifest,
            report,
        } => cmd_eval(&checkpoint, &manifest, report.as_deref()),
        Command::Inspect { checkpoint } => cmd_inspect(&checkpoint),
        Command::ExportResponse {
            checkpoint,
            out,
            points,
        } => cmd_export_response(&checkpoint, &out, points),
        Command::Kfold { config, report } => cmd_kfold(&config, &report),
    });
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn cmd_synth(spec: Option<&Path>, out: &Path, seed: u64) -> Result<()> {
    let spec = match spec {
        Some(path) => load_synth_spec(path)?,
        None => SynthSpec::default(),
    };
    let data = synth_dataset(&spec, seed)?;
    fs::create_dir_all(out)?;
    let mut manifest = String::from("path,label\n");
    let mut per_class = vec![0usize; data.class_names.len()];
    for item in &data.items {
        let class = &data.class_names[item.label];
        let name = format!("{class}_{:04}.wav", per_class[item.label]);
        per_class[item.label] += 1;
        write_wav(&out.join(&name), &item.waveform, item.sample_rate)?;
        manifest.push_str(&format!("{name},{class}\n"));
    }
    atomic_write(&out.join("manifest.csv"), manifest.as_bytes())?;
    println!(
        "wrote {} files across {} classes to {}",
        data.items.len(),
        data.class_names.len(),
        out.display()
    );
    Ok(())
}

/// Everything cmd_train records besides the checkpoint itself.
#[derive(Serialize)]
struct TrainReport {
    class_names: Vec<String>,
    variant: String,
    best_epoch: usize,
    best_val_ua: f64,
    history: Vec<EpochStats>,
}

fn cmd_train(config_path: &Path, out: &Path, report_path: Option<&Path>) -> Result<()> {
    let config = load_experiment_config(config_path)?;
    config.validate()?;
    let dataset = config.load_dataset()?;
    if dataset.class_names.len() < 2 {
        return Err(Error::invalid("need at least 2 classes to train"));
    }
    let sample_rate = dataset.items[0].sample_rate;
    let labels = dataset.labels();
    let waves: Vec<Vec<f64>> = dataset.items.into_iter().map(|i| i.waveform).collect();

    let (mut train_idx, mut val_idx) =
        stratified_holdout(&labels, config.validation_fraction, config.seed)?;
    if val_idx.is_empty() {
        val_idx = train_idx.clone();
    }
    if train_idx.is_empty() {
        train_idx = val_idx.clone();
    }
    let gather_waves = |idx: &[usize]| -> Vec<Vec<f64>> {
        idx.iter().map(|&i| waves[i].clone()).collect()
    };
    let gather_labels =
        |idx: &[usize]| -> Vec<usize> { idx.iter().map(|&i| labels[i]).collect() };

    let model = build_from_config(&config, sample_rate, dataset.class_names.len())?;
    let train_cfg = TrainConfig {
        seed: config.seed,
        ..config.training
    };
    let outcome = train(
        model,
        &gather_waves(&train_idx),
        &gather_labels(&train_idx),
        &gather_waves(&val_idx),
        &gather_labels(&val_idx),
        &train_cfg,
    )?;

    let meta = CheckpointMeta {
        sample_rate,
        class_names: dataset.class_names.clone(),
        blocks: outcome.model.blocks.iter().map(|b| b.config.clone()).collect(),
        classifier: outcome.model.classifier.config.clone(),
    };
    let mut bytes = Vec::new();
    write_checkpoint(&outcome.model, &meta, &mut bytes)?;
    atomic_write(out, &bytes)?;

    if let Some(dir) = &config.export_responses {
        export_model_responses(&outcome.model, sample_rate, config.response_points, dir)?;
    }
    if let Some(path) = report_path {
        let report = TrainReport {
            class_names: dataset.class_names,
            variant: config.variant.name().to_string(),
            best_epoch: outcome.best_epoch,
            best_val_ua: outcome.best_val_ua,
            history: outcome.history.clone(),
        };
        write_json(path, &report)?;
    }
    println!(
        "checkpoint written to {} (best epoch {}, validation UA {:.2}%)",
        out.display(),
        outcome.best_epoch,
        outcome.best_val_ua
    );
    Ok(())
}

fn build_from_config(
    config: &ExperimentConfig,
    sample_rate: f64,
    num_classes: usize,
) -> Result<Model> {
    let arch = config.resolved_architecture()?;
    iconnet::harness::build_model(&arch, config.variant, sample_rate, num_classes, config.seed)
}

fn cmd_eval(checkpoint: &Path, manifest: &Path, report_path: Option<&Path>) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let model = model_from_checkpoint(&ckpt)?;
    let dataset = load_manifest_dataset(&DatasetSource {
        manifest: manifest.to_path_buf(),
        resample_to_hz: Some(ckpt.meta.sample_rate),
    })?;
    // Manifest labels are matched to checkpoint classes by name.
    let class_map: Vec<usize> = dataset
        .class_names
        .iter()
        .map(|name| {
            ckpt.meta
                .class_names
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| {
                    Error::format(
                        "manifest",
                        format!(
                            "label `{name}` is not among the checkpoint classes [{}]",
                            ckpt.meta.class_names.join(", ")
                        ),
                    )
                })
        })
        .collect::<Result<_>>()?;
    let labels: Vec<usize> = dataset.items.iter().map(|i| class_map[i.label]).collect();
    let predictions: Vec<usize> = dataset
        .items
        .par_iter()
        .map(|item| model.predict(&item.waveform))
        .collect::<Result<_>>()?;
    let metrics = compute_metrics(&predictions, &labels, ckpt.meta.class_names.len())?;
    println!(
        "UA {:.2}%  UF1 {:.2}%  weighted F1 {:.2}%  ({} items)",
        metrics.ua,
        metrics.uf1,
        metrics.f1_weighted,
        labels.len()
    );
    println!("confusion (rows = label, columns = prediction):");
    for (c, row) in metrics.confusion.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:6}")).collect();
        println!("  {:>12} {}", ckpt.meta.class_names[c], cells.join(" "));
    }
    if let Some(path) = report_path {
        write_json(path, &metrics)?;
    }
    Ok(())
}

fn cmd_inspect(checkpoint: &Path) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let model = model_from_checkpoint(&ckpt)?;
    println!("sample_rate: {} Hz", ckpt.meta.sample_rate);
    println!("classes: {}", ckpt.meta.class_names.join(", "));
    println!(
        "parameters: {} learnable ({} front-end)",
        model.param_count(),
        model.frontend_param_count()
    );
    let mut rate = ckpt.meta.sample_rate;
    let mut index = 0usize;
    for (b, block) in model.blocks.iter().enumerate() {
        println!(
            "block {b}: {} kernels x {} taps, variant {}, input rate {rate} Hz, downsample {}",
            block.config.num_kernels,
            block.config.kernel_taps,
            block.config.variant.name(),
            block.config.downsample_factor
        );
        for ker in &block.kernels {
            let response = frequency_response(&ker.taps, 512)?;
            let (_, peak_db) = response.peak();
            let phi: Vec<String> = ker.window.phi.iter().map(|p| format!("{p:.4}")).collect();
            println!(
                "  kernel {index:4}  f0 {:9.2} Hz  f_delta {:9.2} Hz  peak {:7.2} dB  phi [{}]",
                ker.band.f0 * rate,
                ker.band.f_delta * rate,
                peak_db,
                phi.join(", ")
            );
            index += 1;
        }
        rate /= block.config.downsample_factor as f64;
    }
    Ok(())
}

fn cmd_export_response(checkpoint: &Path, out: &Path, points: usize) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let model = model_from_checkpoint(&ckpt)?;
    let summary = export_model_responses(&model, ckpt.meta.sample_rate, points, out)?;
    let kernels: usize = model.blocks.iter().map(|b| b.kernels.len()).sum();
    println!(
        "wrote {kernels} kernel responses and {} to {}",
        summary.file_name().unwrap_or_default().to_string_lossy(),
        out.display()
    );
    Ok(())
}

fn cmd_kfold(config_path: &Path, report_path: &Path) -> Result<()> {
    let config = load_experiment_config(config_path)?;
    let report = run_experiment(&config)?;
    write_json(report_path, &report)?;
    println!(
        "{}-fold UA {:.2} +/- {:.2}  UF1 {:.2} +/- {:.2}  weighted F1 {:.2} +/- {:.2}",
        report.folds.len(),
        report.ua_mean,
        report.ua_std,
        report.uf1_mean,
        report.uf1_std,
        report.f1_mean,
        report.f1_std
    );
    println!("report written to {}", report_path.display());
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })?;
    read_checkpoint(&mut bytes.as_slice())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_by_error_class() {
        let io = Error::Io(std::io::Error::new(std::io::ErrorKind::NotFound, "gone"));
        let json = Error::Json(serde_json::from_str::<serde_json::Value>("{").unwrap_err());
        for (err, code) in [
            (Error::config("a.json", "bad"), 2),
            (Error::invalid("bad flag"), 2),
            (Error::SignalTooShort { len: 3, taps: 9 }, 2),
            (Error::format("wav", "truncated"), 3),
            (Error::CheckpointVersion("bad magic bytes".into()), 3),
            (io, 3),
            (json, 3),
            (Error::Numeric("loss is NaN".into()), 4),
        ] {
            assert_eq!(exit_code(&err), code, "{err}");
        }
    }
}
