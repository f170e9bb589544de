//! Data plumbing and experiment orchestration: WAV ingest, polyphase
//! resampling, synthetic tone datasets, stratified k-fold splitting,
//! classification metrics, architecture presets, and cross-validated runs.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::firconv::frequency_response;
use crate::frontend::{FrontendBlock, FrontendBlockConfig, LrnParams, Variant};
use crate::nn::{
    train, Classifier, ClassifierConfig, Model, Pool, TrainConfig,
};
use crate::windows::{mel_band_init, WindowPreset};

// --- Atomic file output -----------------------------------------------------

/// Writes via a sibling temp file plus rename, so a crash mid-write never
/// leaves a partial file at `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("not a writable path: {}", path.display())))?;
    let mut tmp_name = file_name.to_os_string();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    fs::write(&tmp, bytes)?;
    if let Err(e) = fs::rename(&tmp, path) {
        let _ = fs::remove_file(&tmp);
        return Err(e.into());
    }
    Ok(())
}

// --- WAV I/O ----------------------------------------------------------------

fn le_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn le_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Attaches the offending path to a bare OS error.
pub(crate) fn io_at(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(
        e.kind(),
        format!("{}: {e}", path.display()),
    ))
}

/// Reads a PCM 16-bit mono or stereo WAV file. Samples are scaled by
/// 1/32768 into [-1, 1]; stereo frames are averaged to mono.
pub fn read_wav(path: &Path) -> Result<(Vec<f64>, f64)> {
    let bytes = fs::read(path).map_err(|e| io_at(path, e))?;
    parse_wav(&bytes)
}

fn parse_wav(bytes: &[u8]) -> Result<(Vec<f64>, f64)> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" {
        return Err(Error::format("RIFF", "not a RIFF file"));
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(Error::format("WAVE", "RIFF form is not WAVE"));
    }
    let mut fmt: Option<(u16, u16, u32, u16)> = None; // codec, channels, rate, bits
    let mut data: Option<&[u8]> = None;
    let mut pos = 12;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = le_u32(bytes, pos + 4) as usize;
        let body_start = pos + 8;
        if body_start + size > bytes.len() {
            let name = String::from_utf8_lossy(id).into_owned();
            return Err(Error::format(name, "chunk extends past end of file"));
        }
        let body = &bytes[body_start..body_start + size];
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(Error::format("fmt ", "chunk too small"));
                }
                fmt = Some((
                    le_u16(body, 0),
                    le_u16(body, 2),
                    le_u32(body, 4),
                    le_u16(body, 14),
                ));
            }
            b"data" => {
                if data.is_none() {
                    data = Some(body);
                }
            }
            _ => {}
        }
        pos = body_start + size + (size & 1); // chunks are word-aligned
    }
    let (codec, channels, rate, bits) = fmt.ok_or_else(|| Error::format("fmt ", "chunk missing"))?;
    if codec != 1 {
        return Err(Error::format(
            "fmt ",
            format!("unsupported codec {codec}, only PCM (1) is readable"),
        ));
    }
    if bits != 16 {
        return Err(Error::format(
            "fmt ",
            format!("unsupported bit depth {bits}, only 16-bit PCM is readable"),
        ));
    }
    if !(channels == 1 || channels == 2) {
        return Err(Error::format(
            "fmt ",
            format!("unsupported channel count {channels}"),
        ));
    }
    let data = data.ok_or_else(|| Error::format("data", "chunk missing"))?;
    let frame_bytes = 2 * channels as usize;
    if data.len() % frame_bytes != 0 {
        return Err(Error::format(
            "data",
            format!("chunk length {} is not whole 16-bit frames", data.len()),
        ));
    }
    let scale = 1.0 / 32768.0;
    let mut samples = Vec::with_capacity(data.len() / frame_bytes);
    for frame in data.chunks_exact(frame_bytes) {
        let mut acc = 0.0;
        for ch in frame.chunks_exact(2) {
            acc += i16::from_le_bytes([ch[0], ch[1]]) as f64 * scale;
        }
        samples.push(acc / channels as f64);
    }
    Ok((samples, rate as f64))
}

/// Writes a mono PCM 16-bit WAV file (atomically). Samples are clamped to
/// [-1, 1] and quantized by 32768.
pub fn write_wav(path: &Path, samples: &[f64], sample_rate: f64) -> Result<()> {
    assert!(sample_rate > 0.0, "sample rate must be positive");
    let rate = sample_rate.round() as u32;
    let data_len = 2 * samples.len() as u32;
    let mut bytes = Vec::with_capacity(44 + data_len as usize);
    bytes.extend_from_slice(b"RIFF");
    bytes.extend_from_slice(&(36 + data_len).to_le_bytes());
    bytes.extend_from_slice(b"WAVE");
    bytes.extend_from_slice(b"fmt ");
    bytes.extend_from_slice(&16u32.to_le_bytes());
    bytes.extend_from_slice(&1u16.to_le_bytes()); // PCM
    bytes.extend_from_slice(&1u16.to_le_bytes()); // mono
    bytes.extend_from_slice(&rate.to_le_bytes());
    bytes.extend_from_slice(&(rate * 2).to_le_bytes()); // byte rate
    bytes.extend_from_slice(&2u16.to_le_bytes()); // block align
    bytes.extend_from_slice(&16u16.to_le_bytes()); // bits per sample
    bytes.extend_from_slice(b"data");
    bytes.extend_from_slice(&data_len.to_le_bytes());
    for &s in samples {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        bytes.extend_from_slice(&q.to_le_bytes());
    }
    atomic_write(path, &bytes)
}

// --- Resampling -------------------------------------------------------------

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

/// Zero crossings of the sinc kept on each side of the resampling kernel.
const RESAMPLE_ZERO_CROSSINGS: f64 = 64.0;

/// Sample-rate conversion by a Hann-windowed-sinc polyphase filter.
///
/// The filter runs at the common upsampled rate `from * L` (rates reduced by
/// their gcd), cut off at the lower Nyquist, and is evaluated symmetrically
/// around each output instant, so the output is delay-free. Equal rates
/// return the input unchanged. Rates are rounded to whole Hz.
pub fn resample(signal: &[f64], from_rate: f64, to_rate: f64) -> Vec<f64> {
    assert!(
        from_rate > 0.0 && to_rate > 0.0,
        "sample rates must be positive"
    );
    if from_rate == to_rate || signal.is_empty() {
        return signal.to_vec();
    }
    let from = (from_rate.round() as u64).max(1);
    let to = (to_rate.round() as u64).max(1);
    if from == to {
        return signal.to_vec();
    }
    let g = gcd(from, to);
    let l = (to / g) as i64; // upsampling factor
    let m = (from / g) as i64; // decimation factor
    let n = signal.len() as i64;

    // Cutoff in cycles per upsampled sample; kernel long enough for the
    // configured zero-crossing count at that cutoff.
    let fc = 0.5 * from.min(to) as f64 / (from as f64 * l as f64);
    let half = (RESAMPLE_ZERO_CROSSINGS / (2.0 * fc)).ceil() as i64;
    let mut h = vec![0.0f64; (2 * half + 1) as usize];
    for d in -half..=half {
        let t = d as f64;
        let x = 2.0 * std::f64::consts::PI * fc * t;
        let sinc = if d == 0 { 1.0 } else { x.sin() / x };
        let win = 0.5 * (1.0 + (std::f64::consts::PI * t / half as f64).cos());
        h[(d + half) as usize] = l as f64 * 2.0 * fc * sinc * win;
    }

    let n_out = ((signal.len() as u64 * to).div_ceil(from)) as usize;
    let mut out = Vec::with_capacity(n_out);
    for j in 0..n_out as i64 {
        let u = j * m; // output instant on the upsampled grid
        let k_lo = ((u - half) + l - 1).div_euclid(l).max(0);
        let k_hi = (u + half).div_euclid(l).min(n - 1);
        let mut acc = 0.0;
        for k in k_lo..=k_hi {
            acc += signal[k as usize] * h[(u - k * l + half) as usize];
        }
        out.push(acc);
    }
    out
}

// --- Synthetic datasets -----------------------------------------------------

/// Target RMS of the tone mixture before noise is added.
pub const TONE_RMS: f64 = 0.2;

fn default_amplitude() -> f64 {
    1.0
}

/// One frequency band a class draws its tones from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToneBand {
    pub low_hz: f64,
    pub high_hz: f64,
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
}

/// A class defined as a set of tone bands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRecipe {
    pub name: String,
    pub bands: Vec<ToneBand>,
}

fn default_n_per_class() -> usize {
    300
}

fn default_duration_s() -> f64 {
    1.0
}

fn default_sample_rate() -> f64 {
    16000.0
}

fn default_noise_db() -> Option<f64> {
    Some(-20.0)
}

fn default_tones_per_band() -> usize {
    3
}

/// Generator description for a synthetic labeled dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: Vec<ClassRecipe>,
    #[serde(default = "default_n_per_class")]
    pub n_per_class: usize,
    #[serde(default = "default_duration_s")]
    pub duration_s: f64,
    #[serde(default = "default_sample_rate")]
    pub sample_rate: f64,
    /// White-noise level in dB relative to the tone RMS; `null` disables it.
    #[serde(default = "default_noise_db")]
    pub noise_db: Option<f64>,
    #[serde(default = "default_tones_per_band")]
    pub tones_per_band: usize,
}

impl Default for SynthSpec {
    /// Three well-separated bands, one second per item at 16 kHz.
    fn default() -> Self {
        let band = |name: &str, low: f64, high: f64| ClassRecipe {
            name: name.to_string(),
            bands: vec![ToneBand {
                low_hz: low,
                high_hz: high,
                amplitude: 1.0,
            }],
        };
        Self {
            classes: vec![
                band("low", 200.0, 400.0),
                band("mid", 800.0, 1200.0),
                band("high", 2400.0, 3200.0),
            ],
            n_per_class: default_n_per_class(),
            duration_s: default_duration_s(),
            sample_rate: default_sample_rate(),
            noise_db: default_noise_db(),
            tones_per_band: default_tones_per_band(),
        }
    }
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::invalid("synthesis needs at least 2 classes"));
        }
        if self.n_per_class < 1 || self.tones_per_band < 1 {
            return Err(Error::invalid(
                "n_per_class and tones_per_band must be at least 1",
            ));
        }
        if !(self.duration_s > 0.0) || !(self.sample_rate > 0.0) {
            return Err(Error::invalid("duration and sample rate must be positive"));
        }
        let nyquist = self.sample_rate / 2.0;
        for class in &self.classes {
            if class.bands.is_empty() {
                return Err(Error::invalid(format!(
                    "class `{}` has no tone bands",
                    class.name
                )));
            }
            for band in &class.bands {
                if !(band.low_hz >= 0.0 && band.low_hz <= band.high_hz && band.high_hz <= nyquist)
                {
                    return Err(Error::invalid(format!(
                        "class `{}` band {}..{} Hz is outside 0..{nyquist} Hz",
                        class.name, band.low_hz, band.high_hz
                    )));
                }
                if !(band.amplitude > 0.0) {
                    return Err(Error::invalid(format!(
                        "class `{}` has a non-positive band amplitude",
                        class.name
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One labeled waveform.
#[derive(Debug, Clone)]
pub struct LabeledItem {
    pub waveform: Vec<f64>,
    pub sample_rate: f64,
    pub label: usize,
}

/// A labeled waveform collection with shared class names.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub items: Vec<LabeledItem>,
    pub class_names: Vec<String>,
}

impl LabeledDataset {
    pub fn labels(&self) -> Vec<usize> {
        self.items.iter().map(|i| i.label).collect()
    }
}

/// Generates `n_per_class` items per class: random tones drawn from the
/// class bands (mixture normalized to [`TONE_RMS`]) plus optional uniform
/// white noise. Deterministic for a fixed seed.
pub fn synth_dataset(spec: &SynthSpec, seed: u64) -> Result<LabeledDataset> {
    spec.validate()?;
    let n = (spec.duration_s * spec.sample_rate).round() as usize;
    if n == 0 {
        return Err(Error::invalid("duration rounds to zero samples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(spec.classes.len() * spec.n_per_class);
    for (label, class) in spec.classes.iter().enumerate() {
        for _ in 0..spec.n_per_class {
            let mut wave = vec![0.0f64; n];
            for band in &class.bands {
                for _ in 0..spec.tones_per_band {
                    let freq = if band.high_hz > band.low_hz {
                        rng.gen_range(band.low_hz..band.high_hz)
                    } else {
                        band.low_hz
                    };
                    let phase = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
                    let w = 2.0 * std::f64::consts::PI * freq / spec.sample_rate;
                    for (t, slot) in wave.iter_mut().enumerate() {
                        *slot += band.amplitude * (w * t as f64 + phase).sin();
                    }
                }
            }
            let rms = (wave.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
            if rms > 0.0 {
                let s = TONE_RMS / rms;
                for v in &mut wave {
                    *v *= s;
                }
            }
            if let Some(db) = spec.noise_db {
                // Uniform noise in [-a, a] has RMS a/sqrt(3).
                let a = 3f64.sqrt() * TONE_RMS * 10f64.powf(db / 20.0);
                for v in &mut wave {
                    *v += rng.gen_range(-a..a);
                }
            }
            items.push(LabeledItem {
                waveform: wave,
                sample_rate: spec.sample_rate,
                label,
            });
        }
    }
    Ok(LabeledDataset {
        items,
        class_names: spec.classes.iter().map(|c| c.name.clone()).collect(),
    })
}

// --- Manifest datasets ------------------------------------------------------

/// Where a stored dataset lives and how to normalize its rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSource {
    /// CSV manifest with a `path,label` header; WAV paths are resolved
    /// relative to the manifest's directory.
    pub manifest: PathBuf,
    /// Resample every item to this rate after reading.
    #[serde(default)]
    pub resample_to_hz: Option<f64>,
}

/// Loads the WAV files listed in a manifest. Labels are free-form strings;
/// class indices follow their sorted order.
pub fn load_manifest_dataset(source: &DatasetSource) -> Result<LabeledDataset> {
    let text = fs::read_to_string(&source.manifest).map_err(|e| io_at(&source.manifest, e))?;
    let base = source.manifest.parent().unwrap_or_else(|| Path::new("."));
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next() {
        Some(header) if header.trim() == "path,label" => {}
        _ => {
            return Err(Error::format(
                "manifest",
                "first line must be the header `path,label`",
            ))
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let (path, label) = line.split_once(',').ok_or_else(|| {
            Error::format("manifest", format!("row {} has no label column", i + 2))
        })?;
        rows.push((base.join(path.trim()), label.trim().to_string()));
    }
    if rows.is_empty() {
        return Err(Error::format("manifest", "no data rows"));
    }
    let mut class_names: Vec<String> = rows.iter().map(|(_, l)| l.clone()).collect();
    class_names.sort();
    class_names.dedup();

    let mut items = Vec::with_capacity(rows.len());
    for (path, label) in &rows {
        let (mut wave, mut rate) = read_wav(path)?;
        if let Some(target) = source.resample_to_hz {
            wave = resample(&wave, rate, target);
            rate = target;
        }
        if wave.is_empty() {
            return Err(Error::format(
                "data",
                format!("{} contains no samples", path.display()),
            ));
        }
        let class = class_names.binary_search(label).expect("label from rows");
        items.push(LabeledItem {
            waveform: wave,
            sample_rate: rate,
            label: class,
        });
    }
    let rate0 = items[0].sample_rate;
    if items.iter().any(|i| i.sample_rate != rate0) {
        return Err(Error::invalid(
            "dataset mixes sample rates; set resample_to_hz to unify them",
        ));
    }
    Ok(LabeledDataset { items, class_names })
}

// --- Stratified splitting ---------------------------------------------------

/// Per-item fold assignment from stratified dealing.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldSplit {
    pub fold_assignments: Vec<usize>,
    pub k: usize,
}

impl FoldSplit {
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        assert!(fold < self.k, "fold out of range");
        (0..self.fold_assignments.len())
            .filter(|&i| self.fold_assignments[i] == fold)
            .collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        assert!(fold < self.k, "fold out of range");
        (0..self.fold_assignments.len())
            .filter(|&i| self.fold_assignments[i] != fold)
            .collect()
    }
}

/// Shuffles each class independently, then deals its items round-robin to
/// folds, so per-class counts across folds differ by at most one.
pub fn stratified_kfold(labels: &[usize], k: usize, seed: u64) -> Result<FoldSplit> {
    if k < 2 {
        return Err(Error::invalid("need at least 2 folds"));
    }
    if labels.is_empty() {
        return Err(Error::invalid("no items to split"));
    }
    let num_classes = labels.iter().max().unwrap() + 1;
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        per_class[l].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignments = vec![0usize; labels.len()];
    for (class, idxs) in per_class.iter_mut().enumerate() {
        if idxs.is_empty() {
            continue;
        }
        if idxs.len() < k {
            return Err(Error::invalid(format!(
                "class {class} has {} items, fewer than k={k}",
                idxs.len()
            )));
        }
        idxs.shuffle(&mut rng);
        for (pos, &item) in idxs.iter().enumerate() {
            assignments[item] = pos % k;
        }
    }
    Ok(FoldSplit {
        fold_assignments: assignments,
        k,
    })
}

/// Splits indices into train/validation, taking `fraction` of each class
/// (at least one item, never a whole class) for validation. Returned index
/// lists are sorted.
pub fn stratified_holdout(
    labels: &[usize],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid("holdout fraction must be in (0, 1)"));
    }
    if labels.is_empty() {
        return Err(Error::invalid("no items to split"));
    }
    let num_classes = labels.iter().max().unwrap() + 1;
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        per_class[l].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for idxs in per_class.iter_mut() {
        if idxs.is_empty() {
            continue;
        }
        idxs.shuffle(&mut rng);
        let n = idxs.len();
        let n_val = if n < 2 {
            0
        } else {
            ((fraction * n as f64).round() as usize).clamp(1, n - 1)
        };
        val.extend_from_slice(&idxs[..n_val]);
        train.extend_from_slice(&idxs[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

// --- Metrics ----------------------------------------------------------------

/// Classification quality summary; all values in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Unweighted accuracy: mean per-class recall.
    pub ua: f64,
    /// Unweighted mean of per-class F1.
    pub uf1: f64,
    /// Support-weighted mean of per-class F1.
    pub f1_weighted: f64,
    /// `confusion[label][prediction]` counts.
    pub confusion: Vec<Vec<usize>>,
}

/// Confusion-matrix metrics. Classes with zero support are excluded from
/// the unweighted means; a class with zero precision and recall scores 0 F1.
pub fn compute_metrics(
    predictions: &[usize],
    labels: &[usize],
    num_classes: usize,
) -> Result<MetricsReport> {
    if predictions.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if num_classes < 1 {
        return Err(Error::invalid("need at least one class"));
    }
    if predictions.iter().chain(labels).any(|&v| v >= num_classes) {
        return Err(Error::invalid(format!(
            "prediction or label out of range for {num_classes} classes"
        )));
    }
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        confusion[l][p] += 1;
    }
    let mut recall_sum = 0.0;
    let mut f1_sum = 0.0;
    let mut f1_weighted_sum = 0.0;
    let mut supported = 0usize;
    let mut total_support = 0usize;
    for c in 0..num_classes {
        let support: usize = confusion[c].iter().sum();
        let predicted: usize = (0..num_classes).map(|l| confusion[l][c]).sum();
        let tp = confusion[c][c];
        let recall = if support > 0 {
            tp as f64 / support as f64
        } else {
            0.0
        };
        let precision = if predicted > 0 {
            tp as f64 / predicted as f64
        } else {
            0.0
        };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        if support > 0 {
            recall_sum += recall;
            f1_sum += f1;
            f1_weighted_sum += support as f64 * f1;
            supported += 1;
            total_support += support;
        }
    }
    if supported == 0 {
        return Err(Error::invalid("no labeled items"));
    }
    Ok(MetricsReport {
        ua: 100.0 * recall_sum / supported as f64,
        uf1: 100.0 * f1_sum / supported as f64,
        f1_weighted: 100.0 * f1_weighted_sum / total_support as f64,
        confusion,
    })
}

/// Mean and sample standard deviation (n-1 denominator; 0 when n < 2).
pub(crate) fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

// --- Architectures and presets ----------------------------------------------

fn default_f_min_hz() -> f64 {
    50.0
}

fn default_low_extra_fraction() -> f64 {
    0.25
}

/// Where a block's initial bands are laid out.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BandInitSpec {
    pub f_min_hz: f64,
    /// Defaults to the block's input Nyquist.
    pub f_max_hz: Option<f64>,
    /// Fraction of kernels re-allocated to a denser low-frequency grid.
    pub low_extra_fraction: f64,
}

impl Default for BandInitSpec {
    fn default() -> Self {
        Self {
            f_min_hz: default_f_min_hz(),
            f_max_hz: None,
            low_extra_fraction: default_low_extra_fraction(),
        }
    }
}

fn default_window_preset() -> WindowPreset {
    WindowPreset::Hann
}

fn default_nlrelu_beta() -> f64 {
    1.0
}

/// One front-end block in an experiment architecture. The trainability
/// variant is experiment-level, not per block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub num_kernels: usize,
    pub kernel_taps: usize,
    #[serde(default = "default_window_preset")]
    pub window_preset: WindowPreset,
    pub downsample_factor: usize,
    #[serde(default)]
    pub lrn: LrnParams,
    #[serde(default = "default_nlrelu_beta")]
    pub nlrelu_beta: f64,
    #[serde(default)]
    pub band_init: BandInitSpec,
}

/// Model shape: front-end blocks plus the classifier head's size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub blocks: Vec<BlockSpec>,
    pub pool: Pool,
    pub hidden_nodes: usize,
}

/// Named architecture presets: `ser-256` and `ser-456` (single wide block,
/// 512 hidden nodes, mean pooling), and `heart` (128-kernel then 32-kernel
/// blocks, 256 hidden nodes, max pooling).
pub fn preset_architecture(name: &str) -> Result<Architecture> {
    let ser_block = |kernels: usize| BlockSpec {
        num_kernels: kernels,
        kernel_taps: 255,
        window_preset: WindowPreset::Hann,
        downsample_factor: 8,
        lrn: LrnParams::default(),
        nlrelu_beta: 1.0,
        band_init: BandInitSpec::default(),
    };
    match name {
        "ser-256" => Ok(Architecture {
            blocks: vec![ser_block(256)],
            pool: Pool::Mean,
            hidden_nodes: 512,
        }),
        "ser-456" => Ok(Architecture {
            blocks: vec![ser_block(456)],
            pool: Pool::Mean,
            hidden_nodes: 512,
        }),
        "heart" => {
            let low_bands = BandInitSpec {
                f_min_hz: 20.0,
                ..BandInitSpec::default()
            };
            Ok(Architecture {
                blocks: vec![
                    BlockSpec {
                        num_kernels: 128,
                        kernel_taps: 255,
                        window_preset: WindowPreset::Hann,
                        downsample_factor: 4,
                        lrn: LrnParams::default(),
                        nlrelu_beta: 1.0,
                        band_init: low_bands,
                    },
                    BlockSpec {
                        num_kernels: 32,
                        kernel_taps: 127,
                        window_preset: WindowPreset::Hann,
                        downsample_factor: 2,
                        lrn: LrnParams::default(),
                        nlrelu_beta: 1.0,
                        band_init: low_bands,
                    },
                ],
                pool: Pool::Max,
                hidden_nodes: 256,
            })
        }
        other => Err(Error::invalid(format!(
            "unknown preset `{other}` (expected ser-256, ser-456 or heart)"
        ))),
    }
}

/// Instantiates an architecture at a sample rate. Band grids are laid out
/// per block against that block's own input rate.
pub fn build_model(
    arch: &Architecture,
    variant: Variant,
    sample_rate: f64,
    num_classes: usize,
    seed: u64,
) -> Result<Model> {
    if arch.blocks.is_empty() {
        return Err(Error::invalid("architecture needs at least one block"));
    }
    if !(sample_rate > 0.0) {
        return Err(Error::invalid("sample rate must be positive"));
    }
    let mut rate = sample_rate;
    let mut blocks = Vec::with_capacity(arch.blocks.len());
    for spec in &arch.blocks {
        let nyquist = rate / 2.0;
        let f_max = spec.band_init.f_max_hz.unwrap_or(nyquist).min(nyquist);
        let bands = mel_band_init(
            spec.num_kernels,
            rate,
            spec.band_init.f_min_hz,
            f_max,
            spec.band_init.low_extra_fraction,
        )?;
        let config = FrontendBlockConfig {
            num_kernels: spec.num_kernels,
            kernel_taps: spec.kernel_taps,
            variant,
            window_preset: spec.window_preset,
            downsample_factor: spec.downsample_factor,
            lrn: spec.lrn,
            nlrelu_beta: spec.nlrelu_beta,
        };
        blocks.push(FrontendBlock::new(config, &bands)?);
        rate /= spec.downsample_factor as f64;
    }
    let classifier = Classifier::new(
        ClassifierConfig {
            pool: arch.pool,
            hidden_nodes: arch.hidden_nodes,
            num_classes,
            leaky_slope: 0.01,
        },
        arch.blocks.last().unwrap().num_kernels,
        seed,
    )?;
    Model::new(blocks, classifier)
}

// --- Response export ----------------------------------------------------

/// Writes one frequency-response CSV per kernel plus a `summary.csv` of band
/// centers and peak gains into `dir`. Frequencies are reported in Hz against
/// each block's own input rate. Returns the summary path.
pub fn export_model_responses(
    model: &Model,
    sample_rate: f64,
    points: usize,
    dir: &Path,
) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut summary = String::from(
        "kernel,block,f0_hz,f_delta_hz,center_hz,peak_gain_db,peak_freq_hz\n",
    );
    let mut rate = sample_rate;
    let mut index = 0usize;
    for (b, block) in model.blocks.iter().enumerate() {
        for ker in &block.kernels {
            let response = frequency_response(&ker.taps, points)?;
            let mut csv = Vec::new();
            response.write_csv(rate, &mut csv)?;
            atomic_write(&dir.join(format!("kernel_{index:04}.csv")), &csv)?;
            let (peak_f, peak_db) = response.peak();
            let f0 = ker.band.f0 * rate;
            let fd = ker.band.f_delta * rate;
            summary.push_str(&format!(
                "{index},{b},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e}\n",
                f0,
                fd,
                f0 + 0.5 * fd,
                peak_db,
                peak_f * rate,
            ));
            index += 1;
        }
        rate /= block.config.downsample_factor as f64;
    }
    let summary_path = dir.join("summary.csv");
    atomic_write(&summary_path, summary.as_bytes())?;
    Ok(summary_path)
}

// --- Experiment configuration and orchestration -------------------------

fn default_cv_folds() -> usize {
    5
}

fn default_validation_fraction() -> f64 {
    0.15
}

fn default_response_points() -> usize {
    512
}

fn default_variant() -> Variant {
    Variant::Fixed
}

/// Declarative description of one experiment: a data source, a model shape,
/// the trainability variant, and the training/CV protocol.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub dataset: Option<DatasetSource>,
    #[serde(default)]
    pub synth: Option<SynthSpec>,
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub architecture: Option<Architecture>,
    #[serde(default = "default_variant")]
    pub variant: Variant,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default = "default_cv_folds")]
    pub cv_folds: usize,
    /// Stratified share of each training split held out for early stopping.
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    /// Directory for per-fold frequency-response exports.
    #[serde(default)]
    pub export_responses: Option<PathBuf>,
    #[serde(default = "default_response_points")]
    pub response_points: usize,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        match (&self.dataset, &self.synth) {
            (Some(_), Some(_)) => {
                return Err(Error::config(
                    "dataset/synth",
                    "give either a stored dataset or a synthesis spec, not both",
                ))
            }
            (None, None) => {
                return Err(Error::config(
                    "dataset/synth",
                    "a data source is required: set `dataset` or `synth`",
                ))
            }
            _ => {}
        }
        match (&self.preset, &self.architecture) {
            (Some(_), Some(_)) => {
                return Err(Error::config(
                    "preset/architecture",
                    "give either a preset name or an explicit architecture, not both",
                ))
            }
            (None, None) => {
                return Err(Error::config(
                    "preset/architecture",
                    "a model shape is required: set `preset` or `architecture`",
                ))
            }
            _ => {}
        }
        if let Some(name) = &self.preset {
            preset_architecture(name).map_err(|e| Error::config("preset", e.to_string()))?;
        }
        if self.cv_folds < 2 {
            return Err(Error::config("cv_folds", "need at least 2 folds"));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction <= 0.5) {
            return Err(Error::config(
                "validation_fraction",
                "must be in (0, 0.5]",
            ));
        }
        if self.training.max_epochs < 1 {
            return Err(Error::config("training.max_epochs", "must be at least 1"));
        }
        if self.training.batch_size < 1 {
            return Err(Error::config("training.batch_size", "must be at least 1"));
        }
        if !(self.training.max_lr > 0.0) {
            return Err(Error::config("training.max_lr", "must be positive"));
        }
        if self.response_points < 2 {
            return Err(Error::config("response_points", "need at least 2 points"));
        }
        Ok(())
    }

    pub fn resolved_architecture(&self) -> Result<Architecture> {
        match (&self.preset, &self.architecture) {
            (Some(name), None) => preset_architecture(name),
            (None, Some(arch)) => Ok(arch.clone()),
            _ => Err(Error::config(
                "preset/architecture",
                "exactly one of preset or architecture must be set",
            )),
        }
    }

    /// Loads the configured data source.
    pub fn load_dataset(&self) -> Result<LabeledDataset> {
        match (&self.dataset, &self.synth) {
            (Some(src), None) => load_manifest_dataset(src),
            (None, Some(spec)) => synth_dataset(spec, self.seed),
            _ => Err(Error::config(
                "dataset/synth",
                "exactly one data source must be set",
            )),
        }
    }
}

/// Parses a JSON experiment config; parse problems surface as config errors
/// carrying the file path.
pub fn load_experiment_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::config(path.display().to_string(), e.to_string()))
}

/// Parses a JSON synthesis spec with the same error contract as
/// [`load_experiment_config`].
pub fn load_synth_spec(path: &Path) -> Result<SynthSpec> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::config(path.display().to_string(), e.to_string()))
}

/// Everything recorded about one cross-validation fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub metrics: MetricsReport,
    pub best_epoch: usize,
    pub best_val_ua: f64,
    pub epochs_run: usize,
}

/// Cross-validated experiment outcome; aggregate values are mean and sample
/// standard deviation over folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub class_names: Vec<String>,
    pub variant: String,
    pub folds: Vec<FoldResult>,
    pub ua_mean: f64,
    pub ua_std: f64,
    pub uf1_mean: f64,
    pub uf1_std: f64,
    pub f1_mean: f64,
    pub f1_std: f64,
    pub response_exports: Vec<String>,
}

fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed.wrapping_add((fold as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn gather<T: Clone>(items: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| items[i].clone()).collect()
}

/// Runs stratified k-fold cross-validation per the config: each fold trains
/// a fresh model on the other folds (with an internal stratified validation
/// holdout for early stopping) and is scored on the held-out fold.
/// Deterministic for a fixed config.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let dataset = config.load_dataset()?;
    let num_classes = dataset.class_names.len();
    if num_classes < 2 {
        return Err(Error::invalid("need at least 2 classes"));
    }
    let sample_rate = dataset.items[0].sample_rate;
    let labels = dataset.labels();
    let waves: Vec<Vec<f64>> = dataset.items.iter().map(|i| i.waveform.clone()).collect();
    let arch = config.resolved_architecture()?;
    let split = stratified_kfold(&labels, config.cv_folds, config.seed)?;

    let mut folds = Vec::with_capacity(config.cv_folds);
    let mut response_exports = Vec::new();
    for fold in 0..config.cv_folds {
        let seed = fold_seed(config.seed, fold);
        let test_idx = split.test_indices(fold);
        let pool_idx = split.train_indices(fold);
        let pool_labels = gather(&labels, &pool_idx);
        let (train_local, val_local) =
            stratified_holdout(&pool_labels, config.validation_fraction, seed)?;
        let train_idx: Vec<usize> = train_local.iter().map(|&i| pool_idx[i]).collect();
        let mut val_idx: Vec<usize> = val_local.iter().map(|&i| pool_idx[i]).collect();
        if val_idx.is_empty() {
            // Splits too small to spare a holdout fall back to validating on
            // the training items themselves.
            val_idx = train_idx.clone();
        }

        let model = build_model(&arch, config.variant, sample_rate, num_classes, seed)?;
        let train_cfg = TrainConfig {
            seed,
            ..config.training
        };
        let outcome = train(
            model,
            &gather(&waves, &train_idx),
            &gather(&labels, &train_idx),
            &gather(&waves, &val_idx),
            &gather(&labels, &val_idx),
            &train_cfg,
        )?;

        let test_labels = gather(&labels, &test_idx);
        let predictions: Vec<usize> = test_idx
            .par_iter()
            .map(|&i| outcome.model.predict(&waves[i]))
            .collect::<Result<_>>()?;
        let metrics = compute_metrics(&predictions, &test_labels, num_classes)?;

        if let Some(dir) = &config.export_responses {
            let summary = export_model_responses(
                &outcome.model,
                sample_rate,
                config.response_points,
                &dir.join(format!("fold{fold}")),
            )?;
            response_exports.push(summary.display().to_string());
        }
        folds.push(FoldResult {
            fold,
            metrics,
            best_epoch: outcome.best_epoch,
            best_val_ua: outcome.best_val_ua,
            epochs_run: outcome.history.len(),
        });
    }

    let collect = |f: &dyn Fn(&FoldResult) -> f64| -> Vec<f64> { folds.iter().map(f).collect() };
    let (ua_mean, ua_std) = mean_std(&collect(&|r| r.metrics.ua));
    let (uf1_mean, uf1_std) = mean_std(&collect(&|r| r.metrics.uf1));
    let (f1_mean, f1_std) = mean_std(&collect(&|r| r.metrics.f1_weighted));
    Ok(ExperimentReport {
        class_names: dataset.class_names,
        variant: config.variant.name().to_string(),
        folds,
        ua_mean,
        ua_std,
        uf1_mean,
        uf1_std,
        f1_mean,
        f1_std,
        response_exports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::Rng;
    use std::f64::consts::PI;

    fn tone(freq: f64, rate: f64, n: usize) -> Vec<f64> {
        (0..n).map(|t| (2.0 * PI * freq * t as f64 / rate).sin()).collect()
    }

    /// Blackman-windowed single-bin DFT magnitude (Goertzel-style direct
    /// evaluation), used as an independent spectral oracle.
    fn windowed_dft_mag(signal: &[f64], freq: f64, rate: f64) -> f64 {
        let n = signal.len();
        let mut re = 0.0;
        let mut im = 0.0;
        for (t, &x) in signal.iter().enumerate() {
            let frac = t as f64 / (n - 1) as f64;
            let w = 0.42 - 0.5 * (2.0 * PI * frac).cos() + 0.08 * (4.0 * PI * frac).cos();
            let angle = -2.0 * PI * freq * t as f64 / rate;
            re += w * x * angle.cos();
            im += w * x * angle.sin();
        }
        re.hypot(im)
    }

    fn rms(signal: &[f64]) -> f64 {
        (signal.iter().map(|v| v * v).sum::<f64>() / signal.len() as f64).sqrt()
    }

    // --- WAV ---

    #[test]
    fn wav_round_trip_is_exact_for_representable_samples() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let samples = vec![0.0, 0.5, -1.0, 0.25, -0.125];
        write_wav(&path, &samples, 8000.0).unwrap();
        let (back, rate) = read_wav(&path).unwrap();
        assert_eq!(rate, 8000.0);
        assert_eq!(back, samples);
    }

    fn mono_wav_bytes(samples: &[i16], rate: u32) -> Vec<u8> {
        let data_len = 2 * samples.len() as u32;
        let mut b = Vec::new();
        b.extend_from_slice(b"RIFF");
        b.extend_from_slice(&(36 + data_len).to_le_bytes());
        b.extend_from_slice(b"WAVE");
        b.extend_from_slice(b"fmt ");
        b.extend_from_slice(&16u32.to_le_bytes());
        b.extend_from_slice(&1u16.to_le_bytes());
        b.extend_from_slice(&1u16.to_le_bytes());
        b.extend_from_slice(&rate.to_le_bytes());
        b.extend_from_slice(&(rate * 2).to_le_bytes());
        b.extend_from_slice(&2u16.to_le_bytes());
        b.extend_from_slice(&16u16.to_le_bytes());
        b.extend_from_slice(b"data");
        b.extend_from_slice(&data_len.to_le_bytes());
        for &s in samples {
            b.extend_from_slice(&s.to_le_bytes());
        }
        b
    }

    #[test]
    fn wav_scaling_reference_values() {
        let bytes = mono_wav_bytes(&[0, 16384, -32768], 16000);
        let (samples, rate) = parse_wav(&bytes).unwrap();
        assert_eq!(samples, vec![0.0, 0.5, -1.0]);
        assert_eq!(rate, 16000.0);
    }

    #[test]
    fn wav_stereo_averages_to_mono() {
        // One frame: L = 0.5, R = -0.5.
        let mut b = Vec::new();
        b.extend_from_slice(b"RIFF");
        b.extend_from_slice(&40u32.to_le_bytes());
        b.extend_from_slice(b"WAVE");
        b.extend_from_slice(b"fmt ");
        b.extend_from_slice(&16u32.to_le_bytes());
        b.extend_from_slice(&1u16.to_le_bytes());
        b.extend_from_slice(&2u16.to_le_bytes()); // stereo
        b.extend_from_slice(&8000u32.to_le_bytes());
        b.extend_from_slice(&32000u32.to_le_bytes());
        b.extend_from_slice(&4u16.to_le_bytes());
        b.extend_from_slice(&16u16.to_le_bytes());
        b.extend_from_slice(b"data");
        b.extend_from_slice(&4u32.to_le_bytes());
        b.extend_from_slice(&16384i16.to_le_bytes());
        b.extend_from_slice(&(-16384i16).to_le_bytes());
        let (samples, _) = parse_wav(&b).unwrap();
        assert_eq!(samples, vec![0.0]);
    }

    #[test]
    fn wav_truncated_data_chunk_names_data() {
        let mut bytes = mono_wav_bytes(&[1, 2, 3, 4], 8000);
        bytes.truncate(bytes.len() - 3);
        match parse_wav(&bytes) {
            Err(Error::Format { section, .. }) => assert_eq!(section, "data"),
            other => panic!("expected data format error, got {other:?}"),
        }
    }

    #[test]
    fn wav_rejects_non_riff_and_non_pcm() {
        match parse_wav(b"NOPE") {
            Err(Error::Format { section, .. }) => assert_eq!(section, "RIFF"),
            other => panic!("expected RIFF error, got {other:?}"),
        }
        let mut float_codec = mono_wav_bytes(&[0], 8000);
        float_codec[20] = 3; // IEEE float codec id
        match parse_wav(&float_codec) {
            Err(Error::Format { section, .. }) => assert_eq!(section, "fmt "),
            other => panic!("expected fmt error, got {other:?}"),
        }
    }

    #[test]
    fn wav_skips_unknown_chunks() {
        let samples = [100i16, -100];
        let mut b = Vec::new();
        b.extend_from_slice(b"RIFF");
        b.extend_from_slice(&(36 + 12 + 4u32).to_le_bytes());
        b.extend_from_slice(b"WAVE");
        b.extend_from_slice(b"LIST");
        b.extend_from_slice(&4u32.to_le_bytes());
        b.extend_from_slice(b"info");
        b.extend_from_slice(b"fmt ");
        b.extend_from_slice(&16u32.to_le_bytes());
        b.extend_from_slice(&1u16.to_le_bytes());
        b.extend_from_slice(&1u16.to_le_bytes());
        b.extend_from_slice(&8000u32.to_le_bytes());
        b.extend_from_slice(&16000u32.to_le_bytes());
        b.extend_from_slice(&2u16.to_le_bytes());
        b.extend_from_slice(&16u16.to_le_bytes());
        b.extend_from_slice(b"data");
        b.extend_from_slice(&4u32.to_le_bytes());
        for s in samples {
            b.extend_from_slice(&s.to_le_bytes());
        }
        let (got, _) = parse_wav(&b).unwrap();
        assert_eq!(got.len(), 2);
    }

    // --- Resampling ---

    #[test]
    fn resample_equal_rates_is_identity() {
        let x = tone(440.0, 2000.0, 500);
        assert_eq!(resample(&x, 2000.0, 2000.0), x);
    }

    #[test]
    fn resample_output_length_follows_rate_ratio() {
        let x = vec![0.0; 2000];
        assert_eq!(resample(&x, 2000.0, 16000.0).len(), 16000);
        assert_eq!(resample(&x, 16000.0, 2000.0).len(), 250);
        assert_eq!(resample(&vec![0.0; 441], 44100.0, 16000.0).len(), 160);
    }

    #[test]
    fn upsampled_tone_peak_is_accurate_and_clean() {
        let x = tone(440.0, 2000.0, 2000);
        let y = resample(&x, 2000.0, 16000.0);
        assert_eq!(y.len(), 16000);

        // Fine peak search around the tone.
        let mut best_f = 0.0;
        let mut best_mag = 0.0;
        let mut f = 400.0;
        while f <= 480.0 {
            let mag = windowed_dft_mag(&y, f, 16000.0);
            if mag > best_mag {
                best_mag = mag;
                best_f = f;
            }
            f += 0.05;
        }
        assert!(
            (best_f - 440.0).abs() <= 0.5,
            "peak at {best_f} Hz, expected 440"
        );

        // Everything away from the tone sits at least 40 dB down, including
        // the imaging band above the original Nyquist.
        let floor = best_mag * 10f64.powf(-40.0 / 20.0);
        let mut f: f64 = 5.0;
        while f <= 7995.0 {
            if (f - 440.0).abs() > 10.0 {
                let mag = windowed_dft_mag(&y, f, 16000.0);
                assert!(
                    mag <= floor,
                    "spur at {f} Hz: {:.1} dB",
                    20.0 * (mag / best_mag).log10()
                );
            }
            f += 7.0;
        }
    }

    #[test]
    fn resample_preserves_in_band_rms() {
        let x = tone(440.0, 2000.0, 2000);
        let up = resample(&x, 2000.0, 16000.0);
        assert!((rms(&up) / rms(&x) - 1.0).abs() <= 0.05);
        let down = resample(&up, 16000.0, 2000.0);
        assert!((rms(&down) / rms(&x) - 1.0).abs() <= 0.05);
    }

    #[test]
    fn downsample_keeps_in_band_tone() {
        let x = tone(440.0, 16000.0, 16000);
        let y = resample(&x, 16000.0, 2000.0);
        assert_eq!(y.len(), 2000);
        let mut best_f = 0.0;
        let mut best_mag = 0.0;
        let mut f = 400.0;
        while f <= 480.0 {
            let mag = windowed_dft_mag(&y, f, 2000.0);
            if mag > best_mag {
                best_mag = mag;
                best_f = f;
            }
            f += 0.05;
        }
        assert!((best_f - 440.0).abs() <= 0.5, "peak at {best_f}");
    }

    // --- Synthetic datasets ---

    #[test]
    fn synth_is_deterministic_per_seed() {
        let spec = SynthSpec {
            n_per_class: 3,
            duration_s: 0.1,
            ..SynthSpec::default()
        };
        let a = synth_dataset(&spec, 9).unwrap();
        let b = synth_dataset(&spec, 9).unwrap();
        for (x, y) in a.items.iter().zip(&b.items) {
            assert_eq!(x.waveform, y.waveform);
            assert_eq!(x.label, y.label);
        }
        let c = synth_dataset(&spec, 10).unwrap();
        assert_ne!(a.items[0].waveform, c.items[0].waveform);
    }

    #[test]
    fn synth_without_noise_yields_pure_normalized_tones() {
        let spec = SynthSpec {
            n_per_class: 2,
            duration_s: 0.2,
            noise_db: None,
            tones_per_band: 1,
            ..SynthSpec::default()
        };
        let data = synth_dataset(&spec, 3).unwrap();
        for item in &data.items {
            let r = rms(&item.waveform);
            assert!((r - TONE_RMS).abs() <= 1e-12, "rms {r}");
            // A single sinusoid never exceeds sqrt(2) times its RMS; allow a
            // small margin for the partial last cycle in the finite window.
            let peak = item.waveform.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(peak <= TONE_RMS * 2f64.sqrt() * 1.05, "peak {peak}");
        }
    }

    #[test]
    fn synth_classes_separable_by_band_energy() {
        let spec = SynthSpec {
            n_per_class: 6,
            duration_s: 0.25,
            ..SynthSpec::default()
        };
        let data = synth_dataset(&spec, 17).unwrap();
        let bands: Vec<(f64, f64)> = spec
            .classes
            .iter()
            .map(|c| (c.bands[0].low_hz, c.bands[0].high_hz))
            .collect();
        let band_energy = |wave: &[f64], (lo, hi): (f64, f64)| -> f64 {
            let mut e = 0.0;
            for g in 0..=32 {
                let f = lo + (hi - lo) * g as f64 / 32.0;
                let m = windowed_dft_mag(wave, f, spec.sample_rate);
                e += m * m;
            }
            e
        };
        for item in &data.items {
            let energies: Vec<f64> = bands
                .iter()
                .map(|&b| band_energy(&item.waveform, b))
                .collect();
            let strongest = (0..energies.len())
                .max_by(|&a, &b| energies[a].partial_cmp(&energies[b]).unwrap())
                .unwrap();
            assert_eq!(
                strongest, item.label,
                "item of class {} strongest in band {strongest}: {energies:?}",
                item.label
            );
        }
    }

    #[test]
    fn synth_rejects_bad_recipes() {
        let mut spec = SynthSpec::default();
        spec.classes.truncate(1);
        assert!(synth_dataset(&spec, 0).is_err());
        let mut spec = SynthSpec::default();
        spec.classes[0].bands[0].high_hz = 9000.0; // above Nyquist
        assert!(synth_dataset(&spec, 0).is_err());
    }

    // --- Stratified splitting ---

    #[test]
    fn kfold_reference_splits() {
        let labels = vec![0usize; 10];
        let split = stratified_kfold(&labels, 5, 1).unwrap();
        for fold in 0..5 {
            assert_eq!(split.test_indices(fold).len(), 2);
            assert_eq!(split.train_indices(fold).len(), 8);
        }

        let labels: Vec<usize> = [vec![0usize; 8], vec![1usize; 12]].concat();
        let split = stratified_kfold(&labels, 4, 2).unwrap();
        for fold in 0..4 {
            let test = split.test_indices(fold);
            let zeros = test.iter().filter(|&&i| labels[i] == 0).count();
            let ones = test.len() - zeros;
            assert_eq!((zeros, ones), (2, 3));
        }
    }

    #[test]
    fn kfold_rejects_small_classes_naming_them() {
        let labels = vec![0, 0, 0, 1, 1, 1, 1, 1];
        let err = stratified_kfold(&labels, 4, 0).unwrap_err();
        assert!(err.to_string().contains("class 0"), "{err}");
    }

    #[test]
    fn holdout_keeps_every_class_in_both_sides() {
        let labels: Vec<usize> = (0..40).map(|i| i % 3).collect();
        let (train, val) = stratified_holdout(&labels, 0.15, 5).unwrap();
        assert_eq!(train.len() + val.len(), 40);
        for c in 0..3 {
            assert!(train.iter().any(|&i| labels[i] == c));
            assert!(val.iter().filter(|&&i| labels[i] == c).count() >= 1);
        }
        // Roughly the requested fraction.
        assert!((5..=8).contains(&val.len()), "{}", val.len());
    }

    // --- Metrics ---

    #[test]
    fn metrics_worked_example() {
        let labels = [0usize, 0, 1, 1];
        let preds = [0usize, 1, 1, 1];
        let m = compute_metrics(&preds, &labels, 2).unwrap();
        assert!((m.ua - 75.0).abs() <= 1e-12);
        assert!((m.uf1 - 220.0 / 3.0).abs() <= 1e-9, "uf1 {}", m.uf1);
        assert!((m.f1_weighted - 220.0 / 3.0).abs() <= 1e-9);
        assert_eq!(m.confusion, vec![vec![1, 1], vec![0, 2]]);
    }

    #[test]
    fn metrics_perfect_and_degenerate_predictors() {
        let labels = [0usize, 1, 2, 0, 1, 2];
        let m = compute_metrics(&labels, &labels, 3).unwrap();
        assert_eq!((m.ua, m.uf1, m.f1_weighted), (100.0, 100.0, 100.0));

        let labels: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let preds = vec![0usize; 40];
        let m = compute_metrics(&preds, &labels, 4).unwrap();
        assert!((m.ua - 25.0).abs() <= 1e-12);
    }

    #[test]
    fn metrics_rejects_mismatched_lengths() {
        assert!(compute_metrics(&[0, 1], &[0], 2).is_err());
        assert!(compute_metrics(&[0, 2], &[0, 1], 2).is_err());
    }

    /// Direct per-definition reimplementation used as the oracle.
    fn metrics_oracle(preds: &[usize], labels: &[usize], classes: usize) -> (f64, f64, f64) {
        let recall = |c: usize| {
            let sup = labels.iter().filter(|&&l| l == c).count();
            let tp = labels
                .iter()
                .zip(preds)
                .filter(|(&l, &p)| l == c && p == c)
                .count();
            (sup, if sup > 0 { tp as f64 / sup as f64 } else { 0.0 })
        };
        let f1 = |c: usize| {
            let tp = labels
                .iter()
                .zip(preds)
                .filter(|(&l, &p)| l == c && p == c)
                .count() as f64;
            let fp = labels
                .iter()
                .zip(preds)
                .filter(|(&l, &p)| l != c && p == c)
                .count() as f64;
            let fnn = labels
                .iter()
                .zip(preds)
                .filter(|(&l, &p)| l == c && p != c)
                .count() as f64;
            if 2.0 * tp + fp + fnn > 0.0 {
                2.0 * tp / (2.0 * tp + fp + fnn)
            } else {
                0.0
            }
        };
        let mut ua = 0.0;
        let mut uf1 = 0.0;
        let mut wf1 = 0.0;
        let mut seen = 0.0;
        let mut total = 0.0;
        for c in 0..classes {
            let (sup, rec) = recall(c);
            if sup > 0 {
                ua += rec;
                uf1 += f1(c);
                wf1 += sup as f64 * f1(c);
                seen += 1.0;
                total += sup as f64;
            }
        }
        (100.0 * ua / seen, 100.0 * uf1 / seen, 100.0 * wf1 / total)
    }

    #[test]
    fn metrics_match_brute_force_oracle() {
        let mut rng = StdRng::seed_from_u64(23);
        for _ in 0..1000 {
            let classes = rng.gen_range(2..6);
            let n = rng.gen_range(1..40);
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
            let preds: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
            let m = compute_metrics(&preds, &labels, classes).unwrap();
            // The oracle's 2tp/(2tp+fp+fn) form of F1 is algebraically equal
            // but not bitwise equal to the precision/recall form.
            let (ua, uf1, wf1) = metrics_oracle(&preds, &labels, classes);
            assert!((m.ua - ua).abs() <= 1e-9, "{} vs {ua}", m.ua);
            assert!((m.uf1 - uf1).abs() <= 1e-9, "{} vs {uf1}", m.uf1);
            assert!((m.f1_weighted - wf1).abs() <= 1e-9, "{} vs {wf1}", m.f1_weighted);
        }
    }

    #[test]
    fn mean_and_sample_std_reference() {
        let (mean, std) = mean_std(&[60.0, 62.0, 64.0]);
        assert_eq!(mean, 62.0);
        assert_eq!(std, 2.0);
        assert_eq!(mean_std(&[5.0]), (5.0, 0.0));
    }

    // --- Presets and experiment plumbing ---

    #[test]
    fn presets_have_documented_shapes() {
        let ser = preset_architecture("ser-256").unwrap();
        assert_eq!(ser.blocks.len(), 1);
        assert_eq!(ser.blocks[0].num_kernels, 256);
        assert_eq!(ser.hidden_nodes, 512);
        assert_eq!(ser.pool, Pool::Mean);
        assert_eq!(preset_architecture("ser-456").unwrap().blocks[0].num_kernels, 456);
        let heart = preset_architecture("heart").unwrap();
        assert_eq!(heart.blocks.len(), 2);
        assert_eq!(heart.blocks[0].num_kernels, 128);
        assert_eq!(heart.blocks[1].num_kernels, 32);
        assert_eq!(heart.pool, Pool::Max);
        assert!(preset_architecture("nope").is_err());
    }

    #[test]
    fn heart_preset_stays_under_parameter_budget() {
        let arch = preset_architecture("heart").unwrap();
        for variant in [Variant::Fixed, Variant::B, Variant::W, Variant::BW] {
            let model = build_model(&arch, variant, 16000.0, 2, 0).unwrap();
            assert!(
                model.param_count() < 200_000,
                "{variant:?}: {} params",
                model.param_count()
            );
        }
    }

    fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            dataset: None,
            synth: Some(SynthSpec {
                classes: vec![
                    ClassRecipe {
                        name: "a".into(),
                        bands: vec![ToneBand {
                            low_hz: 100.0,
                            high_hz: 200.0,
                            amplitude: 1.0,
                        }],
                    },
                    ClassRecipe {
                        name: "b".into(),
                        bands: vec![ToneBand {
                            low_hz: 600.0,
                            high_hz: 800.0,
                            amplitude: 1.0,
                        }],
                    },
                ],
                n_per_class: 4,
                duration_s: 0.1,
                sample_rate: 4000.0,
                noise_db: Some(-25.0),
                tones_per_band: 2,
            }),
            preset: None,
            architecture: Some(Architecture {
                blocks: vec![BlockSpec {
                    num_kernels: 2,
                    kernel_taps: 33,
                    window_preset: WindowPreset::Hann,
                    downsample_factor: 4,
                    lrn: LrnParams::default(),
                    nlrelu_beta: 1.0,
                    band_init: BandInitSpec {
                        f_min_hz: 50.0,
                        f_max_hz: None,
                        low_extra_fraction: 0.0,
                    },
                }],
                pool: Pool::Mean,
                hidden_nodes: 4,
            }),
            variant: Variant::Fixed,
            training: TrainConfig {
                max_epochs: 2,
                batch_size: 4,
                ..TrainConfig::default()
            },
            cv_folds: 2,
            validation_fraction: 0.25,
            seed: 11,
            export_responses: None,
            response_points: 16,
        }
    }

    #[test]
    fn config_validation_reports_field_paths() {
        let mut both_sources = tiny_config();
        both_sources.dataset = Some(DatasetSource {
            manifest: PathBuf::from("x.csv"),
            resample_to_hz: None,
        });
        match both_sources.validate() {
            Err(Error::Config { path, .. }) => assert_eq!(path, "dataset/synth"),
            other => panic!("expected config error, got {other:?}"),
        }

        let mut no_model = tiny_config();
        no_model.architecture = None;
        match no_model.validate() {
            Err(Error::Config { path, .. }) => assert_eq!(path, "preset/architecture"),
            other => panic!("expected config error, got {other:?}"),
        }

        let mut bad_preset = tiny_config();
        bad_preset.architecture = None;
        bad_preset.preset = Some("serr".into());
        match bad_preset.validate() {
            Err(Error::Config { path, .. }) => assert_eq!(path, "preset"),
            other => panic!("expected config error, got {other:?}"),
        }

        let mut bad_folds = tiny_config();
        bad_folds.cv_folds = 1;
        assert!(matches!(bad_folds.validate(), Err(Error::Config { .. })));
    }

    #[test]
    fn smoke_experiment_completes_with_all_folds() {
        let report = run_experiment(&tiny_config()).unwrap();
        assert_eq!(report.folds.len(), 2);
        assert_eq!(report.class_names, vec!["a", "b"]);
        for fold in &report.folds {
            assert!(fold.metrics.ua.is_finite());
            assert!((0.0..=100.0).contains(&fold.metrics.ua));
        }
    }

    #[test]
    fn experiment_report_bytes_are_deterministic() {
        let a = serde_json::to_string(&run_experiment(&tiny_config()).unwrap()).unwrap();
        let b = serde_json::to_string(&run_experiment(&tiny_config()).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn manifest_round_trip_through_wav_files() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            n_per_class: 2,
            duration_s: 0.05,
            ..SynthSpec::default()
        };
        let data = synth_dataset(&spec, 4).unwrap();
        let mut manifest = String::from("path,label\n");
        for (i, item) in data.items.iter().enumerate() {
            let name = format!("item_{i}.wav");
            write_wav(&dir.path().join(&name), &item.waveform, item.sample_rate).unwrap();
            manifest.push_str(&format!(
                "{name},{}\n",
                data.class_names[item.label]
            ));
        }
        let manifest_path = dir.path().join("manifest.csv");
        atomic_write(&manifest_path, manifest.as_bytes()).unwrap();

        let loaded = load_manifest_dataset(&DatasetSource {
            manifest: manifest_path,
            resample_to_hz: None,
        })
        .unwrap();
        assert_eq!(loaded.items.len(), 6);
        // Class names come back sorted.
        assert_eq!(loaded.class_names, vec!["high", "low", "mid"]);
        // Quantization error only.
        for (orig, back) in data.items.iter().zip(&loaded.items) {
            assert_eq!(orig.waveform.len(), back.waveform.len());
            for (a, b) in orig.waveform.iter().zip(&back.waveform) {
                assert!((a - b).abs() <= 1.0 / 32768.0);
            }
        }
    }

    #[test]
    fn export_writes_kernel_files_and_summary() {
        let arch = Architecture {
            blocks: vec![BlockSpec {
                num_kernels: 3,
                kernel_taps: 33,
                window_preset: WindowPreset::Hamming,
                downsample_factor: 2,
                lrn: LrnParams::default(),
                nlrelu_beta: 1.0,
                band_init: BandInitSpec::default(),
            }],
            pool: Pool::Mean,
            hidden_nodes: 4,
        };
        let model = build_model(&arch, Variant::Fixed, 8000.0, 2, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let summary = export_model_responses(&model, 8000.0, 32, dir.path()).unwrap();
        let text = fs::read_to_string(&summary).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(
            lines[0],
            "kernel,block,f0_hz,f_delta_hz,center_hz,peak_gain_db,peak_freq_hz"
        );
        assert_eq!(lines.len(), 4);
        for i in 0..3 {
            let per_kernel = dir.path().join(format!("kernel_{i:04}.csv"));
            let body = fs::read_to_string(per_kernel).unwrap();
            assert!(body.starts_with("freq_normalized,freq_hz,magnitude_db"));
            assert_eq!(body.lines().count(), 33);
        }
        // Summary rows are parseable and centers sit inside their bands.
        for line in &lines[1..] {
            let fields: Vec<f64> = line
                .split(',')
                .map(|f| f.parse::<f64>().unwrap())
                .collect();
            let (f0, fd, center) = (fields[2], fields[3], fields[4]);
            assert!(center > f0 && center < f0 + fd);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn kfold_counts_differ_by_at_most_one(
            seed in 0u64..1000,
            k in 2usize..6,
            sizes in proptest::collection::vec(6usize..30, 2..4),
        ) {
            let labels: Vec<usize> = sizes
                .iter()
                .enumerate()
                .flat_map(|(c, &n)| std::iter::repeat(c).take(n))
                .collect();
            let split = stratified_kfold(&labels, k, seed).unwrap();
            for class in 0..sizes.len() {
                let mut counts = vec![0usize; k];
                for (i, &l) in labels.iter().enumerate() {
                    if l == class {
                        counts[split.fold_assignments[i]] += 1;
                    }
                }
                let lo = counts.iter().min().unwrap();
                let hi = counts.iter().max().unwrap();
                prop_assert!(hi - lo <= 1);
            }
        }

        #[test]
        fn resampled_length_matches_ceil_formula(
            n in 1usize..500,
            from in 1000u32..4000,
            to in 1000u32..4000,
        ) {
            let x = vec![0.5; n];
            let y = resample(&x, from as f64, to as f64);
            let expect = (n as u64 * to as u64).div_ceil(from as u64) as usize;
            prop_assert_eq!(y.len(), expect);
        }
    }
}
