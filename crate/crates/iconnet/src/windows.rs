//! Generalized cosine windows and Mel-scale band initialization.
//!
//! A window of length `K` is parametrized by `p + 1` coefficients:
//!
//! ```text
//! w_k = sum_{i=0}^{p} (-1)^i * phi_i * cos(2*pi*i*k / (K - 1)),   k = 0..K-1
//! ```
//!
//! Rectangular, Hann, Hamming and Blackman windows are exact points in this
//! coefficient space, which makes them natural initial values when the
//! coefficients are trained.

use std::f64::consts::PI;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Coefficients of one generalized cosine window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowCoefficients {
    /// `phi[i]` multiplies the i-th cosine harmonic with sign `(-1)^i`.
    pub phi: Vec<f64>,
    /// Whether the coefficients are trained.
    pub learnable: bool,
}

impl WindowCoefficients {
    pub fn new(phi: Vec<f64>, learnable: bool) -> Result<Self> {
        if phi.is_empty() {
            return Err(Error::invalid("window needs at least one coefficient"));
        }
        if phi.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("window coefficients must be finite"));
        }
        Ok(Self { phi, learnable })
    }

    /// Polynomial order `p` (one less than the coefficient count).
    pub fn order(&self) -> usize {
        self.phi.len() - 1
    }
}

/// Classic windows expressible in the generalized cosine basis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowPreset {
    Rectangular,
    Hann,
    Hamming,
    Blackman,
}

impl WindowPreset {
    pub fn coefficients(self) -> Vec<f64> {
        match self {
            WindowPreset::Rectangular => vec![1.0],
            WindowPreset::Hann => vec![0.5, 0.5],
            WindowPreset::Hamming => vec![0.54, 0.46],
            WindowPreset::Blackman => vec![0.42, 0.5, 0.08],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            WindowPreset::Rectangular => "rectangular",
            WindowPreset::Hann => "hann",
            WindowPreset::Hamming => "hamming",
            WindowPreset::Blackman => "blackman",
        }
    }
}

impl FromStr for WindowPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rectangular" => Ok(WindowPreset::Rectangular),
            "hann" => Ok(WindowPreset::Hann),
            "hamming" => Ok(WindowPreset::Hamming),
            "blackman" => Ok(WindowPreset::Blackman),
            other => Err(Error::invalid(format!("unknown window preset `{other}`"))),
        }
    }
}

/// Window coefficients for a named preset.
pub fn preset_window(preset: WindowPreset, learnable: bool) -> WindowCoefficients {
    WindowCoefficients {
        phi: preset.coefficients(),
        learnable,
    }
}

fn check_taps(taps: usize) -> Result<()> {
    if taps < 2 {
        return Err(Error::invalid(format!(
            "window needs at least 2 taps, got {taps}"
        )));
    }
    Ok(())
}

/// Evaluate the window at all `taps` positions.
pub fn evaluate_window(window: &WindowCoefficients, taps: usize) -> Result<Vec<f64>> {
    check_taps(taps)?;
    if window.phi.is_empty() {
        return Err(Error::invalid("window needs at least one coefficient"));
    }
    let denom = (taps - 1) as f64;
    let mut out = Vec::with_capacity(taps);
    for k in 0..taps {
        let mut acc = 0.0;
        let mut sign = 1.0;
        for (i, &phi) in window.phi.iter().enumerate() {
            acc += sign * phi * (2.0 * PI * i as f64 * k as f64 / denom).cos();
            sign = -sign;
        }
        out.push(acc);
    }
    Ok(out)
}

/// Derivative of every tap with respect to every coefficient.
///
/// Entry `[k][i]` is `(-1)^i * cos(2*pi*i*k / (K-1))`; it does not depend on
/// the coefficient values, only on their count.
pub fn window_jacobian(window: &WindowCoefficients, taps: usize) -> Result<Vec<Vec<f64>>> {
    check_taps(taps)?;
    if window.phi.is_empty() {
        return Err(Error::invalid("window needs at least one coefficient"));
    }
    Ok(cosine_basis(window.phi.len(), taps))
}

/// The raw cosine basis matrix `[taps][num_coeffs]` shared by
/// [`window_jacobian`] and the kernel gradient path.
pub(crate) fn cosine_basis(num_coeffs: usize, taps: usize) -> Vec<Vec<f64>> {
    let denom = (taps - 1) as f64;
    (0..taps)
        .map(|k| {
            let mut sign = 1.0;
            (0..num_coeffs)
                .map(|i| {
                    let v = sign * (2.0 * PI * i as f64 * k as f64 / denom).cos();
                    sign = -sign;
                    v
                })
                .collect()
        })
        .collect()
}

/// One band produced by initialization: normalized low edge and width,
/// both in cycles/sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandInit {
    pub f0: f64,
    pub f_delta: f64,
}

/// HTK Mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Lay out `count` overlapping bands on a Mel grid between `f_min` and
/// `f_max` (Hz). Band `i` spans grid points `i..i+2`, so adjacent bands
/// overlap by half, the standard filterbank arrangement.
fn mel_grid_bands(count: usize, sample_rate: f64, f_min: f64, f_max: f64) -> Vec<BandInit> {
    let mel_lo = hz_to_mel(f_min);
    let mel_hi = hz_to_mel(f_max);
    let num_points = count + 2;
    let step = (mel_hi - mel_lo) / (num_points - 1) as f64;
    let hz: Vec<f64> = (0..num_points)
        .map(|i| mel_to_hz(mel_lo + step * i as f64))
        .collect();
    (0..count)
        .map(|i| {
            let lo = hz[i] / sample_rate;
            let hi = (hz[i + 2] / sample_rate).min(0.5);
            BandInit {
                f0: lo,
                f_delta: hi - lo,
            }
        })
        .collect()
}

/// Mel-filterbank style band initialization, with a fraction of the kernels
/// re-allocated as a denser grid over the lowest quarter of the range.
///
/// Output order: main grid first (f0 non-decreasing), then the low grid
/// (f0 non-decreasing within it).
pub fn mel_band_init(
    num_kernels: usize,
    sample_rate: f64,
    f_min: f64,
    f_max: f64,
    low_extra_fraction: f64,
) -> Result<Vec<BandInit>> {
    if num_kernels < 1 {
        return Err(Error::invalid("num_kernels must be at least 1"));
    }
    if !(sample_rate > 0.0) {
        return Err(Error::invalid("sample_rate must be positive"));
    }
    if !(0.0 <= f_min && f_min < f_max && f_max <= sample_rate / 2.0) {
        return Err(Error::invalid(format!(
            "need 0 <= f_min < f_max <= sample_rate/2, got f_min={f_min}, f_max={f_max}"
        )));
    }
    if !(0.0..1.0).contains(&low_extra_fraction) {
        return Err(Error::invalid(
            "low_extra_fraction must be in [0, 1)".to_string(),
        ));
    }

    let low_count = (low_extra_fraction * num_kernels as f64).round() as usize;
    let low_count = low_count.min(num_kernels.saturating_sub(1));
    let main_count = num_kernels - low_count;

    let mut bands = mel_grid_bands(main_count, sample_rate, f_min, f_max);
    if low_count > 0 {
        bands.extend(mel_grid_bands(
            low_count,
            sample_rate,
            f_min,
            f_max / 4.0,
        ));
    }
    Ok(bands)
}
