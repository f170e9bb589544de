//! Sinc band-pass kernels, windowed assembly, strided convolution, and
//! frequency-response analysis.
//!
//! A kernel is the element-wise product of a band-pass prototype
//!
//! ```text
//! T_n = 2*(f0+fd)*sinc(2*pi*n*(f0+fd)) - 2*f0*sinc(2*pi*n*f0)
//! ```
//!
//! (centered index n, sinc(0) = 1) and a generalized cosine window from
//! [`crate::windows`]. Both factors have cheap closed-form derivatives, so
//! training never needs numeric differentiation.

use std::f64::consts::PI;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::windows::{cosine_basis, evaluate_window, WindowCoefficients};

/// Normalized band edges of one kernel, in cycles/sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandParams {
    /// Low cut-off, `0 <= f0`.
    pub f0: f64,
    /// Bandwidth, `f_delta > 0`, `f0 + f_delta <= 0.5`.
    pub f_delta: f64,
    /// Whether the band edges are trained.
    pub learnable: bool,
}

impl BandParams {
    pub fn new(f0: f64, f_delta: f64, learnable: bool) -> Self {
        let band = Self {
            f0,
            f_delta,
            learnable,
        };
        band.check();
        band
    }

    fn check(&self) {
        assert!(
            self.f0 >= 0.0 && self.f_delta > 0.0 && self.f0 + self.f_delta <= 0.5 + 1e-12,
            "band out of range: f0={} f_delta={}",
            self.f0,
            self.f_delta
        );
    }
}

/// Assembled FIR kernel with the factors cached for gradient computation.
#[derive(Debug, Clone)]
pub struct FirKernel {
    /// Filter coefficients `h_k = T_k * w_k`.
    pub taps: Vec<f64>,
    /// Band-pass prototype `T`.
    pub prototype: Vec<f64>,
    /// Window samples `w`.
    pub window_taps: Vec<f64>,
    pub band: BandParams,
    pub window: WindowCoefficients,
}

fn check_kernel_taps(taps: usize) -> Result<()> {
    if taps < 3 || taps % 2 == 0 {
        return Err(Error::invalid(format!(
            "kernel needs an odd tap count of at least 3, got {taps}"
        )));
    }
    Ok(())
}

/// One side-band term `2f*sinc(2*pi*n*f)` in its `sin(x)/(pi*n)` form.
///
/// `f = 0.5` makes the angle an integer multiple of pi where the true value
/// is exactly zero; the rounded library pi leaves ~1e-16 residue, so the
/// exact zero is pinned.
#[inline]
fn bandedge_term(f: f64, n: f64) -> f64 {
    if f == 0.5 {
        0.0
    } else {
        (2.0 * PI * n * f).sin() / (PI * n)
    }
}

/// Band-pass prototype taps at centered indices `n = k - (K-1)/2`.
pub fn sinc_bandpass(band: &BandParams, taps: usize) -> Result<Vec<f64>> {
    check_kernel_taps(taps)?;
    band.check();
    let half = (taps - 1) / 2;
    let f_hi = band.f0 + band.f_delta;
    let mut t = vec![0.0; taps];
    t[half] = 2.0 * band.f_delta;
    // Mirror explicitly: the prototype is even in n, and computing one side
    // keeps the symmetry bit-exact.
    for n in 1..=half {
        let x = n as f64;
        let v = bandedge_term(f_hi, x) - bandedge_term(band.f0, x);
        t[half + n] = v;
        t[half - n] = v;
    }
    Ok(t)
}

/// Windowed kernel `H = T .* w`.
pub fn assemble_kernel(
    band: BandParams,
    window: WindowCoefficients,
    taps: usize,
) -> Result<FirKernel> {
    let prototype = sinc_bandpass(&band, taps)?;
    let window_taps = evaluate_window(&window, taps)?;
    let assembled = prototype
        .iter()
        .zip(&window_taps)
        .map(|(t, w)| t * w)
        .collect();
    Ok(FirKernel {
        taps: assembled,
        prototype,
        window_taps,
        band,
        window,
    })
}

/// Derivatives of every tap with respect to the kernel's own parameters:
/// window coefficients (matrix `[K][p+1]`) and the two band edges.
pub fn kernel_param_gradients(kernel: &FirKernel) -> (Vec<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let k = kernel.taps.len();
    let half = (k - 1) as f64 / 2.0;
    let basis = cosine_basis(kernel.window.phi.len(), k);
    let dh_dphi: Vec<Vec<f64>> = (0..k)
        .map(|kk| basis[kk].iter().map(|j| kernel.prototype[kk] * j).collect())
        .collect();
    let f_hi = kernel.band.f0 + kernel.band.f_delta;
    let mut dh_df0 = Vec::with_capacity(k);
    let mut dh_dfd = Vec::with_capacity(k);
    for kk in 0..k {
        let n = kk as f64 - half;
        // d/df [2f*sinc(2*pi*n*f)] = 2*cos(2*pi*n*f), valid at n = 0 too.
        let dhi = 2.0 * (2.0 * PI * n * f_hi).cos();
        let dlo = 2.0 * (2.0 * PI * n * kernel.band.f0).cos();
        dh_df0.push((dhi - dlo) * kernel.window_taps[kk]);
        dh_dfd.push(dhi * kernel.window_taps[kk]);
    }
    (dh_dphi, dh_df0, dh_dfd)
}

/// Sigmoid with the usual large-|x| stable split.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Maps unconstrained optimizer values to valid band parameters and back.
///
/// `f0 = (0.5 - 2e) * s(a)`, `f_delta = (0.5 - f0 - e) * s(b) + e` with
/// margin `e`, so every real `(a, b)` yields `0 < f0`, `f_delta > e` and
/// `f0 + f_delta < 0.5`. Clamping instead would flatten gradients at the
/// boundary; this keeps them alive everywhere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandReparam {
    pub eps: f64,
}

impl BandReparam {
    /// Margin tied to the kernel length (one DFT bin), capped so short
    /// kernels keep a usable range.
    pub fn for_taps(taps: usize) -> Self {
        Self {
            eps: (1.0 / taps as f64).min(0.125),
        }
    }

    pub fn to_band(&self, a: f64, b: f64) -> (f64, f64) {
        let f0 = (0.5 - 2.0 * self.eps) * sigmoid(a);
        let fd = (0.5 - f0 - self.eps) * sigmoid(b) + self.eps;
        (f0, fd)
    }

    /// Inverse map; targets outside the reachable open range are clamped to
    /// its edge (e.g. f0 = 0 or a width below the margin).
    pub fn from_band(&self, f0: f64, f_delta: f64) -> (f64, f64) {
        const LO: f64 = 1e-7;
        const HI: f64 = 1.0 - 1e-7;
        let sa = (f0 / (0.5 - 2.0 * self.eps)).clamp(LO, HI);
        let a = (sa / (1.0 - sa)).ln();
        let f0_eff = (0.5 - 2.0 * self.eps) * sa;
        let sb = ((f_delta - self.eps) / (0.5 - f0_eff - self.eps)).clamp(LO, HI);
        let b = (sb / (1.0 - sb)).ln();
        (a, b)
    }

    /// Chain rule from band-space gradients to `(a, b)` gradients.
    pub fn grad(&self, a: f64, b: f64, g_f0: f64, g_fd: f64) -> (f64, f64) {
        let sa = sigmoid(a);
        let sb = sigmoid(b);
        let df0_da = (0.5 - 2.0 * self.eps) * sa * (1.0 - sa);
        let f0 = (0.5 - 2.0 * self.eps) * sa;
        let dfd_db = (0.5 - f0 - self.eps) * sb * (1.0 - sb);
        let dfd_da = -df0_da * sb;
        (df0_da * g_f0 + dfd_da * g_fd, dfd_db * g_fd)
    }
}

/// Multi-channel sample matrix, one row per channel, contiguous storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Channels {
    data: Vec<f64>,
    num_channels: usize,
    samples: usize,
}

impl Channels {
    pub fn zeros(num_channels: usize, samples: usize) -> Self {
        Self {
            data: vec![0.0; num_channels * samples],
            num_channels,
            samples,
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        assert!(!rows.is_empty(), "need at least one channel");
        let samples = rows[0].len();
        assert!(
            rows.iter().all(|r| r.len() == samples),
            "ragged channel rows"
        );
        let num_channels = rows.len();
        let mut data = Vec::with_capacity(num_channels * samples);
        for row in rows {
            data.extend_from_slice(&row);
        }
        Self {
            data,
            num_channels,
            samples,
        }
    }

    pub fn num_channels(&self) -> usize {
        self.num_channels
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.data[c * self.samples..(c + 1) * self.samples]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.data[c * self.samples..(c + 1) * self.samples]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.samples)
    }

    /// Per-sample mean across channels, as a single signal.
    pub fn channel_mean(&self) -> Vec<f64> {
        let scale = 1.0 / self.num_channels as f64;
        let mut out = vec![0.0; self.samples];
        for row in self.rows() {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o *= scale;
        }
        out
    }
}

const DOT_LANES: usize = 8;

/// Dot product with a fixed lane pattern.
///
/// The accumulation order depends only on the length, so any two windows of
/// equal length reduce identically -- that is what makes strided output
/// bit-equal to decimated full-rate output.
#[inline]
fn dot_taps(h: &[f64], x: &[f64]) -> f64 {
    debug_assert_eq!(h.len(), x.len());
    let hc = h.chunks_exact(DOT_LANES);
    let xc = x.chunks_exact(DOT_LANES);
    let hr = hc.remainder();
    let xr = xc.remainder();
    let mut acc = [0.0f64; DOT_LANES];
    for (hb, xb) in hc.zip(xc) {
        for l in 0..DOT_LANES {
            acc[l] = hb[l].mul_add(xb[l], acc[l]);
        }
    }
    let mut tail = 0.0;
    for (&a, &b) in hr.iter().zip(xr) {
        tail = a.mul_add(b, tail);
    }
    (((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))) + tail
}

/// Signal with `(K-1)/2` zeros on each side ("same" padding).
pub(crate) fn pad_signal(signal: &[f64], kernel_taps: usize) -> Vec<f64> {
    let pad = (kernel_taps - 1) / 2;
    let mut xpad = vec![0.0; signal.len() + kernel_taps - 1];
    xpad[pad..pad + signal.len()].copy_from_slice(signal);
    xpad
}

/// One output channel: strided sliding dot product over the padded signal.
pub(crate) fn conv_row(xpad: &[f64], taps: &[f64], stride: usize, out: &mut [f64]) {
    let k = taps.len();
    for (j, slot) in out.iter_mut().enumerate() {
        let base = j * stride;
        *slot = dot_taps(taps, &xpad[base..base + k]);
    }
}

/// Tap gradient of one channel: correlates the output gradient with the
/// padded input. Accumulates into `dtaps`.
pub(crate) fn corr_row(xpad: &[f64], dy: &[f64], stride: usize, dtaps: &mut [f64]) {
    let k = dtaps.len();
    for (j, &g) in dy.iter().enumerate() {
        let win = &xpad[j * stride..j * stride + k];
        for (d, &x) in dtaps.iter_mut().zip(win) {
            *d = g.mul_add(x, *d);
        }
    }
}

/// Input gradient of one channel, scattered into padded-signal coordinates.
pub(crate) fn scatter_row(dxpad: &mut [f64], dy: &[f64], taps: &[f64], stride: usize) {
    let k = taps.len();
    for (j, &g) in dy.iter().enumerate() {
        let seg = &mut dxpad[j * stride..j * stride + k];
        for (s, &h) in seg.iter_mut().zip(taps) {
            *s = g.mul_add(h, *s);
        }
    }
}

/// Cross-correlation of the signal with every kernel, "same" zero padding,
/// decimated by `stride`; output has `ceil(N / stride)` samples per channel.
///
/// Channels are independent, so the bank parallelizes across kernels; the
/// per-output reduction order is fixed, making results identical for any
/// thread count, and output `j` at stride `s` bit-equal to output `j*s` at
/// stride 1.
pub fn convolve(signal: &[f64], kernels: &[FirKernel], stride: usize) -> Result<Channels> {
    if kernels.is_empty() {
        return Err(Error::invalid("need at least one kernel"));
    }
    if stride < 1 {
        return Err(Error::invalid("stride must be at least 1"));
    }
    let k = kernels[0].taps.len();
    assert!(
        kernels.iter().all(|ker| ker.taps.len() == k),
        "kernels in one bank must share a tap count"
    );
    if signal.len() < k {
        return Err(Error::SignalTooShort {
            len: signal.len(),
            taps: k,
        });
    }
    let xpad = pad_signal(signal, k);
    let m = signal.len().div_ceil(stride);
    let mut out = Channels::zeros(kernels.len(), m);
    out.data
        .par_chunks_mut(m)
        .zip(kernels.par_iter())
        .for_each(|(row, ker)| conv_row(&xpad, &ker.taps, stride, row));
    Ok(out)
}

/// Magnitude response sampled on a uniform grid of normalized frequencies.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyResponse {
    /// Grid `f_j = 0.5 * j / (num_points - 1)`, cycles/sample.
    pub freqs: Vec<f64>,
    /// `20*log10 |H(f_j)|`, floored at -120 dB.
    pub magnitude_db: Vec<f64>,
}

pub const DB_FLOOR: f64 = -120.0;

/// Direct evaluation of the transfer function magnitude on `num_points`
/// frequencies from DC to Nyquist.
pub fn frequency_response(taps: &[f64], num_points: usize) -> Result<FrequencyResponse> {
    if num_points < 2 {
        return Err(Error::invalid("need at least 2 response points"));
    }
    let mut freqs = Vec::with_capacity(num_points);
    let mut magnitude_db = Vec::with_capacity(num_points);
    for j in 0..num_points {
        let f = 0.5 * j as f64 / (num_points - 1) as f64;
        let mut re = 0.0;
        let mut im = 0.0;
        for (k, &h) in taps.iter().enumerate() {
            let angle = -2.0 * PI * f * k as f64;
            re += h * angle.cos();
            im += h * angle.sin();
        }
        let mag = re.hypot(im);
        freqs.push(f);
        magnitude_db.push((20.0 * mag.log10()).max(DB_FLOOR));
    }
    Ok(FrequencyResponse {
        freqs,
        magnitude_db,
    })
}

impl FrequencyResponse {
    /// Grid frequency with the highest gain, as (normalized freq, dB).
    pub fn peak(&self) -> (f64, f64) {
        let mut best = 0;
        for j in 1..self.magnitude_db.len() {
            if self.magnitude_db[j] > self.magnitude_db[best] {
                best = j;
            }
        }
        (self.freqs[best], self.magnitude_db[best])
    }

    /// CSV rows `freq_normalized,freq_hz,magnitude_db`, 9 significant
    /// digits; `freq_hz = freq * sample_rate`.
    pub fn write_csv<W: Write>(&self, sample_rate: f64, out: &mut W) -> Result<()> {
        writeln!(out, "freq_normalized,freq_hz,magnitude_db")?;
        for (f, db) in self.freqs.iter().zip(&self.magnitude_db) {
            writeln!(out, "{:.8e},{:.8e},{:.8e}", f, f * sample_rate, db)?;
        }
        Ok(())
    }
}
