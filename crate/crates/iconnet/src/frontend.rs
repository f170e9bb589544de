//! Front-end block: FIR kernel bank, downsampling, NLReLU activation, and
//! local response normalization, plus block stacking and rate-matched
//! channel combination.
//!
//! The stage order follows the block diagram: convolve at full rate,
//! decimate, compress with `ln(1 + b*max(0, x))`, then normalize across
//! neighboring channels. Convolving with a stride equal to the decimation
//! factor computes the same values without the discarded samples.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::firconv::{assemble_kernel, convolve, BandParams, BandReparam, Channels, FirKernel};
use crate::windows::{preset_window, BandInit, WindowPreset};

/// Which front-end parameters are trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Band edges learnable, window frozen.
    B,
    /// Window coefficients learnable, bands frozen.
    W,
    /// Both learnable.
    BW,
    /// Nothing in the front-end learnable.
    #[serde(rename = "FIXED")]
    Fixed,
}

impl Variant {
    pub fn bands_learnable(self) -> bool {
        matches!(self, Variant::B | Variant::BW)
    }

    pub fn windows_learnable(self) -> bool {
        matches!(self, Variant::W | Variant::BW)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::B => "B",
            Variant::W => "W",
            Variant::BW => "BW",
            Variant::Fixed => "FIXED",
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "B" => Ok(Variant::B),
            "W" => Ok(Variant::W),
            "BW" => Ok(Variant::BW),
            "FIXED" => Ok(Variant::Fixed),
            other => Err(Error::invalid(format!(
                "unknown variant `{other}` (expected B, W, BW or FIXED)"
            ))),
        }
    }
}

/// Local response normalization constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrnParams {
    /// Channel neighborhood size.
    pub size: usize,
    pub alpha: f64,
    pub beta: f64,
    pub bias: f64,
}

impl Default for LrnParams {
    fn default() -> Self {
        Self {
            size: 5,
            alpha: 1e-4,
            beta: 0.75,
            bias: 2.0,
        }
    }
}

fn default_nlrelu_beta() -> f64 {
    1.0
}

fn default_lrn() -> LrnParams {
    LrnParams::default()
}

/// Static description of one front-end block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontendBlockConfig {
    pub num_kernels: usize,
    /// Odd FIR length shared by the block's kernels.
    pub kernel_taps: usize,
    pub variant: Variant,
    pub window_preset: WindowPreset,
    pub downsample_factor: usize,
    #[serde(default = "default_lrn")]
    pub lrn: LrnParams,
    #[serde(default = "default_nlrelu_beta")]
    pub nlrelu_beta: f64,
}

/// A kernel bank with its trainable state.
#[derive(Debug, Clone)]
pub struct FrontendBlock {
    pub config: FrontendBlockConfig,
    pub kernels: Vec<FirKernel>,
    /// Unconstrained band parameters, present only when bands are trained;
    /// `kernels[i].band` is always the mapped value.
    pub band_raw: Option<Vec<[f64; 2]>>,
    pub reparam: BandReparam,
}

impl FrontendBlock {
    /// Builds the bank from initial bands; window starts at the preset.
    pub fn new(config: FrontendBlockConfig, bands: &[BandInit]) -> Result<Self> {
        if bands.len() != config.num_kernels {
            return Err(Error::invalid(format!(
                "block wants {} kernels but got {} bands",
                config.num_kernels,
                bands.len()
            )));
        }
        if config.downsample_factor < 1 {
            return Err(Error::invalid("downsample factor must be at least 1"));
        }
        let reparam = BandReparam::for_taps(config.kernel_taps);
        let bands_learnable = config.variant.bands_learnable();
        let windows_learnable = config.variant.windows_learnable();
        let mut band_raw = bands_learnable.then(Vec::new);
        let mut kernels = Vec::with_capacity(config.num_kernels);
        for init in bands {
            let (f0, fd) = if let Some(raw) = band_raw.as_mut() {
                // Learnable bands live in unconstrained space; the effective
                // starting band is the mapped value (identical to the request
                // except for bands narrower than the margin).
                let (a, b) = reparam.from_band(init.f0, init.f_delta);
                raw.push([a, b]);
                reparam.to_band(a, b)
            } else {
                (init.f0, init.f_delta)
            };
            let window = preset_window(config.window_preset, windows_learnable);
            kernels.push(assemble_kernel(
                BandParams::new(f0, fd, bands_learnable),
                window,
                config.kernel_taps,
            )?);
        }
        Ok(Self {
            config,
            kernels,
            band_raw,
            reparam,
        })
    }

    /// Re-derives cached taps after a parameter update.
    pub fn refresh_kernels(&mut self) -> Result<()> {
        for (i, ker) in self.kernels.iter_mut().enumerate() {
            if let Some(raw) = &self.band_raw {
                let (f0, fd) = self.reparam.to_band(raw[i][0], raw[i][1]);
                ker.band.f0 = f0;
                ker.band.f_delta = fd;
            }
            *ker = assemble_kernel(ker.band, ker.window.clone(), self.config.kernel_taps)?;
        }
        Ok(())
    }

    /// Trainable scalar count: per kernel, p+1 window coefficients and/or
    /// two band values.
    pub fn param_count(&self) -> usize {
        let per_kernel = if self.config.variant.windows_learnable() {
            self.kernels[0].window.phi.len()
        } else {
            0
        } + if self.config.variant.bands_learnable() {
            2
        } else {
            0
        };
        per_kernel * self.config.num_kernels
    }
}

/// `ln(1 + beta * max(0, x))`.
#[inline]
pub fn nlrelu(x: f64, beta: f64) -> f64 {
    (beta * x.max(0.0)).ln_1p()
}

/// Derivative of [`nlrelu`] with respect to its input.
#[inline]
pub(crate) fn nlrelu_grad(x: f64, beta: f64) -> f64 {
    if x > 0.0 {
        beta / (1.0 + beta * x)
    } else {
        0.0
    }
}

/// `x^0.75` — the default normalization exponent, via two square roots.
#[inline]
fn pow_three_quarters(x: f64) -> f64 {
    (x * x.sqrt()).sqrt()
}

#[inline]
fn lrn_denominator_pow(d: f64, beta: f64) -> f64 {
    if beta == 0.75 {
        pow_three_quarters(d)
    } else {
        d.powf(beta)
    }
}

/// Divisive normalization across a clipped channel neighborhood, applied
/// independently at every time step. Returns the normalized activations and
/// the per-element denominator base `bias + alpha * sum a^2` needed by the
/// backward pass.
pub(crate) fn lrn_with_denom(input: &Channels, params: &LrnParams) -> (Channels, Channels) {
    let c = input.num_channels();
    let m = input.samples();
    let half = params.size / 2;
    let mut out = Channels::zeros(c, m);
    let mut denom = Channels::zeros(c, m);
    // Sliding sum of squares over the channel window, one time column at a
    // time would thrash the row-major layout; instead keep a running
    // per-sample sum updated as the window slides across channels.
    let mut sumsq = vec![0.0f64; m];
    for ch in 0..(half + 1).min(c) {
        for (s, &v) in sumsq.iter_mut().zip(input.channel(ch)) {
            *s += v * v;
        }
    }
    for ch in 0..c {
        {
            let a = input.channel(ch);
            let d_row = denom.channel_mut(ch);
            for i in 0..m {
                d_row[i] = params.bias + params.alpha * sumsq[i];
            }
            let o_row = out.channel_mut(ch);
            for i in 0..m {
                o_row[i] = a[i] / lrn_denominator_pow(d_row[i], params.beta);
            }
        }
        // Slide the window: add channel ch+half+1, drop channel ch-half.
        if ch + 1 < c {
            if ch + half + 1 < c {
                let add = input.channel(ch + half + 1);
                for (s, &v) in sumsq.iter_mut().zip(add) {
                    *s += v * v;
                }
            }
            if ch >= half {
                let drop = input.channel(ch - half);
                for (s, &v) in sumsq.iter_mut().zip(drop) {
                    *s -= v * v;
                }
            }
        }
    }
    (out, denom)
}

/// Normalized activations only.
pub fn lrn(input: &Channels, params: &LrnParams) -> Channels {
    lrn_with_denom(input, params).0
}

/// Gradient through [`lrn`]: given the forward input `a`, the cached
/// denominator bases, and the output gradient, produces the input gradient.
pub(crate) fn lrn_backward(
    a: &Channels,
    denom: &Channels,
    d_out: &Channels,
    params: &LrnParams,
) -> Channels {
    let c = a.num_channels();
    let m = a.samples();
    let half = params.size / 2;
    // w = d_out * a * D^(-beta-1), shared by every neighbor of a channel.
    let mut w = Channels::zeros(c, m);
    for ch in 0..c {
        let a_row = a.channel(ch);
        let d_row = denom.channel(ch);
        let g_row = d_out.channel(ch);
        let w_row = w.channel_mut(ch);
        for i in 0..m {
            w_row[i] = g_row[i] * a_row[i] / (lrn_denominator_pow(d_row[i], params.beta) * d_row[i]);
        }
    }
    let mut wsum = vec![0.0f64; m];
    for ch in 0..(half + 1).min(c) {
        for (s, &v) in wsum.iter_mut().zip(w.channel(ch)) {
            *s += v;
        }
    }
    let mut d_in = Channels::zeros(c, m);
    let scale = -2.0 * params.alpha * params.beta;
    for ch in 0..c {
        {
            let a_row = a.channel(ch);
            let d_row = denom.channel(ch);
            let g_row = d_out.channel(ch);
            let out_row = d_in.channel_mut(ch);
            for i in 0..m {
                out_row[i] = g_row[i] / lrn_denominator_pow(d_row[i], params.beta)
                    + scale * a_row[i] * wsum[i];
            }
        }
        if ch + 1 < c {
            if ch + half + 1 < c {
                let add = w.channel(ch + half + 1);
                for (s, &v) in wsum.iter_mut().zip(add) {
                    *s += v;
                }
            }
            if ch >= half {
                let drop = w.channel(ch - half);
                for (s, &v) in wsum.iter_mut().zip(drop) {
                    *s -= v;
                }
            }
        }
    }
    d_in
}

/// Keeps every `factor`-th sample per channel, starting at index 0.
pub fn downsample(input: &Channels, factor: usize) -> Channels {
    assert!(factor >= 1, "downsample factor must be at least 1");
    if factor == 1 {
        return input.clone();
    }
    let m = input.samples().div_ceil(factor);
    let mut out = Channels::zeros(input.num_channels(), m);
    for c in 0..input.num_channels() {
        let src = input.channel(c);
        let dst = out.channel_mut(c);
        for (j, slot) in dst.iter_mut().enumerate() {
            *slot = src[j * factor];
        }
    }
    out
}

/// Everything the backward pass needs from one block's forward run.
pub(crate) struct BlockTrace {
    /// Padded block input.
    pub xpad: Vec<f64>,
    /// Unpadded input length.
    pub input_len: usize,
    /// Strided convolution output (pre-activation).
    pub conv: Channels,
    /// Post-activation values.
    pub activated: Channels,
    /// LRN denominator bases.
    pub denom: Channels,
    /// Block output.
    pub output: Channels,
}

/// Forward pass of one block with intermediates retained.
pub(crate) fn block_forward_traced(block: &FrontendBlock, waveform: &[f64]) -> Result<BlockTrace> {
    // Stride-s convolution computes exactly the samples that decimation by s
    // would keep (verified by the decimation-composition test).
    let conv = convolve(waveform, &block.kernels, block.config.downsample_factor)?;
    let mut activated = conv.clone();
    for v in activated.data_mut() {
        *v = nlrelu(*v, block.config.nlrelu_beta);
    }
    let (output, denom) = lrn_with_denom(&activated, &block.config.lrn);
    Ok(BlockTrace {
        xpad: crate::firconv::pad_signal(waveform, block.config.kernel_taps),
        input_len: waveform.len(),
        conv,
        activated,
        denom,
        output,
    })
}

/// One block: convolve, decimate, activate, normalize.
pub fn frontend_forward(block: &FrontendBlock, waveform: &[f64]) -> Result<Channels> {
    Ok(block_forward_traced(block, waveform)?.output)
}

/// Sequential blocks; each later block sees the per-sample mean of the
/// previous block's channels, so its kernels stay single-band filters.
pub fn stack_forward(blocks: &[FrontendBlock], waveform: &[f64]) -> Result<Channels> {
    if blocks.is_empty() {
        return Err(Error::invalid("need at least one front-end block"));
    }
    let mut out = frontend_forward(&blocks[0], waveform)?;
    for block in &blocks[1..] {
        let mixed = out.channel_mean();
        out = frontend_forward(block, &mixed)?;
    }
    Ok(out)
}

/// Concatenates channel sets after matching their sample rates.
///
/// Rates must relate by integer factors to the slowest one (which the
/// decimation-based pipeline guarantees); each output is decimated down to
/// it, then lengths are aligned by truncating at most one trailing sample.
pub fn combine_outputs(outputs: &[Channels], rates: &[f64]) -> Result<Channels> {
    if outputs.is_empty() || outputs.len() != rates.len() {
        return Err(Error::invalid(
            "need matching, non-empty output and rate lists",
        ));
    }
    if rates.iter().any(|&r| !(r > 0.0)) {
        return Err(Error::invalid("rates must be positive"));
    }
    let min_rate = rates.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut reduced = Vec::with_capacity(outputs.len());
    for (out, &rate) in outputs.iter().zip(rates) {
        let ratio = rate / min_rate;
        let factor = ratio.round();
        if (ratio - factor).abs() > 1e-9 || factor < 1.0 {
            return Err(Error::invalid(format!(
                "rate {rate} is not an integer multiple of the minimum rate {min_rate}"
            )));
        }
        reduced.push(downsample(out, factor as usize));
    }
    let shortest = reduced.iter().map(|o| o.samples()).min().unwrap();
    let longest = reduced.iter().map(|o| o.samples()).max().unwrap();
    if longest - shortest > 1 {
        return Err(Error::invalid(format!(
            "outputs misaligned after rate matching: lengths {shortest}..{longest}"
        )));
    }
    let total_channels: usize = reduced.iter().map(|o| o.num_channels()).sum();
    let mut combined = Channels::zeros(total_channels, shortest);
    let mut next = 0;
    for o in &reduced {
        for c in 0..o.num_channels() {
            combined
                .channel_mut(next)
                .copy_from_slice(&o.channel(c)[..shortest]);
            next += 1;
        }
    }
    Ok(combined)
}
