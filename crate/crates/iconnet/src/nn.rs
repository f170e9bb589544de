//! Classifier head, loss, reverse-mode gradients through the whole
//! pipeline, RAdam optimizer, one-cycle schedule, and the training loop.
//!
//! Gradients are hand-chained layer by layer rather than taped; the chain
//! (kernel assembly -> strided convolution -> NLReLU -> LRN -> pool ->
//! dense/layer-norm stack) is validated as a whole against central finite
//! differences in the test suite.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::firconv::{corr_row, kernel_param_gradients, scatter_row, Channels};
use crate::frontend::{
    block_forward_traced, lrn_backward, nlrelu_grad, BlockTrace, FrontendBlock,
    FrontendBlockConfig,
};
use crate::windows::cosine_basis;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Temporal pooling applied channel-wise before the dense stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pool {
    Max,
    Mean,
}

fn default_leaky_slope() -> f64 {
    0.01
}

/// Shape of the classifier head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub pool: Pool,
    pub hidden_nodes: usize,
    pub num_classes: usize,
    #[serde(default = "default_leaky_slope")]
    pub leaky_slope: f64,
}

/// Two dense layers around a layer norm and a LeakyReLU.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub config: ClassifierConfig,
    pub in_features: usize,
    /// `hidden x in_features`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub ln_scale: Vec<f64>,
    pub ln_shift: Vec<f64>,
    /// `num_classes x hidden`, row-major.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl Classifier {
    /// Fan-in-scaled uniform init for dense weights and biases; layer norm
    /// starts as the identity.
    pub fn new(config: ClassifierConfig, in_features: usize, seed: u64) -> Result<Self> {
        if config.hidden_nodes < 1 {
            return Err(Error::invalid("classifier needs at least one hidden node"));
        }
        if config.num_classes < 2 {
            return Err(Error::invalid("classifier needs at least two classes"));
        }
        if in_features < 1 {
            return Err(Error::invalid("classifier needs at least one feature"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.hidden_nodes;
        let c = config.num_classes;
        let bound1 = 1.0 / (in_features as f64).sqrt();
        let bound2 = 1.0 / (h as f64).sqrt();
        let draw = |n: usize, bound: f64, rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
        };
        let w1 = draw(h * in_features, bound1, &mut rng);
        let b1 = draw(h, bound1, &mut rng);
        let w2 = draw(c * h, bound2, &mut rng);
        let b2 = draw(c, bound2, &mut rng);
        Ok(Self {
            config,
            in_features,
            w1,
            b1,
            ln_scale: vec![1.0; h],
            ln_shift: vec![0.0; h],
            w2,
            b2,
        })
    }

    pub fn param_count(&self) -> usize {
        self.w1.len()
            + self.b1.len()
            + self.ln_scale.len()
            + self.ln_shift.len()
            + self.w2.len()
            + self.b2.len()
    }
}

/// Intermediates of one classifier forward pass.
#[derive(Debug, Clone)]
pub(crate) struct ClassifierTrace {
    pooled: Vec<f64>,
    /// Winning time index per channel (max pool only).
    argmax: Vec<usize>,
    zhat: Vec<f64>,
    inv_std: f64,
    /// Post-layer-norm affine output (input of the LeakyReLU).
    pre_act: Vec<f64>,
    hidden: Vec<f64>,
}

/// Pooled per-channel features plus max-pool winner indices.
#[derive(Debug, Clone)]
pub struct PooledFeatures {
    pub pooled: Vec<f64>,
    pub argmax: Vec<usize>,
}

pub(crate) fn pool_features(pool: Pool, features: &Channels) -> PooledFeatures {
    let mut pooled = Vec::with_capacity(features.num_channels());
    let mut argmax = Vec::new();
    match pool {
        Pool::Mean => {
            let scale = 1.0 / features.samples() as f64;
            for row in features.rows() {
                pooled.push(row.iter().sum::<f64>() * scale);
            }
        }
        Pool::Max => {
            for row in features.rows() {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                pooled.push(row[best]);
                argmax.push(best);
            }
        }
    }
    PooledFeatures { pooled, argmax }
}

fn classifier_forward_traced(clf: &Classifier, feats: PooledFeatures) -> (Vec<f64>, ClassifierTrace) {
    let h = clf.config.hidden_nodes;
    let n_in = clf.in_features;
    let pooled = feats.pooled;
    let mut z1 = clf.b1.clone();
    for (row, z) in z1.iter_mut().enumerate() {
        let w_row = &clf.w1[row * n_in..(row + 1) * n_in];
        for (w, v) in w_row.iter().zip(&pooled) {
            *z += w * v;
        }
    }
    let mean = z1.iter().sum::<f64>() / h as f64;
    let var = z1.iter().map(|z| (z - mean) * (z - mean)).sum::<f64>() / h as f64;
    let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    let zhat: Vec<f64> = z1.iter().map(|z| (z - mean) * inv_std).collect();
    let pre_act: Vec<f64> = zhat
        .iter()
        .zip(&clf.ln_scale)
        .zip(&clf.ln_shift)
        .map(|((z, s), b)| z * s + b)
        .collect();
    let slope = clf.config.leaky_slope;
    let hidden: Vec<f64> = pre_act
        .iter()
        .map(|&x| if x > 0.0 { x } else { slope * x })
        .collect();
    let mut logits = clf.b2.clone();
    for (row, l) in logits.iter_mut().enumerate() {
        let w_row = &clf.w2[row * h..(row + 1) * h];
        for (w, v) in w_row.iter().zip(&hidden) {
            *l += w * v;
        }
    }
    let trace = ClassifierTrace {
        pooled,
        argmax: feats.argmax,
        zhat,
        inv_std,
        pre_act,
        hidden,
    };
    (logits, trace)
}

/// Pool over time, dense to hidden, layer norm, LeakyReLU, dense to logits.
pub fn classifier_forward(clf: &Classifier, features: &Channels) -> Result<Vec<f64>> {
    if features.num_channels() != clf.in_features {
        return Err(Error::invalid(format!(
            "classifier expects {} channels, got {}",
            clf.in_features,
            features.num_channels()
        )));
    }
    if features.samples() == 0 {
        return Err(Error::invalid("classifier needs at least one time step"));
    }
    let feats = pool_features(clf.config.pool, features);
    Ok(classifier_forward_traced(clf, feats).0)
}

/// Logits straight from pooled features (used when the front-end is frozen
/// and features are precomputed once per item).
pub fn classifier_forward_pooled(clf: &Classifier, feats: &PooledFeatures) -> Vec<f64> {
    classifier_forward_traced(clf, feats.clone()).0
}

struct ClassifierGrads<'a> {
    w1: &'a mut [f64],
    b1: &'a mut [f64],
    ln_scale: &'a mut [f64],
    ln_shift: &'a mut [f64],
    w2: &'a mut [f64],
    b2: &'a mut [f64],
}

impl<'a> ClassifierGrads<'a> {
    fn split(clf: &Classifier, flat: &'a mut [f64]) -> Self {
        let (w1, rest) = flat.split_at_mut(clf.w1.len());
        let (b1, rest) = rest.split_at_mut(clf.b1.len());
        let (ln_scale, rest) = rest.split_at_mut(clf.ln_scale.len());
        let (ln_shift, rest) = rest.split_at_mut(clf.ln_shift.len());
        let (w2, rest) = rest.split_at_mut(clf.w2.len());
        let (b2, rest) = rest.split_at_mut(clf.b2.len());
        debug_assert!(rest.is_empty());
        Self {
            w1,
            b1,
            ln_scale,
            ln_shift,
            w2,
            b2,
        }
    }
}

/// Backward through the dense stack; returns the gradient w.r.t. the pooled
/// feature vector. Accumulates parameter gradients.
fn classifier_backward(
    clf: &Classifier,
    trace: &ClassifierTrace,
    d_logits: &[f64],
    grads: &mut ClassifierGrads,
) -> Vec<f64> {
    let h = clf.config.hidden_nodes;
    let n_in = clf.in_features;
    let mut d_hidden = vec![0.0; h];
    for (row, &g) in d_logits.iter().enumerate() {
        let w_row = &clf.w2[row * h..(row + 1) * h];
        let gw_row = &mut grads.w2[row * h..(row + 1) * h];
        grads.b2[row] += g;
        for i in 0..h {
            gw_row[i] += g * trace.hidden[i];
            d_hidden[i] += g * w_row[i];
        }
    }
    let slope = clf.config.leaky_slope;
    let d_pre: Vec<f64> = d_hidden
        .iter()
        .zip(&trace.pre_act)
        .map(|(&g, &x)| if x > 0.0 { g } else { g * slope })
        .collect();
    let mut d_zhat = vec![0.0; h];
    for i in 0..h {
        grads.ln_scale[i] += d_pre[i] * trace.zhat[i];
        grads.ln_shift[i] += d_pre[i];
        d_zhat[i] = d_pre[i] * clf.ln_scale[i];
    }
    let mean_dz = d_zhat.iter().sum::<f64>() / h as f64;
    let mean_dz_z = d_zhat
        .iter()
        .zip(&trace.zhat)
        .map(|(a, b)| a * b)
        .sum::<f64>()
        / h as f64;
    let d_z1: Vec<f64> = d_zhat
        .iter()
        .zip(&trace.zhat)
        .map(|(&dz, &zh)| trace.inv_std * (dz - mean_dz - zh * mean_dz_z))
        .collect();
    let mut d_pooled = vec![0.0; n_in];
    for (row, &g) in d_z1.iter().enumerate() {
        let w_row = &clf.w1[row * n_in..(row + 1) * n_in];
        let gw_row = &mut grads.w1[row * n_in..(row + 1) * n_in];
        grads.b1[row] += g;
        for i in 0..n_in {
            gw_row[i] += g * trace.pooled[i];
            d_pooled[i] += g * w_row[i];
        }
    }
    d_pooled
}

/// `-log softmax(logits)[label]`, computed with max subtraction.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::invalid(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|&l| (l - m).exp()).sum();
    Ok(z.ln() - (logits[label] - m))
}

/// Gradient of [`cross_entropy`]: `softmax(logits) - onehot(label)`.
pub fn cross_entropy_grad(logits: &[f64], label: usize) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter()
        .enumerate()
        .map(|(i, &e)| e / z - if i == label { 1.0 } else { 0.0 })
        .collect()
}

/// Index of the largest value (first one on ties).
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Front-end stack plus classifier head.
#[derive(Debug, Clone)]
pub struct Model {
    pub blocks: Vec<FrontendBlock>,
    pub classifier: Classifier,
}

impl Model {
    pub fn new(blocks: Vec<FrontendBlock>, classifier: Classifier) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::invalid("model needs at least one front-end block"));
        }
        let last = blocks.last().unwrap().config.num_kernels;
        if classifier.in_features != last {
            return Err(Error::invalid(format!(
                "classifier expects {} features but the last block has {} kernels",
                classifier.in_features, last
            )));
        }
        Ok(Self { blocks, classifier })
    }

    pub fn frontend_param_count(&self) -> usize {
        self.blocks.iter().map(|b| b.param_count()).sum()
    }

    pub fn param_count(&self) -> usize {
        self.frontend_param_count() + self.classifier.param_count()
    }

    /// Flat parameter vector. Layout: per block, window coefficients
    /// (kernel-major) if learnable, then unconstrained band pairs if
    /// learnable; then classifier w1, b1, ln_scale, ln_shift, w2, b2.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for block in &self.blocks {
            if block.config.variant.windows_learnable() {
                for ker in &block.kernels {
                    out.extend_from_slice(&ker.window.phi);
                }
            }
            if let Some(raw) = &block.band_raw {
                for ab in raw {
                    out.extend_from_slice(ab);
                }
            }
        }
        let c = &self.classifier;
        out.extend_from_slice(&c.w1);
        out.extend_from_slice(&c.b1);
        out.extend_from_slice(&c.ln_scale);
        out.extend_from_slice(&c.ln_shift);
        out.extend_from_slice(&c.w2);
        out.extend_from_slice(&c.b2);
        out
    }

    /// Writes a flat vector back and re-derives kernel taps.
    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        let mut at = 0;
        for block in &mut self.blocks {
            if block.config.variant.windows_learnable() {
                for ker in &mut block.kernels {
                    let p = ker.window.phi.len();
                    ker.window.phi.copy_from_slice(&params[at..at + p]);
                    at += p;
                }
            }
            if let Some(raw) = &mut block.band_raw {
                for ab in raw.iter_mut() {
                    ab.copy_from_slice(&params[at..at + 2]);
                    at += 2;
                }
            }
            if block.param_count() > 0 {
                block.refresh_kernels()?;
            }
        }
        let c = &mut self.classifier;
        for buf in [
            &mut c.w1,
            &mut c.b1,
            &mut c.ln_scale,
            &mut c.ln_shift,
            &mut c.w2,
            &mut c.b2,
        ] {
            let n = buf.len();
            buf.copy_from_slice(&params[at..at + n]);
            at += n;
        }
        debug_assert_eq!(at, params.len());
        Ok(())
    }

    /// Logits for one waveform.
    pub fn forward(&self, waveform: &[f64]) -> Result<Vec<f64>> {
        let features = crate::frontend::stack_forward(&self.blocks, waveform)?;
        classifier_forward(&self.classifier, &features)
    }

    /// Pooled features for one waveform (front-end plus pooling only).
    pub fn pooled_features(&self, waveform: &[f64]) -> Result<PooledFeatures> {
        let features = crate::frontend::stack_forward(&self.blocks, waveform)?;
        Ok(pool_features(self.classifier.config.pool, &features))
    }

    pub fn predict(&self, waveform: &[f64]) -> Result<usize> {
        Ok(argmax(&self.forward(waveform)?))
    }
}

/// Loss of one labeled waveform plus its gradient, accumulated into `grad`
/// (same layout as [`Model::params`]).
pub(crate) fn item_loss_and_grad(
    model: &Model,
    waveform: &[f64],
    label: usize,
    grad: &mut [f64],
) -> Result<f64> {
    let n_blocks = model.blocks.len();
    // Forward, retaining intermediates. Later blocks read the channel mean
    // of the previous output, so keep those mixed signals too.
    let mut traces: Vec<BlockTrace> = Vec::with_capacity(n_blocks);
    let mut mixed: Vec<Vec<f64>> = Vec::with_capacity(n_blocks.saturating_sub(1));
    for (i, block) in model.blocks.iter().enumerate() {
        let input: &[f64] = if i == 0 {
            waveform
        } else {
            mixed.last().unwrap()
        };
        let trace = block_forward_traced(block, input)?;
        if i + 1 < n_blocks {
            mixed.push(trace.output.channel_mean());
        }
        traces.push(trace);
    }
    let feats = pool_features(
        model.classifier.config.pool,
        &traces.last().unwrap().output,
    );
    let (logits, ctrace) = classifier_forward_traced(&model.classifier, feats);
    let loss = cross_entropy(&logits, label)?;
    let d_logits = cross_entropy_grad(&logits, label);

    // Slice the flat gradient buffer into per-block and classifier regions.
    let mut rest = grad;
    let mut block_grads: Vec<&mut [f64]> = Vec::with_capacity(n_blocks);
    for block in &model.blocks {
        let (head, tail) = rest.split_at_mut(block.param_count());
        block_grads.push(head);
        rest = tail;
    }
    let mut cgrads = ClassifierGrads::split(&model.classifier, rest);
    let d_pooled = classifier_backward(&model.classifier, &ctrace, &d_logits, &mut cgrads);

    // Pool backward into the last block's output gradient.
    let last_out = &traces.last().unwrap().output;
    let mut d_out = Channels::zeros(last_out.num_channels(), last_out.samples());
    match model.classifier.config.pool {
        Pool::Mean => {
            let scale = 1.0 / last_out.samples() as f64;
            for (c, &g) in d_pooled.iter().enumerate() {
                d_out.channel_mut(c).fill(g * scale);
            }
        }
        Pool::Max => {
            for (c, &g) in d_pooled.iter().enumerate() {
                d_out.channel_mut(c)[ctrace.argmax[c]] = g;
            }
        }
    }

    // Blocks, last to first.
    for i in (0..n_blocks).rev() {
        let block = &model.blocks[i];
        let trace = &traces[i];
        let gslice = block_grads.pop().expect("one grad slice per block");
        let stride = block.config.downsample_factor;
        let k = block.config.kernel_taps;

        let mut d_conv = lrn_backward(&trace.activated, &trace.denom, &d_out, &block.config.lrn);
        for (g, &y) in d_conv.data_mut().iter_mut().zip(trace.conv.data()) {
            *g *= nlrelu_grad(y, block.config.nlrelu_beta);
        }

        let windows_learnable = block.config.variant.windows_learnable();
        let bands_learnable = block.config.variant.bands_learnable();
        if windows_learnable || bands_learnable {
            let p1 = block.kernels[0].window.phi.len();
            let basis = windows_learnable.then(|| cosine_basis(p1, k));
            let window_total = if windows_learnable {
                block.kernels.len() * p1
            } else {
                0
            };
            let mut dh = vec![0.0; k];
            for (ci, ker) in block.kernels.iter().enumerate() {
                dh.fill(0.0);
                corr_row(&trace.xpad, d_conv.channel(ci), stride, &mut dh);
                if let Some(basis) = &basis {
                    let dst = &mut gslice[ci * p1..(ci + 1) * p1];
                    for (kk, &dhk) in dh.iter().enumerate() {
                        let t = ker.prototype[kk] * dhk;
                        for (d, &b) in dst.iter_mut().zip(&basis[kk]) {
                            *d += t * b;
                        }
                    }
                }
                if bands_learnable {
                    let (_, df0, dfd) = kernel_param_gradients(ker);
                    let mut g0 = 0.0;
                    let mut gd = 0.0;
                    for kk in 0..k {
                        g0 += dh[kk] * df0[kk];
                        gd += dh[kk] * dfd[kk];
                    }
                    let raw = block.band_raw.as_ref().expect("learnable bands")[ci];
                    let (ga, gb) = block.reparam.grad(raw[0], raw[1], g0, gd);
                    gslice[window_total + 2 * ci] += ga;
                    gslice[window_total + 2 * ci + 1] += gb;
                }
            }
        }

        // Propagate into the previous block through the channel mean.
        if i > 0 {
            let n_in = trace.input_len;
            let mut dxpad = vec![0.0; n_in + k - 1];
            for (ci, ker) in block.kernels.iter().enumerate() {
                scatter_row(&mut dxpad, d_conv.channel(ci), &ker.taps, stride);
            }
            let pad = (k - 1) / 2;
            let d_mixed = &dxpad[pad..pad + n_in];
            let prev = &traces[i - 1].output;
            let scale = 1.0 / prev.num_channels() as f64;
            let mut d_prev = Channels::zeros(prev.num_channels(), prev.samples());
            for c in 0..prev.num_channels() {
                for (slot, &g) in d_prev.channel_mut(c).iter_mut().zip(d_mixed) {
                    *slot = g * scale;
                }
            }
            d_out = d_prev;
        }
    }
    Ok(loss)
}

/// Mean cross-entropy over a labeled batch plus its gradient in
/// [`Model::params`] layout. Items evaluate in parallel; the reduction order
/// is fixed, so the result does not depend on the thread count.
pub fn batch_loss_and_grad(
    model: &Model,
    waves: &[Vec<f64>],
    labels: &[usize],
) -> Result<(f64, Vec<f64>)> {
    if waves.is_empty() || waves.len() != labels.len() {
        return Err(Error::invalid(
            "batch must be non-empty with one label per waveform",
        ));
    }
    let p = model.param_count();
    let per_item: Vec<(f64, Vec<f64>)> = waves
        .par_iter()
        .zip(labels.par_iter())
        .map(|(w, &l)| {
            let mut grad = vec![0.0; p];
            let loss = item_loss_and_grad(model, w, l, &mut grad)?;
            Ok((loss, grad))
        })
        .collect::<Result<_>>()?;
    let scale = 1.0 / waves.len() as f64;
    let mut grad = vec![0.0; p];
    let mut loss = 0.0;
    for (l, g) in &per_item {
        loss += l;
        for (acc, &v) in grad.iter_mut().zip(g) {
            *acc += v;
        }
    }
    loss *= scale;
    for g in &mut grad {
        *g *= scale;
    }
    Ok((loss, grad))
}

/// Loss/gradient of one item through the classifier only, for models whose
/// front-end holds no trainable parameters and whose pooled features were
/// precomputed.
fn item_loss_and_grad_pooled(
    model: &Model,
    feats: &PooledFeatures,
    label: usize,
    grad: &mut [f64],
) -> Result<f64> {
    debug_assert_eq!(model.frontend_param_count(), 0);
    let (logits, ctrace) = classifier_forward_traced(&model.classifier, feats.clone());
    let loss = cross_entropy(&logits, label)?;
    let d_logits = cross_entropy_grad(&logits, label);
    let mut cgrads = ClassifierGrads::split(&model.classifier, grad);
    classifier_backward(&model.classifier, &ctrace, &d_logits, &mut cgrads);
    Ok(loss)
}

/// RAdam optimizer state over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct RAdam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl RAdam {
    pub fn new(param_count: usize, weight_decay: f64) -> Self {
        Self {
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay,
        }
    }

    /// One update: the variance-rectified step once the approximated moment
    /// length exceeds 4, a bias-corrected momentum-only step before that.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        assert_eq!(grads.len(), self.m.len(), "gradient count mismatch");
        self.step += 1;
        let t = self.step as f64;
        let b1 = self.beta1;
        let b2 = self.beta2;
        let bias1 = 1.0 - b1.powf(t);
        let bias2 = 1.0 - b2.powf(t);
        let rho_inf = 2.0 / (1.0 - b2) - 1.0;
        let rho_t = rho_inf - 2.0 * t * b2.powf(t) / bias2;
        let rectified = rho_t > 4.0;
        let rect = if rectified {
            (((rho_t - 4.0) * (rho_t - 2.0) * rho_inf)
                / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
                .sqrt()
        } else {
            0.0
        };
        for i in 0..params.len() {
            let g = grads[i] + self.weight_decay * params[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let m_hat = self.m[i] / bias1;
            if rectified {
                let v_hat = (self.v[i] / bias2).sqrt();
                params[i] -= lr * rect * m_hat / (v_hat + self.epsilon);
            } else {
                params[i] -= lr * m_hat;
            }
        }
    }
}

/// One-cycle learning-rate schedule parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub max_lr: f64,
    pub total_steps: usize,
    pub pct_start: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
}

impl ScheduleConfig {
    pub fn new(max_lr: f64, total_steps: usize) -> Self {
        Self {
            max_lr,
            total_steps,
            pct_start: 0.3,
            div_factor: 25.0,
            final_div_factor: 1e4,
        }
    }
}

/// Cosine ramp from `max_lr/div_factor` up to `max_lr` over the first
/// `pct_start` of the run, then cosine anneal down to
/// `max_lr/final_div_factor`.
pub fn onecycle_lr(schedule: &ScheduleConfig, step: usize) -> Result<f64> {
    let total = schedule.total_steps;
    if total < 2 {
        return Err(Error::invalid("schedule needs at least 2 steps"));
    }
    if !(schedule.pct_start > 0.0 && schedule.pct_start < 1.0) {
        return Err(Error::invalid("pct_start must be in (0, 1)"));
    }
    if step >= total {
        return Err(Error::invalid(format!(
            "step {step} out of range for {total} schedule steps"
        )));
    }
    let peak =
        ((schedule.pct_start * total as f64).round() as usize).clamp(1, total.saturating_sub(2).max(1));
    let initial = schedule.max_lr / schedule.div_factor;
    let floor = schedule.max_lr / schedule.final_div_factor;
    let rise = |x: f64| 0.5 * (1.0 - (std::f64::consts::PI * x).cos());
    // Interpolate as (1-r)*a + r*b so both endpoints are hit exactly.
    if step <= peak {
        let r = rise(step as f64 / peak as f64);
        Ok((1.0 - r) * initial + r * schedule.max_lr)
    } else {
        let span = (total - 1 - peak) as f64;
        let r = rise((step - peak) as f64 / span);
        Ok((1.0 - r) * schedule.max_lr + r * floor)
    }
}

/// Knobs of one training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub batch_size: usize,
    pub max_lr: f64,
    pub pct_start: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 60,
            early_stop_patience: 10,
            batch_size: 32,
            max_lr: 1e-3,
            pct_start: 0.3,
            div_factor: 25.0,
            final_div_factor: 1e4,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_ua: f64,
    pub lr: f64,
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Model restored to the best-validation epoch.
    pub model: Model,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_ua: f64,
}

/// Unweighted accuracy: mean per-class recall, in percent. Classes without
/// support are excluded.
fn unweighted_accuracy(preds: &[usize], labels: &[usize], num_classes: usize) -> f64 {
    let mut support = vec![0usize; num_classes];
    let mut correct = vec![0usize; num_classes];
    for (&p, &l) in preds.iter().zip(labels) {
        support[l] += 1;
        if p == l {
            correct[l] += 1;
        }
    }
    let mut sum = 0.0;
    let mut seen = 0;
    for c in 0..num_classes {
        if support[c] > 0 {
            sum += correct[c] as f64 / support[c] as f64;
            seen += 1;
        }
    }
    if seen == 0 {
        0.0
    } else {
        100.0 * sum / seen as f64
    }
}

enum ItemSource<'a> {
    Waveforms(&'a [Vec<f64>]),
    Pooled(Vec<PooledFeatures>),
}

impl ItemSource<'_> {
    fn loss_and_grad(&self, model: &Model, idx: usize, label: usize, grad: &mut [f64]) -> Result<f64> {
        match self {
            ItemSource::Waveforms(waves) => item_loss_and_grad(model, &waves[idx], label, grad),
            ItemSource::Pooled(feats) => {
                item_loss_and_grad_pooled(model, &feats[idx], label, grad)
            }
        }
    }

    fn predict(&self, model: &Model, idx: usize) -> Result<usize> {
        match self {
            ItemSource::Waveforms(waves) => model.predict(&waves[idx]),
            ItemSource::Pooled(feats) => Ok(argmax(&classifier_forward_pooled(
                &model.classifier,
                &feats[idx],
            ))),
        }
    }
}

/// Mini-batch training with RAdam and a one-cycle schedule; early stopping
/// on validation unweighted accuracy. Deterministic for a fixed seed: the
/// per-item gradients are reduced in batch order regardless of thread count.
///
/// When no front-end parameter is trainable, pooled features are computed
/// once per item and training touches only the classifier.
pub fn train(
    mut model: Model,
    train_waves: &[Vec<f64>],
    train_labels: &[usize],
    val_waves: &[Vec<f64>],
    val_labels: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if train_waves.is_empty() || val_waves.is_empty() {
        return Err(Error::invalid("train and validation splits must be non-empty"));
    }
    if train_waves.len() != train_labels.len() || val_waves.len() != val_labels.len() {
        return Err(Error::invalid("waveform/label counts differ"));
    }
    if cfg.batch_size < 1 || cfg.max_epochs < 1 {
        return Err(Error::invalid("batch_size and max_epochs must be at least 1"));
    }
    let classes = model.classifier.config.num_classes;
    if train_labels.iter().chain(val_labels).any(|&l| l >= classes) {
        return Err(Error::invalid(format!("label out of range for {classes} classes")));
    }

    let frozen_frontend = model.frontend_param_count() == 0;
    let (train_src, val_src) = if frozen_frontend {
        let feats =
            |waves: &[Vec<f64>]| -> Result<Vec<PooledFeatures>> {
                waves
                    .par_iter()
                    .map(|w| model.pooled_features(w))
                    .collect()
            };
        (
            ItemSource::Pooled(feats(train_waves)?),
            ItemSource::Pooled(feats(val_waves)?),
        )
    } else {
        (
            ItemSource::Waveforms(train_waves),
            ItemSource::Waveforms(val_waves),
        )
    };

    let n = train_waves.len();
    let batches_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.max_epochs * batches_per_epoch;
    let schedule = ScheduleConfig {
        max_lr: cfg.max_lr,
        total_steps,
        pct_start: cfg.pct_start,
        div_factor: cfg.div_factor,
        final_div_factor: cfg.final_div_factor,
    };

    let mut params = model.params();
    let mut opt = RAdam::new(params.len(), cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();

    let mut history = Vec::new();
    let mut best_params = params.clone();
    let mut best_val_ua = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut stale_epochs = 0;
    let mut step = 0usize;

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut last_lr = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let lr = if total_steps >= 2 {
                onecycle_lr(&schedule, step)?
            } else {
                cfg.max_lr
            };
            last_lr = lr;
            step += 1;

            let per_item: Vec<(f64, Vec<f64>)> = chunk
                .par_iter()
                .map(|&idx| {
                    let mut grad = vec![0.0; params.len()];
                    let loss =
                        train_src.loss_and_grad(&model, idx, train_labels[idx], &mut grad)?;
                    Ok((loss, grad))
                })
                .collect::<Result<_>>()?;
            let scale = 1.0 / chunk.len() as f64;
            let mut grad = vec![0.0; params.len()];
            let mut batch_loss = 0.0;
            for (loss, g) in &per_item {
                batch_loss += loss;
                for (acc, &v) in grad.iter_mut().zip(g) {
                    *acc += v;
                }
            }
            batch_loss *= scale;
            for g in &mut grad {
                *g *= scale;
            }
            if !batch_loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss became non-finite at epoch {epoch}, step {step}"
                )));
            }
            opt.step(&mut params, &grad, lr);
            model.set_params(&params)?;
            loss_sum += batch_loss * chunk.len() as f64;
        }

        let preds: Vec<usize> = (0..val_waves.len())
            .into_par_iter()
            .map(|i| val_src.predict(&model, i))
            .collect::<Result<_>>()?;
        let val_ua = unweighted_accuracy(&preds, val_labels, classes);
        history.push(EpochStats {
            epoch,
            train_loss: loss_sum / n as f64,
            val_ua,
            lr: last_lr,
        });

        if val_ua > best_val_ua {
            best_val_ua = val_ua;
            best_epoch = epoch;
            best_params.copy_from_slice(&params);
            stale_epochs = 0;
        } else {
            stale_epochs += 1;
            if stale_epochs >= cfg.early_stop_patience {
                break;
            }
        }
    }

    model.set_params(&best_params)?;
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        best_val_ua,
    })
}

// --- Checkpoint format ----------------------------------------------------
//
// Little-endian binary layout:
//   bytes 0..4   magic "ICON"
//   u32          format version (currently 1)
//   u32          metadata length, then that many bytes of JSON metadata
//   u32          tensor count
//   per tensor:  u32 name length, name bytes (UTF-8),
//                u32 ndim, ndim x u64 dims,
//                prod(dims) x f64 values
// Any language with a JSON parser can read it.

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ICON";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to rebuild the model around the stored tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub sample_rate: f64,
    pub class_names: Vec<String>,
    pub blocks: Vec<FrontendBlockConfig>,
    pub classifier: ClassifierConfig,
}

/// Named tensor inside a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

fn put_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn get_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn model_tensors(model: &Model) -> Vec<Tensor> {
    let mut tensors = Vec::new();
    for (i, block) in model.blocks.iter().enumerate() {
        let n = block.kernels.len();
        let p1 = block.kernels[0].window.phi.len();
        let mut phi = Vec::with_capacity(n * p1);
        let mut f0 = Vec::with_capacity(n);
        let mut fd = Vec::with_capacity(n);
        for ker in &block.kernels {
            phi.extend_from_slice(&ker.window.phi);
            f0.push(ker.band.f0);
            fd.push(ker.band.f_delta);
        }
        tensors.push(Tensor {
            name: format!("block{i}.phi"),
            dims: vec![n, p1],
            data: phi,
        });
        tensors.push(Tensor {
            name: format!("block{i}.f0"),
            dims: vec![n],
            data: f0,
        });
        tensors.push(Tensor {
            name: format!("block{i}.f_delta"),
            dims: vec![n],
            data: fd,
        });
        if let Some(raw) = &block.band_raw {
            tensors.push(Tensor {
                name: format!("block{i}.band_raw"),
                dims: vec![n, 2],
                data: raw.iter().flatten().copied().collect(),
            });
        }
    }
    let c = &model.classifier;
    let h = c.config.hidden_nodes;
    let pairs: [(&str, &Vec<f64>, Vec<usize>); 6] = [
        ("classifier.w1", &c.w1, vec![h, c.in_features]),
        ("classifier.b1", &c.b1, vec![h]),
        ("classifier.ln_scale", &c.ln_scale, vec![h]),
        ("classifier.ln_shift", &c.ln_shift, vec![h]),
        ("classifier.w2", &c.w2, vec![c.config.num_classes, h]),
        ("classifier.b2", &c.b2, vec![c.config.num_classes]),
    ];
    for (name, data, dims) in pairs {
        tensors.push(Tensor {
            name: name.to_string(),
            dims,
            data: data.clone(),
        });
    }
    tensors
}

/// Serializes the model and its metadata.
pub fn write_checkpoint<W: Write>(model: &Model, meta: &CheckpointMeta, w: &mut W) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    put_u32(w, CHECKPOINT_VERSION)?;
    let meta_json = serde_json::to_vec(meta)?;
    put_u32(w, meta_json.len() as u32)?;
    w.write_all(&meta_json)?;
    let tensors = model_tensors(model);
    put_u32(w, tensors.len() as u32)?;
    for t in &tensors {
        put_u32(w, t.name.len() as u32)?;
        w.write_all(t.name.as_bytes())?;
        put_u32(w, t.dims.len() as u32)?;
        for &d in &t.dims {
            put_u64(w, d as u64)?;
        }
        let mut bytes = Vec::with_capacity(t.data.len() * 8);
        for &v in &t.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&bytes)?;
    }
    Ok(())
}

/// Raw checkpoint contents.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::format("checkpoint", format!("missing tensor `{name}`")))
    }
}

/// Parses a checkpoint stream.
pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Checkpoint> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::CheckpointVersion(format!(
            "bad magic bytes {magic:02x?}, expected \"ICON\""
        )));
    }
    let version = get_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion(format!(
            "unsupported format version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let meta_len = get_u32(r)? as usize;
    if meta_len > 1 << 24 {
        return Err(Error::format("checkpoint", "metadata block too large"));
    }
    let mut meta_buf = vec![0u8; meta_len];
    r.read_exact(&mut meta_buf)?;
    let meta: CheckpointMeta = serde_json::from_slice(&meta_buf)?;
    let count = get_u32(r)? as usize;
    if count > 1 << 16 {
        return Err(Error::format("checkpoint", "tensor count too large"));
    }
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = get_u32(r)? as usize;
        if name_len > 4096 {
            return Err(Error::format("checkpoint", "tensor name too long"));
        }
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::format("checkpoint", "tensor name not UTF-8"))?;
        let ndim = get_u32(r)? as usize;
        if ndim > 8 {
            return Err(Error::format("checkpoint", "tensor rank too large"));
        }
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(get_u64(r)? as usize);
        }
        let len: usize = dims.iter().product();
        if len > 1 << 28 {
            return Err(Error::format("checkpoint", "tensor too large"));
        }
        let mut bytes = vec![0u8; len * 8];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(Tensor { name, dims, data });
    }
    Ok(Checkpoint { meta, tensors })
}

/// Rebuilds a model from checkpoint contents.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<Model> {
    use crate::firconv::{assemble_kernel, BandParams, BandReparam};
    use crate::windows::WindowCoefficients;

    let mut blocks = Vec::with_capacity(ckpt.meta.blocks.len());
    for (i, config) in ckpt.meta.blocks.iter().enumerate() {
        let n = config.num_kernels;
        let phi_t = ckpt.tensor(&format!("block{i}.phi"))?;
        let f0_t = ckpt.tensor(&format!("block{i}.f0"))?;
        let fd_t = ckpt.tensor(&format!("block{i}.f_delta"))?;
        if phi_t.dims.len() != 2 || phi_t.dims[0] != n || f0_t.data.len() != n
            || fd_t.data.len() != n
        {
            return Err(Error::format(
                "checkpoint",
                format!("block {i} tensor shapes do not match its configuration"),
            ));
        }
        let p1 = phi_t.dims[1];
        let windows_learnable = config.variant.windows_learnable();
        let bands_learnable = config.variant.bands_learnable();
        let mut kernels = Vec::with_capacity(n);
        for ki in 0..n {
            let phi = phi_t.data[ki * p1..(ki + 1) * p1].to_vec();
            let window = WindowCoefficients::new(phi, windows_learnable)?;
            let (f0, fd) = (f0_t.data[ki], fd_t.data[ki]);
            if !(f0 >= 0.0 && fd > 0.0 && f0 + fd <= 0.5 + 1e-12) {
                return Err(Error::format(
                    "checkpoint",
                    format!("block {i} kernel {ki} stores an invalid band ({f0}, {fd})"),
                ));
            }
            let band = BandParams::new(f0, fd, bands_learnable);
            kernels.push(assemble_kernel(band, window, config.kernel_taps)?);
        }
        let reparam = BandReparam::for_taps(config.kernel_taps);
        let band_raw = if bands_learnable {
            let raw_t = ckpt.tensor(&format!("block{i}.band_raw"))?;
            if raw_t.data.len() != 2 * n {
                return Err(Error::format(
                    "checkpoint",
                    format!("block {i} raw band tensor has the wrong size"),
                ));
            }
            Some(
                raw_t
                    .data
                    .chunks_exact(2)
                    .map(|c| [c[0], c[1]])
                    .collect::<Vec<_>>(),
            )
        } else {
            None
        };
        blocks.push(FrontendBlock {
            config: config.clone(),
            kernels,
            band_raw,
            reparam,
        });
    }

    let cc = ckpt.meta.classifier.clone();
    let w1_t = ckpt.tensor("classifier.w1")?;
    if w1_t.dims.len() != 2 || w1_t.dims[0] != cc.hidden_nodes {
        return Err(Error::format("checkpoint", "classifier.w1 has wrong shape"));
    }
    let in_features = w1_t.dims[1];
    let expect = |name: &str, len: usize| -> Result<Vec<f64>> {
        let t = ckpt.tensor(name)?;
        if t.data.len() != len {
            return Err(Error::format(
                "checkpoint",
                format!("{name} has {} values, expected {len}", t.data.len()),
            ));
        }
        Ok(t.data.clone())
    };
    let classifier = Classifier {
        in_features,
        w1: expect("classifier.w1", cc.hidden_nodes * in_features)?,
        b1: expect("classifier.b1", cc.hidden_nodes)?,
        ln_scale: expect("classifier.ln_scale", cc.hidden_nodes)?,
        ln_shift: expect("classifier.ln_shift", cc.hidden_nodes)?,
        w2: expect("classifier.w2", cc.num_classes * cc.hidden_nodes)?,
        b2: expect("classifier.b2", cc.num_classes)?,
        config: cc,
    };
    Model::new(blocks, classifier)
}
