//! Normalization statistics and layers.
//!
//! The central layer whitens activations with a convex per-domain mixture of
//! batch statistics (per channel, over the whole batch) and instance
//! statistics (per instance per channel), then applies per-domain affine
//! parameters. The mixture weight is a sigmoid of one unconstrained logit
//! per domain, shared by every normalization layer of that domain's branch.
//! Layer statistics exist only for the switchable-normalization baseline.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NormError(pub String);

impl fmt::Display for NormError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "normalization error: {}", self.0)
    }
}

pub type Result<T> = core::result::Result<T, NormError>;

macro_rules! check {
    ($cond:expr, $($arg:tt)*) => {
        if !($cond) {
            return Err(NormError(format!($($arg)*)));
        }
    };
}

/// Reduction axes for normalization statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StatMode {
    /// One (mean, var) per channel, reduced over instances and space.
    Batch,
    /// One (mean, var) per (instance, channel), reduced over space.
    Instance,
    /// One (mean, var) per instance, reduced over channels and space.
    Layer,
}

/// Population mean/variance under one reduction mode.
///
/// Storage: Batch mode holds `c` entries, Instance mode `n * c` entries
/// (instance-major), Layer mode `n` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mode: StatMode,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Two-pass population statistics of `x` under `mode`.
pub fn compute_stats(x: &Tensor4, mode: StatMode) -> Result<ChannelStats> {
    check!(!x.is_empty(), "cannot compute statistics of an empty tensor");
    let (n, c, h, w) = x.dims();
    let hw = (h * w) as f64;
    // Two passes (mean, then centered variance) with one running accumulator
    // per statistic in plain element order.
    let (mean, var) = match mode {
        StatMode::Batch => {
            let denom = n as f64 * hw;
            let mut mean = vec![0.0; c];
            for b in 0..n {
                for ch in 0..c {
                    for &v in x.plane(b, ch) {
                        mean[ch] += v;
                    }
                }
            }
            for m in mean.iter_mut() {
                *m /= denom;
            }
            let mut var = vec![0.0; c];
            for b in 0..n {
                for ch in 0..c {
                    let m = mean[ch];
                    for &v in x.plane(b, ch) {
                        var[ch] += (v - m) * (v - m);
                    }
                }
            }
            for v in var.iter_mut() {
                *v /= denom;
            }
            (mean, var)
        }
        StatMode::Instance => {
            let mut mean = vec![0.0; n * c];
            let mut var = vec![0.0; n * c];
            for b in 0..n {
                for ch in 0..c {
                    let k = b * c + ch;
                    for &v in x.plane(b, ch) {
                        mean[k] += v;
                    }
                    mean[k] /= hw;
                    let m = mean[k];
                    for &v in x.plane(b, ch) {
                        var[k] += (v - m) * (v - m);
                    }
                    var[k] /= hw;
                }
            }
            (mean, var)
        }
        StatMode::Layer => {
            let denom = c as f64 * hw;
            let mut mean = vec![0.0; n];
            let mut var = vec![0.0; n];
            for b in 0..n {
                for ch in 0..c {
                    for &v in x.plane(b, ch) {
                        mean[b] += v;
                    }
                }
                mean[b] /= denom;
                let m = mean[b];
                for ch in 0..c {
                    for &v in x.plane(b, ch) {
                        var[b] += (v - m) * (v - m);
                    }
                }
                var[b] /= denom;
            }
            (mean, var)
        }
    };
    Ok(ChannelStats { mode, mean, var })
}

/// One unconstrained logit; the mixture weight is its sigmoid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureWeight {
    pub logit: f64,
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-z))
}

impl MixtureWeight {
    pub fn new(logit: f64) -> Self {
        MixtureWeight { logit }
    }

    /// Weight on the batch-statistics component, in (0, 1).
    pub fn w(&self) -> f64 {
        sigmoid(self.logit)
    }
}

/// Per-channel scale and shift; one pair per (domain, layer).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl AffineParams {
    pub fn identity(channels: usize) -> Self {
        AffineParams {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
        }
    }
}

/// Exponential moving average of batch statistics, used at inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
    pub count: u64,
}

impl RunningStats {
    pub fn new(channels: usize, momentum: f64) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum,
            count: 0,
        }
    }

    /// running <- (1 - m) * running + m * batch.
    pub fn update(&mut self, batch: &ChannelStats) {
        debug_assert_eq!(batch.mode, StatMode::Batch);
        let m = self.momentum;
        for (r, &b) in self.mean.iter_mut().zip(batch.mean.iter()) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, &b) in self.var.iter_mut().zip(batch.var.iter()) {
            *r = (1.0 - m) * *r + m * b;
        }
        self.count += 1;
    }
}

/// Normalization variants of the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Single shared batch norm for all domains.
    Bn,
    /// Instance norm everywhere, shared affine.
    In,
    /// Per-domain batch norm (separate affine and running stats), no
    /// instance component.
    Dsbn,
    /// Learnable softmax mixture over batch/instance/layer statistics with a
    /// single domain-agnostic weight set shared across layers.
    SnShared,
    /// First normalization site splits channels: instance norm on the first
    /// half, batch norm on the rest; later sites are batch norm.
    IbnSplit,
    /// Per-domain sigmoid mixture of batch and instance statistics,
    /// per-domain affine, weight shared across layers.
    Dson,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormConfig {
    pub epsilon: f64,
    pub momentum: f64,
    pub variant: Variant,
    /// When false, the Dson variant shares one mixture logit across domains.
    pub domain_specific_weights: bool,
}

impl NormConfig {
    pub fn new(variant: Variant) -> Self {
        NormConfig {
            epsilon: 1e-5,
            momentum: 0.1,
            variant,
            domain_specific_weights: true,
        }
    }
}

impl Default for NormConfig {
    fn default() -> Self {
        NormConfig::new(Variant::Dson)
    }
}

/// Convex combination of batch and instance statistics, broadcast to one
/// (mean, var) per (instance, channel). Instance-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub instances: usize,
    pub channels: usize,
}

/// mean = w * bn + (1 - w) * in, elementwise; variances combined the same
/// way (variances directly, not standard deviations).
pub fn mix_stats(bn: &ChannelStats, inst: &ChannelStats, w: &MixtureWeight) -> Result<MixedStats> {
    check!(bn.mode == StatMode::Batch, "first argument must hold batch statistics");
    check!(
        inst.mode == StatMode::Instance,
        "second argument must hold instance statistics"
    );
    let c = bn.mean.len();
    check!(
        inst.mean.len() % c == 0,
        "instance stats length {} is not a multiple of channel count {}",
        inst.mean.len(),
        c
    );
    let n = inst.mean.len() / c;
    let wb = w.w();
    let wi = 1.0 - wb;
    let mut mean = vec![0.0; n * c];
    let mut var = vec![0.0; n * c];
    for b in 0..n {
        for ch in 0..c {
            let k = b * c + ch;
            mean[k] = wb * bn.mean[ch] + wi * inst.mean[k];
            var[k] = wb * bn.var[ch] + wi * inst.var[k];
        }
    }
    Ok(MixedStats {
        mean,
        var,
        instances: n,
        channels: c,
    })
}

// ---------------------------------------------------------------------------
// General three-component mixed normalization
// ---------------------------------------------------------------------------

/// Weights on (batch, instance, layer) statistics. They must sum to 1 for a
/// convex mixture; the forward does not renormalize.
pub type StatWeights = [f64; 3];

/// Everything the backward pass needs from a training-mode forward.
#[derive(Debug, Clone)]
pub struct NormCache {
    pub x: Tensor4,
    pub xhat: Tensor4,
    pub weights: StatWeights,
    pub gamma: Vec<f64>,
    pub bn: ChannelStats,
    pub inst: ChannelStats,
    pub layer: ChannelStats,
    /// Mixed mean/inverse-std per (instance, channel).
    pub mean_mix: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Gradients produced by `norm_backward`.
#[derive(Debug, Clone)]
pub struct NormGrads {
    pub grad_x: Tensor4,
    pub grad_gamma: Vec<f64>,
    pub grad_beta: Vec<f64>,
    /// Gradient wrt each raw statistic weight (batch, instance, layer).
    pub grad_weights: StatWeights,
}

/// Training-mode forward: whiten with freshly computed mixed statistics,
/// then scale and shift per channel.
pub fn norm_forward_train(
    x: &Tensor4,
    weights: StatWeights,
    affine: &AffineParams,
    eps: f64,
) -> Result<(Tensor4, NormCache)> {
    check!(!x.is_empty(), "empty batch");
    check!(x.all_finite(), "non-finite input to normalization");
    let (n, c, h, w) = x.dims();
    check!(
        affine.gamma.len() == c && affine.beta.len() == c,
        "affine parameter length {} does not match {} channels",
        affine.gamma.len(),
        c
    );
    let bn = compute_stats(x, StatMode::Batch)?;
    let inst = compute_stats(x, StatMode::Instance)?;
    let layer = compute_stats(x, StatMode::Layer)?;
    let [wb, wi, wl] = weights;

    let mut mean_mix = vec![0.0; n * c];
    let mut inv_std = vec![0.0; n * c];
    for b in 0..n {
        for ch in 0..c {
            let k = b * c + ch;
            mean_mix[k] = wb * bn.mean[ch] + wi * inst.mean[k] + wl * layer.mean[b];
            let var = wb * bn.var[ch] + wi * inst.var[k] + wl * layer.var[b];
            inv_std[k] = 1.0 / libm::sqrt(var + eps);
        }
    }

    let mut y = Tensor4::zeros(n, c, h, w);
    let mut xhat = Tensor4::zeros(n, c, h, w);
    for b in 0..n {
        for ch in 0..c {
            let k = b * c + ch;
            let (m, s) = (mean_mix[k], inv_std[k]);
            let (g, be) = (affine.gamma[ch], affine.beta[ch]);
            let xin = x.plane(b, ch);
            let xh = xhat.plane_mut(b, ch);
            for (o, &v) in xh.iter_mut().zip(xin.iter()) {
                *o = (v - m) * s;
            }
            let yo = y.plane_mut(b, ch);
            for (o, &v) in yo.iter_mut().zip(xhat.plane(b, ch).iter()) {
                *o = g * v + be;
            }
        }
    }
    let cache = NormCache {
        x: x.clone(),
        xhat,
        weights,
        gamma: affine.gamma.clone(),
        bn,
        inst,
        layer,
        mean_mix,
        inv_std,
    };
    Ok((y, cache))
}

/// Exact gradients of the training-mode forward, differentiating through all
/// statistics and the mixture weights.
pub fn norm_backward(cache: &NormCache, grad_y: &Tensor4) -> Result<NormGrads> {
    let (n, c, h, w) = cache.x.dims();
    check!(
        grad_y.dims() == cache.x.dims(),
        "grad dims {:?} do not match cached input {:?}",
        grad_y.dims(),
        cache.x.dims()
    );
    let hw = (h * w) as f64;
    let [wb, wi, wl] = cache.weights;

    let mut grad_gamma = vec![0.0; c];
    let mut grad_beta = vec![0.0; c];
    // Per-(instance, channel) reductions of the whitened gradient.
    let mut d_mean = vec![0.0; n * c]; // dL/d mu_mix
    let mut d_var = vec![0.0; n * c]; // dL/d sigma^2_mix
    for b in 0..n {
        for ch in 0..c {
            let k = b * c + ch;
            let g = cache.gamma[ch];
            let inv = cache.inv_std[k];
            let gy = grad_y.plane(b, ch);
            let xh = cache.xhat.plane(b, ch);
            let mut s1 = 0.0; // sum of d xhat
            let mut s2 = 0.0; // sum of d xhat * xhat
            let mut sg = 0.0; // sum of dy * xhat
            let mut sb = 0.0; // sum of dy
            for (&dy, &xv) in gy.iter().zip(xh.iter()) {
                sg += dy * xv;
                sb += dy;
                let dxh = g * dy;
                s1 += dxh;
                s2 += dxh * xv;
            }
            grad_gamma[ch] += sg;
            grad_beta[ch] += sb;
            d_mean[k] = -inv * s1;
            d_var[k] = -0.5 * inv * inv * s2;
        }
    }

    // Chain into the component statistics.
    let mut d_mean_bn = vec![0.0; c];
    let mut d_var_bn = vec![0.0; c];
    let mut d_mean_ln = vec![0.0; n];
    let mut d_var_ln = vec![0.0; n];
    let mut grad_weights = [0.0; 3];
    for b in 0..n {
        for ch in 0..c {
            let k = b * c + ch;
            d_mean_bn[ch] += wb * d_mean[k];
            d_var_bn[ch] += wb * d_var[k];
            d_mean_ln[b] += wl * d_mean[k];
            d_var_ln[b] += wl * d_var[k];
            grad_weights[0] += d_mean[k] * cache.bn.mean[ch] + d_var[k] * cache.bn.var[ch];
            grad_weights[1] += d_mean[k] * cache.inst.mean[k] + d_var[k] * cache.inst.var[k];
            grad_weights[2] += d_mean[k] * cache.layer.mean[b] + d_var[k] * cache.layer.var[b];
        }
    }

    let inv_nhw = 1.0 / (n as f64 * hw);
    let inv_hw = 1.0 / hw;
    let inv_chw = 1.0 / (c as f64 * hw);
    let mut grad_x = Tensor4::zeros(n, c, h, w);
    for b in 0..n {
        for ch in 0..c {
            let k = b * c + ch;
            let g = cache.gamma[ch];
            let inv = cache.inv_std[k];
            let d_mu_in = wi * d_mean[k];
            let d_v_in = wi * d_var[k];
            let mu_bn = cache.bn.mean[ch];
            let mu_in = cache.inst.mean[k];
            let mu_ln = cache.layer.mean[b];
            // Constant (per-plane) and x-linear parts of the statistics paths.
            let const_term = d_mean_bn[ch] * inv_nhw
                + d_mu_in * inv_hw
                + d_mean_ln[b] * inv_chw
                - 2.0
                    * (d_var_bn[ch] * inv_nhw * mu_bn
                        + d_v_in * inv_hw * mu_in
                        + d_var_ln[b] * inv_chw * mu_ln);
            let lin_term =
                2.0 * (d_var_bn[ch] * inv_nhw + d_v_in * inv_hw + d_var_ln[b] * inv_chw);
            let gy = grad_y.plane(b, ch);
            let xin = cache.x.plane(b, ch);
            let gx = grad_x.plane_mut(b, ch);
            for ((o, &dy), &xv) in gx.iter_mut().zip(gy.iter()).zip(xin.iter()) {
                *o = g * dy * inv + const_term + lin_term * xv;
            }
        }
    }

    Ok(NormGrads {
        grad_x,
        grad_gamma,
        grad_beta,
        grad_weights,
    })
}

/// Evaluation-mode forward: the batch component reads frozen running
/// statistics; instance and layer components come from the input itself.
pub fn norm_forward_eval(
    x: &Tensor4,
    weights: StatWeights,
    affine: &AffineParams,
    eps: f64,
    running: &RunningStats,
) -> Result<Tensor4> {
    check!(!x.is_empty(), "empty batch");
    let (n, c, h, w) = x.dims();
    check!(
        affine.gamma.len() == c,
        "affine parameter length {} does not match {} channels",
        affine.gamma.len(),
        c
    );
    let [wb, wi, wl] = weights;
    if wb > 0.0 {
        check!(
            running.count > 0,
            "running statistics were never updated; cannot evaluate with a batch component"
        );
        check!(
            running.mean.len() == c,
            "running statistics hold {} channels, input has {}",
            running.mean.len(),
            c
        );
    }
    let inst = compute_stats(x, StatMode::Instance)?;
    let layer = if wl != 0.0 {
        compute_stats(x, StatMode::Layer)?
    } else {
        ChannelStats {
            mode: StatMode::Layer,
            mean: vec![0.0; n],
            var: vec![0.0; n],
        }
    };
    let mut y = Tensor4::zeros(n, c, h, w);
    for b in 0..n {
        for ch in 0..c {
            let k = b * c + ch;
            let rm = if wb > 0.0 { running.mean[ch] } else { 0.0 };
            let rv = if wb > 0.0 { running.var[ch] } else { 0.0 };
            let m = wb * rm + wi * inst.mean[k] + wl * layer.mean[b];
            let var = wb * rv + wi * inst.var[k] + wl * layer.var[b];
            let inv = 1.0 / libm::sqrt(var + eps);
            let (g, be) = (affine.gamma[ch], affine.beta[ch]);
            let xin = x.plane(b, ch);
            let yo = y.plane_mut(b, ch);
            for (o, &v) in yo.iter_mut().zip(xin.iter()) {
                *o = g * (v - m) * inv + be;
            }
        }
    }
    Ok(y)
}

// ---------------------------------------------------------------------------
// Two-component wrappers (the method's own layer)
// ---------------------------------------------------------------------------

/// Training forward of the per-domain mixed layer. Updates `running` from
/// the batch-mode statistics as a side effect.
pub fn dson_forward_train(
    x: &Tensor4,
    affine: &AffineParams,
    w: &MixtureWeight,
    cfg: &NormConfig,
    running: &mut RunningStats,
) -> Result<(Tensor4, NormCache)> {
    let wb = w.w();
    let (y, cache) = norm_forward_train(x, [wb, 1.0 - wb, 0.0], affine, cfg.epsilon)?;
    running.update(&cache.bn);
    Ok((y, cache))
}

/// Gradients of `dson_forward_train`, including the shared-logit gradient:
/// grad_logit = (dL/dw_bn - dL/dw_in) * w * (1 - w).
pub fn dson_backward(
    cache: &NormCache,
    w: &MixtureWeight,
    grad_y: &Tensor4,
) -> Result<(NormGrads, f64)> {
    let grads = norm_backward(cache, grad_y)?;
    let wb = w.w();
    let dw = grads.grad_weights[0] - grads.grad_weights[1];
    Ok((grads, dw * wb * (1.0 - wb)))
}

/// Evaluation forward: batch component from running stats, instance
/// component from the input instance.
pub fn dson_forward_eval(
    x: &Tensor4,
    affine: &AffineParams,
    w: &MixtureWeight,
    cfg: &NormConfig,
    running: &RunningStats,
) -> Result<Tensor4> {
    let wb = w.w();
    norm_forward_eval(x, [wb, 1.0 - wb, 0.0], affine, cfg.epsilon, running)
}

// ---------------------------------------------------------------------------
// Variant layers
// ---------------------------------------------------------------------------

/// Mixture parameters held once per network and read by every layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum MixtureParams {
    /// No trainable mixture: a fixed weight on the batch component
    /// (1.0 for pure BN-style variants, 0.0 for pure IN).
    Fixed(f64),
    /// One sigmoid logit per domain (the full method).
    PerDomain(Vec<f64>),
    /// One sigmoid logit shared by all domains (domain-agnostic ablation).
    SharedLogit(f64),
    /// Softmax logits over (batch, instance, layer), domain-agnostic.
    SnLogits([f64; 3]),
}

impl MixtureParams {
    /// Effective (batch, instance, layer) weights for one domain.
    pub fn weights_for(&self, domain: usize) -> StatWeights {
        match self {
            MixtureParams::Fixed(wb) => [*wb, 1.0 - *wb, 0.0],
            MixtureParams::PerDomain(logits) => {
                let wb = sigmoid(logits[domain]);
                [wb, 1.0 - wb, 0.0]
            }
            MixtureParams::SharedLogit(logit) => {
                let wb = sigmoid(*logit);
                [wb, 1.0 - wb, 0.0]
            }
            MixtureParams::SnLogits(logits) => {
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e = [
                    libm::exp(logits[0] - m),
                    libm::exp(logits[1] - m),
                    libm::exp(logits[2] - m),
                ];
                let s = e[0] + e[1] + e[2];
                [e[0] / s, e[1] / s, e[2] / s]
            }
        }
    }

    /// Fold a layer's raw statistic-weight gradient into the logit
    /// gradients via the sigmoid/softmax chain rule.
    pub fn accumulate_logit_grads(
        &self,
        domain: usize,
        grad_weights: StatWeights,
        out: &mut MixtureGrads,
    ) {
        match self {
            MixtureParams::Fixed(_) => {}
            MixtureParams::PerDomain(logits) => {
                let wb = sigmoid(logits[domain]);
                let dw = grad_weights[0] - grad_weights[1];
                out.per_domain[domain] += dw * wb * (1.0 - wb);
            }
            MixtureParams::SharedLogit(logit) => {
                let wb = sigmoid(*logit);
                let dw = grad_weights[0] - grad_weights[1];
                out.shared += dw * wb * (1.0 - wb);
            }
            MixtureParams::SnLogits(_) => {
                let ws = self.weights_for(domain);
                for k in 0..3 {
                    for j in 0..3 {
                        let delta = if j == k { 1.0 } else { 0.0 };
                        out.sn[k] += grad_weights[j] * ws[j] * (delta - ws[k]);
                    }
                }
            }
        }
    }

    /// Number of domains whose weights are independently trainable.
    pub fn logit_count(&self) -> usize {
        match self {
            MixtureParams::Fixed(_) => 0,
            MixtureParams::PerDomain(l) => l.len(),
            MixtureParams::SharedLogit(_) => 1,
            MixtureParams::SnLogits(_) => 3,
        }
    }
}

/// Which mixture parameterization a gradient buffer mirrors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixtureKind {
    Fixed,
    PerDomain,
    Shared,
    Sn,
}

/// Gradient buffers matching `MixtureParams`.
#[derive(Debug, Clone)]
pub struct MixtureGrads {
    pub kind: MixtureKind,
    pub per_domain: Vec<f64>,
    pub shared: f64,
    pub sn: [f64; 3],
}

impl MixtureGrads {
    pub fn zeros_like(params: &MixtureParams) -> Self {
        MixtureGrads {
            kind: match params {
                MixtureParams::Fixed(_) => MixtureKind::Fixed,
                MixtureParams::PerDomain(_) => MixtureKind::PerDomain,
                MixtureParams::SharedLogit(_) => MixtureKind::Shared,
                MixtureParams::SnLogits(_) => MixtureKind::Sn,
            },
            per_domain: match params {
                MixtureParams::PerDomain(l) => vec![0.0; l.len()],
                _ => Vec::new(),
            },
            shared: 0.0,
            sn: [0.0; 3],
        }
    }
}

/// One normalization site of the network: per-domain (or shared) affine
/// parameters and running statistics, plus an optional channel split for
/// the half-instance variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormLayer {
    pub channels: usize,
    /// One entry per domain, or a single shared entry.
    pub affine: Vec<AffineParams>,
    pub running: Vec<RunningStats>,
    /// For the channel-split variant: this many leading channels use pure
    /// instance statistics, the rest pure batch statistics. Zero elsewhere.
    pub split_in_channels: usize,
}

/// Cache returned by `NormLayer::forward_train`.
#[derive(Debug, Clone)]
pub enum LayerCache {
    Whole(NormCache),
    Split { inst: NormCache, batch: NormCache },
}

impl NormLayer {
    /// Index into the per-domain parameter vectors for `domain`.
    fn set_index(&self, domain: usize) -> usize {
        if self.affine.len() == 1 {
            0
        } else {
            domain
        }
    }

    pub fn forward_train(
        &mut self,
        x: &Tensor4,
        domain: usize,
        weights: StatWeights,
        cfg: &NormConfig,
        update_running: bool,
    ) -> Result<(Tensor4, LayerCache)> {
        let si = self.set_index(domain);
        if self.split_in_channels > 0 {
            let sc = self.split_in_channels;
            let xa = x.slice_channels(0, sc);
            let xb = x.slice_channels(sc, x.c);
            let aff_a = AffineParams {
                gamma: self.affine[si].gamma[..sc].to_vec(),
                beta: self.affine[si].beta[..sc].to_vec(),
            };
            let aff_b = AffineParams {
                gamma: self.affine[si].gamma[sc..].to_vec(),
                beta: self.affine[si].beta[sc..].to_vec(),
            };
            let (ya, ca) = norm_forward_train(&xa, [0.0, 1.0, 0.0], &aff_a, cfg.epsilon)?;
            let (yb, cb) = norm_forward_train(&xb, [1.0, 0.0, 0.0], &aff_b, cfg.epsilon)?;
            if update_running {
                // Running stats only matter for the batch-normalized half;
                // stored at channel offset `sc`.
                let m = self.running[si].momentum;
                for (ch, (&bm, &bv)) in cb.bn.mean.iter().zip(cb.bn.var.iter()).enumerate() {
                    let r = &mut self.running[si];
                    r.mean[sc + ch] = (1.0 - m) * r.mean[sc + ch] + m * bm;
                    r.var[sc + ch] = (1.0 - m) * r.var[sc + ch] + m * bv;
                }
                self.running[si].count += 1;
            }
            Ok((
                Tensor4::concat_channels(&ya, &yb),
                LayerCache::Split { inst: ca, batch: cb },
            ))
        } else {
            let (y, cache) = norm_forward_train(x, weights, &self.affine[si], cfg.epsilon)?;
            if update_running {
                self.running[si].update(&cache.bn);
            }
            Ok((y, LayerCache::Whole(cache)))
        }
    }

    pub fn backward(
        &self,
        cache: &LayerCache,
        grad_y: &Tensor4,
    ) -> Result<NormGrads> {
        match cache {
            LayerCache::Whole(c) => norm_backward(c, grad_y),
            LayerCache::Split { inst, batch } => {
                let sc = inst.x.c;
                let gya = grad_y.slice_channels(0, sc);
                let gyb = grad_y.slice_channels(sc, grad_y.c);
                let a = norm_backward(inst, &gya)?;
                let b = norm_backward(batch, &gyb)?;
                let mut grad_gamma = a.grad_gamma.clone();
                grad_gamma.extend_from_slice(&b.grad_gamma);
                let mut grad_beta = a.grad_beta.clone();
                grad_beta.extend_from_slice(&b.grad_beta);
                Ok(NormGrads {
                    grad_x: Tensor4::concat_channels(&a.grad_x, &b.grad_x),
                    grad_gamma,
                    grad_beta,
                    grad_weights: [0.0; 3],
                })
            }
        }
    }

    pub fn forward_eval(
        &self,
        x: &Tensor4,
        domain: usize,
        weights: StatWeights,
        cfg: &NormConfig,
    ) -> Result<Tensor4> {
        let si = self.set_index(domain);
        if self.split_in_channels > 0 {
            let sc = self.split_in_channels;
            let xa = x.slice_channels(0, sc);
            let xb = x.slice_channels(sc, x.c);
            let aff_a = AffineParams {
                gamma: self.affine[si].gamma[..sc].to_vec(),
                beta: self.affine[si].beta[..sc].to_vec(),
            };
            let aff_b = AffineParams {
                gamma: self.affine[si].gamma[sc..].to_vec(),
                beta: self.affine[si].beta[sc..].to_vec(),
            };
            // Instance half needs no running stats.
            let dummy = RunningStats::new(sc, self.running[si].momentum);
            let ya = norm_forward_eval(&xa, [0.0, 1.0, 0.0], &aff_a, cfg.epsilon, &dummy)?;
            let r = &self.running[si];
            let sub = RunningStats {
                mean: r.mean[sc..].to_vec(),
                var: r.var[sc..].to_vec(),
                momentum: r.momentum,
                count: r.count,
            };
            let yb = norm_forward_eval(&xb, [1.0, 0.0, 0.0], &aff_b, cfg.epsilon, &sub)?;
            Ok(Tensor4::concat_channels(&ya, &yb))
        } else {
            norm_forward_eval(x, weights, &self.affine[si], cfg.epsilon, &self.running[si])
        }
    }
}

/// Build one normalization site for the given variant.
///
/// `layer_index` distinguishes the first site (which the channel-split
/// variant treats specially) from later ones.
pub fn make_variant_layer(
    cfg: &NormConfig,
    channels: usize,
    domains: usize,
    layer_index: usize,
) -> NormLayer {
    let per_domain_params = matches!(cfg.variant, Variant::Dsbn | Variant::Dson);
    let sets = if per_domain_params { domains } else { 1 };
    let split = if cfg.variant == Variant::IbnSplit && layer_index == 0 {
        channels / 2
    } else {
        0
    };
    NormLayer {
        channels,
        affine: vec![AffineParams::identity(channels); sets],
        running: vec![RunningStats::new(channels, cfg.momentum); sets],
        split_in_channels: split,
    }
}

/// Initial mixture parameters for the given variant. Logits start at zero,
/// i.e. an even split between the statistics.
pub fn make_mixture_params(cfg: &NormConfig, domains: usize) -> MixtureParams {
    match cfg.variant {
        Variant::Bn | Variant::Dsbn | Variant::IbnSplit => MixtureParams::Fixed(1.0),
        Variant::In => MixtureParams::Fixed(0.0),
        Variant::SnShared => MixtureParams::SnLogits([0.0; 3]),
        Variant::Dson => {
            if cfg.domain_specific_weights {
                MixtureParams::PerDomain(vec![0.0; domains])
            } else {
                MixtureParams::SharedLogit(0.0)
            }
        }
    }
}
