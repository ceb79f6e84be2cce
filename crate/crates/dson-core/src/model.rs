//! The multi-branch classifier: a two-block convolutional feature extractor
//! and a single fully connected head, both shared across domains, with
//! domain-specific normalization parameters forming the branches.
//!
//! Architecture: conv3x3(in->16) -> norm -> relu -> avgpool2x2
//!            -> conv3x3(16->32) -> norm -> relu -> avgpool2x2
//!            -> global average pool -> linear(32 -> K).

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::norm::{
    self, compute_stats, LayerCache, MixtureGrads, MixtureKind, MixtureParams, NormConfig,
    NormLayer, StatMode,
};
use crate::tensor::{self, Rng, Tensor4};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelError(pub String);

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "model error: {}", self.0)
    }
}

impl From<tensor::TensorError> for ModelError {
    fn from(e: tensor::TensorError) -> Self {
        ModelError(e.0)
    }
}

impl From<norm::NormError> for ModelError {
    fn from(e: norm::NormError) -> Self {
        ModelError(e.0)
    }
}

pub type Result<T> = core::result::Result<T, ModelError>;

pub const CONV1_CHANNELS: usize = 16;
pub const CONV2_CHANNELS: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvBlock {
    // No bias: both convolutions feed a mean-subtracting normalization, which
    // would make a bias term a dead parameter.
    pub weight: Tensor4, // (c_out, c_in, 3, 3)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    pub weight: Tensor4, // (k, c, 1, 1)
    pub bias: Vec<f64>,
}

/// Shared feature extractor + classifier with per-domain normalization
/// branches. Evaluating branch `s` uses exactly domain `s`'s normalization
/// parameters; convolution and classifier weights are physically shared.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainBranchNet {
    pub input_channels: usize,
    pub classes: usize,
    pub domains: usize,
    pub cfg: NormConfig,
    pub conv1: ConvBlock,
    pub norm1: NormLayer,
    pub conv2: ConvBlock,
    pub norm2: NormLayer,
    pub fc: LinearHead,
    pub mixture: MixtureParams,
    /// When set, running stats are frozen and gamma/beta/logits drop out of
    /// the optimization.
    pub freeze_bn: bool,
}

fn init_conv(c_out: usize, c_in: usize, rng: &mut Rng) -> ConvBlock {
    // Zero-mean uniform scaled by fan-in: bound = 1 / sqrt(c_in * 9).
    let bound = 1.0 / libm::sqrt((c_in * 9) as f64);
    let mut weight = Tensor4::zeros(c_out, c_in, 3, 3);
    rng.fill_uniform(&mut weight, -bound, bound);
    ConvBlock { weight }
}

impl DomainBranchNet {
    pub fn new(
        input_channels: usize,
        classes: usize,
        domains: usize,
        cfg: NormConfig,
        rng: &mut Rng,
    ) -> Self {
        let conv1 = init_conv(CONV1_CHANNELS, input_channels, rng);
        let conv2 = init_conv(CONV2_CHANNELS, CONV1_CHANNELS, rng);
        let bound = 1.0 / libm::sqrt(CONV2_CHANNELS as f64);
        let mut fc_w = Tensor4::zeros(classes, CONV2_CHANNELS, 1, 1);
        rng.fill_uniform(&mut fc_w, -bound, bound);
        DomainBranchNet {
            input_channels,
            classes,
            domains,
            cfg,
            conv1,
            norm1: norm::make_variant_layer(&cfg, CONV1_CHANNELS, domains, 0),
            conv2,
            norm2: norm::make_variant_layer(&cfg, CONV2_CHANNELS, domains, 1),
            fc: LinearHead {
                weight: fc_w,
                bias: vec![0.0; classes],
            },
            mixture: norm::make_mixture_params(&cfg, domains),
            freeze_bn: false,
        }
    }

    fn check_domain(&self, s: usize) -> Result<()> {
        if s >= self.domains {
            return Err(ModelError(format!(
                "unknown domain index {} (network has {} domains)",
                s, self.domains
            )));
        }
        Ok(())
    }

    /// Training-mode forward through branch `s`. Updates domain-`s` running
    /// statistics unless `freeze_bn` is set.
    pub fn forward_train(&mut self, x: &Tensor4, s: usize) -> Result<(Tensor4, ForwardCache)> {
        self.check_domain(s)?;
        if x.c != self.input_channels {
            return Err(ModelError(format!(
                "input has {} channels, network expects {}",
                x.c, self.input_channels
            )));
        }
        let weights = self.mixture.weights_for(s);
        let update = !self.freeze_bn;

        let a1 = tensor::conv2d_forward(x, &self.conv1.weight, &[0.0; CONV1_CHANNELS])?;
        let (n1, c1) = self.norm1.forward_train(&a1, s, weights, &self.cfg, update)?;
        let r1 = tensor::relu_forward(&n1);
        let p1 = tensor::avgpool2x2_forward(&r1)?;
        let a2 = tensor::conv2d_forward(&p1, &self.conv2.weight, &[0.0; CONV2_CHANNELS])?;
        let (n2, c2) = self.norm2.forward_train(&a2, s, weights, &self.cfg, update)?;
        let r2 = tensor::relu_forward(&n2);
        let p2 = tensor::avgpool2x2_forward(&r2)?;
        let g = tensor::global_avg_pool_forward(&p2);
        let logits = tensor::linear_forward(&g, &self.fc.weight, &self.fc.bias)?;
        let cache = ForwardCache {
            domain: s,
            x: x.clone(),
            norm1_in: a1,
            norm1_cache: c1,
            norm1_out: n1,
            pool1_in: r1,
            pool1_out: p1,
            norm2_in: a2,
            norm2_cache: c2,
            norm2_out: n2,
            pool2_in: r2,
            pool2_out: p2,
            gap_out: g,
        };
        Ok((logits, cache))
    }

    /// Evaluation-mode forward through branch `s` (no mutation).
    pub fn forward_eval(&self, x: &Tensor4, s: usize) -> Result<Tensor4> {
        self.check_domain(s)?;
        let weights = self.mixture.weights_for(s);
        let a1 = tensor::conv2d_forward(x, &self.conv1.weight, &[0.0; CONV1_CHANNELS])?;
        let n1 = self.norm1.forward_eval(&a1, s, weights, &self.cfg)?;
        let r1 = tensor::relu_forward(&n1);
        let p1 = tensor::avgpool2x2_forward(&r1)?;
        let a2 = tensor::conv2d_forward(&p1, &self.conv2.weight, &[0.0; CONV2_CHANNELS])?;
        let n2 = self.norm2.forward_eval(&a2, s, weights, &self.cfg)?;
        let r2 = tensor::relu_forward(&n2);
        let p2 = tensor::avgpool2x2_forward(&r2)?;
        let g = tensor::global_avg_pool_forward(&p2);
        Ok(tensor::linear_forward(&g, &self.fc.weight, &self.fc.bias)?)
    }

    /// Backward through branch `cache.domain`; gradients accumulate into
    /// `grads` (shared weights sum across domain batches).
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_logits: &Tensor4,
        grads: &mut NetGrads,
    ) -> Result<()> {
        let s = cache.domain;
        let (g_gap, g_fc_w, g_fc_b) =
            tensor::linear_backward(&cache.gap_out, &self.fc.weight, grad_logits)?;
        add_assign(&mut grads.fc_w.data, &g_fc_w.data);
        add_vec(&mut grads.fc_b, &g_fc_b);

        let g_p2 = tensor::global_avg_pool_backward(cache.pool2_out.dims(), &g_gap)
            .map_err(|e| ModelError(e.0))?;
        let mut g = g_p2;
        let g_r2 = tensor::avgpool2x2_backward(cache.pool2_in.dims(), &g)?;
        g = tensor::relu_backward(&cache.norm2_out, &g_r2)?;
        let n2 = self.norm2.backward(&cache.norm2_cache, &g)?;
        let si2 = if self.norm2.affine.len() == 1 { 0 } else { s };
        add_vec(&mut grads.norm2_gamma[si2], &n2.grad_gamma);
        add_vec(&mut grads.norm2_beta[si2], &n2.grad_beta);
        self.mixture
            .accumulate_logit_grads(s, n2.grad_weights, &mut grads.mixture);
        let (g_p1, g_c2w, _) =
            tensor::conv2d_backward(&cache.pool1_out, &self.conv2.weight, &n2.grad_x)?;
        add_assign(&mut grads.conv2_w.data, &g_c2w.data);

        let g_r1 = tensor::avgpool2x2_backward(cache.pool1_in.dims(), &g_p1)?;
        g = tensor::relu_backward(&cache.norm1_out, &g_r1)?;
        let n1 = self.norm1.backward(&cache.norm1_cache, &g)?;
        let si1 = if self.norm1.affine.len() == 1 { 0 } else { s };
        add_vec(&mut grads.norm1_gamma[si1], &n1.grad_gamma);
        add_vec(&mut grads.norm1_beta[si1], &n1.grad_beta);
        self.mixture
            .accumulate_logit_grads(s, n1.grad_weights, &mut grads.mixture);
        let (_, g_c1w, _) =
            tensor::conv2d_backward(&cache.x, &self.conv1.weight, &n1.grad_x)?;
        add_assign(&mut grads.conv1_w.data, &g_c1w.data);
        Ok(())
    }

    /// Mean cross-entropy of a per-domain batch through branch `s`.
    /// Does not mutate running statistics.
    pub fn domain_loss(&self, x: &Tensor4, labels: &[usize], s: usize) -> Result<f64> {
        // Training-mode statistics without the running-stat side effect.
        let mut probe = self.clone();
        probe.freeze_bn = true;
        let (logits, _) = probe.forward_train(x, s)?;
        Ok(tensor::cross_entropy(&logits, labels)?)
    }

    /// Unweighted sum of per-domain losses, one batch per source domain.
    pub fn total_loss(&self, batches: &[(Tensor4, Vec<usize>)]) -> Result<f64> {
        if batches.len() != self.domains {
            return Err(ModelError(format!(
                "expected one batch per domain ({}), got {}",
                self.domains,
                batches.len()
            )));
        }
        let mut total = 0.0;
        for (s, (x, y)) in batches.iter().enumerate() {
            total += self.domain_loss(x, y, s)?;
        }
        Ok(total)
    }

    /// Training step helper: loss and gradients of one per-domain batch,
    /// accumulating into `grads` and updating running statistics.
    pub fn loss_and_grads(
        &mut self,
        x: &Tensor4,
        labels: &[usize],
        s: usize,
        grads: &mut NetGrads,
    ) -> Result<f64> {
        let (logits, cache) = self.forward_train(x, s)?;
        let loss = tensor::cross_entropy(&logits, labels)?;
        let grad_logits = tensor::cross_entropy_backward(&logits, labels)?;
        self.backward(&cache, &grad_logits, grads)?;
        Ok(loss)
    }

    /// Average the logits of all branches, then softmax.
    pub fn ensemble_predict(&self, x: &Tensor4) -> Result<Prediction> {
        self.predict_over(x, None)
    }

    /// Average the logits of all branches except `held_out`.
    pub fn leave_one_out_predict(&self, x: &Tensor4, held_out: usize) -> Result<Prediction> {
        if self.domains < 2 {
            return Err(ModelError(String::from(
                "leave-one-out prediction needs at least two domains",
            )));
        }
        self.check_domain(held_out)?;
        self.predict_over(x, Some(held_out))
    }

    /// Single-branch prediction.
    pub fn branch_predict(&self, x: &Tensor4, s: usize) -> Result<Prediction> {
        let logits = self.forward_eval(x, s)?;
        let probabilities = tensor::softmax(&logits);
        Ok(Prediction {
            logits,
            probabilities,
        })
    }

    fn predict_over(&self, x: &Tensor4, skip: Option<usize>) -> Result<Prediction> {
        if self.domains == 0 {
            return Err(ModelError(String::from("network has zero branches")));
        }
        let mut mean: Option<Tensor4> = None;
        let mut count = 0.0;
        for s in 0..self.domains {
            if skip == Some(s) {
                continue;
            }
            let logits = self.forward_eval(x, s)?;
            match &mut mean {
                None => mean = Some(logits),
                Some(m) => add_assign(&mut m.data, &logits.data),
            }
            count += 1.0;
        }
        let mut logits = mean.expect("at least one branch");
        for v in logits.data.iter_mut() {
            *v /= count;
        }
        let probabilities = tensor::softmax(&logits);
        Ok(Prediction {
            logits,
            probabilities,
        })
    }

    /// Spatially averaged activations of the first two channels after the
    /// first convolution, normalized with the requested statistics
    /// (gamma = 1, beta = 0). One row per instance.
    pub fn dump_features_2ch(
        &self,
        x: &Tensor4,
        labels: &[usize],
        mode: StatMode,
    ) -> Result<Vec<(f64, f64, usize)>> {
        if CONV1_CHANNELS < 2 {
            return Err(ModelError(String::from("probe layer needs two channels")));
        }
        if labels.len() != x.n {
            return Err(ModelError(String::from("label count != instance count")));
        }
        let a1 = tensor::conv2d_forward(x, &self.conv1.weight, &[0.0; CONV1_CHANNELS])?;
        let stats = compute_stats(&a1, mode)?;
        let (n, c, h, w) = a1.dims();
        let hw = (h * w) as f64;
        let mut rows = Vec::with_capacity(n);
        for b in 0..n {
            let mut feat = [0.0; 2];
            for (slot, ch) in feat.iter_mut().zip(0..2usize) {
                let (m, v) = match mode {
                    StatMode::Batch => (stats.mean[ch], stats.var[ch]),
                    StatMode::Instance => (stats.mean[b * c + ch], stats.var[b * c + ch]),
                    StatMode::Layer => (stats.mean[b], stats.var[b]),
                };
                let inv = 1.0 / libm::sqrt(v + self.cfg.epsilon);
                *slot = a1.plane(b, ch).iter().map(|&x| (x - m) * inv).sum::<f64>() / hw;
            }
            rows.push((feat[0], feat[1], labels[b]));
        }
        Ok(rows)
    }

    /// Flat views of every trainable parameter buffer, in a fixed order
    /// shared with `NetGrads::buffers`.
    pub fn param_buffers_mut(&mut self) -> Vec<(ParamKind, &mut [f64])> {
        let mut out: Vec<(ParamKind, &mut [f64])> = Vec::new();
        out.push((ParamKind::Conv, self.conv1.weight.data.as_mut_slice()));
        out.push((ParamKind::Conv, self.conv2.weight.data.as_mut_slice()));
        out.push((ParamKind::Fc, self.fc.weight.data.as_mut_slice()));
        out.push((ParamKind::Fc, self.fc.bias.as_mut_slice()));
        for aff in self.norm1.affine.iter_mut() {
            out.push((ParamKind::Gamma, aff.gamma.as_mut_slice()));
            out.push((ParamKind::Beta, aff.beta.as_mut_slice()));
        }
        for aff in self.norm2.affine.iter_mut() {
            out.push((ParamKind::Gamma, aff.gamma.as_mut_slice()));
            out.push((ParamKind::Beta, aff.beta.as_mut_slice()));
        }
        match &mut self.mixture {
            MixtureParams::Fixed(_) => {}
            MixtureParams::PerDomain(l) => out.push((ParamKind::Logit, l.as_mut_slice())),
            MixtureParams::SharedLogit(l) => {
                out.push((ParamKind::Logit, core::slice::from_mut(l)))
            }
            MixtureParams::SnLogits(l) => out.push((ParamKind::Logit, l.as_mut_slice())),
        }
        out
    }
}

/// Which parameter group a flat buffer belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Conv,
    Fc,
    Gamma,
    Beta,
    Logit,
}

/// Intermediate activations of one training-mode branch forward.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub domain: usize,
    pub x: Tensor4,
    pub norm1_in: Tensor4,
    pub norm1_cache: LayerCache,
    pub norm1_out: Tensor4,
    pub pool1_in: Tensor4,
    pub pool1_out: Tensor4,
    pub norm2_in: Tensor4,
    pub norm2_cache: LayerCache,
    pub norm2_out: Tensor4,
    pub pool2_in: Tensor4,
    pub pool2_out: Tensor4,
    pub gap_out: Tensor4,
}

/// Gradient buffers mirroring `DomainBranchNet`'s parameters.
#[derive(Debug, Clone)]
pub struct NetGrads {
    pub conv1_w: Tensor4,
    pub conv2_w: Tensor4,
    pub fc_w: Tensor4,
    pub fc_b: Vec<f64>,
    pub norm1_gamma: Vec<Vec<f64>>,
    pub norm1_beta: Vec<Vec<f64>>,
    pub norm2_gamma: Vec<Vec<f64>>,
    pub norm2_beta: Vec<Vec<f64>>,
    pub mixture: MixtureGrads,
}

impl NetGrads {
    pub fn zeros_like(net: &DomainBranchNet) -> Self {
        NetGrads {
            conv1_w: Tensor4::zeros(
                net.conv1.weight.n,
                net.conv1.weight.c,
                net.conv1.weight.h,
                net.conv1.weight.w,
            ),
            conv2_w: Tensor4::zeros(
                net.conv2.weight.n,
                net.conv2.weight.c,
                net.conv2.weight.h,
                net.conv2.weight.w,
            ),
            fc_w: Tensor4::zeros(net.fc.weight.n, net.fc.weight.c, 1, 1),
            fc_b: vec![0.0; net.fc.bias.len()],
            norm1_gamma: net.norm1.affine.iter().map(|a| vec![0.0; a.gamma.len()]).collect(),
            norm1_beta: net.norm1.affine.iter().map(|a| vec![0.0; a.beta.len()]).collect(),
            norm2_gamma: net.norm2.affine.iter().map(|a| vec![0.0; a.gamma.len()]).collect(),
            norm2_beta: net.norm2.affine.iter().map(|a| vec![0.0; a.beta.len()]).collect(),
            mixture: MixtureGrads::zeros_like(&net.mixture),
        }
    }

    /// Flat views matching `DomainBranchNet::param_buffers_mut` order.
    pub fn buffers(&self) -> Vec<(ParamKind, &[f64])> {
        let mut out: Vec<(ParamKind, &[f64])> = Vec::new();
        out.push((ParamKind::Conv, self.conv1_w.data.as_slice()));
        out.push((ParamKind::Conv, self.conv2_w.data.as_slice()));
        out.push((ParamKind::Fc, self.fc_w.data.as_slice()));
        out.push((ParamKind::Fc, self.fc_b.as_slice()));
        for (g, b) in self.norm1_gamma.iter().zip(self.norm1_beta.iter()) {
            out.push((ParamKind::Gamma, g.as_slice()));
            out.push((ParamKind::Beta, b.as_slice()));
        }
        for (g, b) in self.norm2_gamma.iter().zip(self.norm2_beta.iter()) {
            out.push((ParamKind::Gamma, g.as_slice()));
            out.push((ParamKind::Beta, b.as_slice()));
        }
        match self.mixture.kind {
            MixtureKind::Fixed => {}
            MixtureKind::PerDomain => {
                out.push((ParamKind::Logit, self.mixture.per_domain.as_slice()))
            }
            MixtureKind::Shared => {
                out.push((ParamKind::Logit, core::slice::from_ref(&self.mixture.shared)))
            }
            MixtureKind::Sn => out.push((ParamKind::Logit, self.mixture.sn.as_slice())),
        }
        out
    }
}

/// Logits and softmax probabilities for one batch.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub logits: Tensor4,        // (n, k, 1, 1)
    pub probabilities: Tensor4, // (n, k, 1, 1)
}

impl Prediction {
    /// Argmax class per instance.
    pub fn classes(&self) -> Vec<usize> {
        let (n, k, _, _) = self.logits.dims();
        (0..n)
            .map(|b| {
                let row = &self.logits.data[b * k..(b + 1) * k];
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src.iter()) {
        *d += s;
    }
}

fn add_vec(dst: &mut Vec<f64>, src: &[f64]) {
    add_assign(dst.as_mut_slice(), src);
}
