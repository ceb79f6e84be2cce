//! SGD with momentum, the inverse-decay learning-rate schedule, label-noise
//! injection, the multi-domain training loop, and evaluation metrics.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::model::{DomainBranchNet, ModelError, NetGrads, ParamKind};
use crate::synth::DomainDataset;
use crate::tensor::{Rng, Tensor4};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainError(pub String);

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "training error: {}", self.0)
    }
}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        TrainError(e.0)
    }
}

pub type Result<T> = core::result::Result<T, TrainError>;

// ---------------------------------------------------------------------------
// Learning-rate schedule
// ---------------------------------------------------------------------------

/// Inverse-decay annealing: eta(p) = eta0 / (1 + alpha p)^decay_beta with
/// p = t / T rising linearly over training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub eta0: f64,
    pub alpha: f64,
    pub decay_beta: f64,
    pub total_iters: u64,
}

impl LrSchedule {
    pub fn desk_default(total_iters: u64) -> Self {
        LrSchedule {
            eta0: 0.02,
            alpha: 10.0,
            decay_beta: 0.75,
            total_iters,
        }
    }
}

pub fn lr_at(schedule: &LrSchedule, t: u64) -> Result<f64> {
    if schedule.total_iters == 0 {
        return Err(TrainError(String::from("schedule has zero total iterations")));
    }
    let p = t as f64 / schedule.total_iters as f64;
    Ok(schedule.eta0 / libm::pow(1.0 + schedule.alpha * p, schedule.decay_beta))
}

// ---------------------------------------------------------------------------
// SGD with classic momentum
// ---------------------------------------------------------------------------

/// Velocity buffers, one per parameter buffer, in the network's fixed
/// buffer order.
#[derive(Debug, Clone)]
pub struct SgdState {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn new(momentum: f64, weight_decay: f64, net: &mut DomainBranchNet) -> Self {
        let velocity = net
            .param_buffers_mut()
            .iter()
            .map(|(_, b)| vec![0.0; b.len()])
            .collect();
        SgdState {
            momentum,
            weight_decay,
            velocity,
        }
    }
}

/// v <- m v + g; theta <- theta - eta v. Buffers whose kind `skip` selects
/// are left untouched (used to freeze affine parameters).
pub fn sgd_step<F: Fn(ParamKind) -> bool>(
    params: &mut [(ParamKind, &mut [f64])],
    grads: &[(ParamKind, &[f64])],
    state: &mut SgdState,
    rate: f64,
    skip: F,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(TrainError(format!(
            "buffer count mismatch: {} params, {} grads, {} velocities",
            params.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    for (((kind, theta), (gkind, g)), v) in params
        .iter_mut()
        .zip(grads.iter())
        .zip(state.velocity.iter_mut())
    {
        if kind != gkind || theta.len() != g.len() {
            return Err(TrainError(String::from("parameter/gradient shape mismatch")));
        }
        if skip(*kind) {
            continue;
        }
        let decay = if matches!(kind, ParamKind::Conv | ParamKind::Fc) {
            state.weight_decay
        } else {
            0.0
        };
        for ((t, &gi), vi) in theta.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
            let g_eff = gi + decay * *t;
            *vi = state.momentum * *vi + g_eff;
            *t -= rate * *vi;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Label noise
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub level: f64,
    pub seed: u64,
}

/// With probability `level`, replace each label by a uniform draw from the
/// other K-1 classes. Applied once to training labels; deterministic given
/// the seed.
pub fn inject_label_noise(labels: &[usize], cfg: &NoiseConfig, k: usize) -> Result<Vec<usize>> {
    if cfg.level > 0.0 && k < 2 {
        return Err(TrainError(String::from(
            "label noise needs at least two classes",
        )));
    }
    let mut rng = Rng::new(cfg.seed).derive(0x6e6f697365); // "noise"
    let mut out = Vec::with_capacity(labels.len());
    for &y in labels {
        if cfg.level > 0.0 && rng.uniform() < cfg.level {
            let mut r = rng.below(k - 1);
            if r >= y {
                r += 1;
            }
            out.push(r);
        } else {
            out.push(y);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iters: u64,
    pub batch_per_domain: usize,
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub noise: NoiseConfig,
    pub seed: u64,
    pub log_every: u64,
    pub val_every: u64,
}

impl TrainConfig {
    pub fn desk_default(seed: u64) -> Self {
        TrainConfig {
            iters: 1000,
            batch_per_domain: 16,
            schedule: LrSchedule::desk_default(1000),
            momentum: 0.9,
            weight_decay: 0.0,
            noise: NoiseConfig { level: 0.0, seed },
            seed,
            log_every: 10,
            val_every: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: u64,
    pub eta: f64,
    pub loss_total: f64,
    pub loss_per_domain: Vec<f64>,
    pub w_per_domain: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValRecord {
    pub iter: u64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub iter_log: Vec<IterRecord>,
    pub val_log: Vec<ValRecord>,
    pub best_val_iter: u64,
    pub best_val_accuracy: f64,
    /// Batch-component mixture weight per domain at the selected checkpoint.
    pub final_w_per_domain: Vec<f64>,
    pub target_ensemble_accuracy: Option<f64>,
    pub target_branch_accuracy: Vec<f64>,
}

pub struct TrainOutcome {
    pub report: TrainReport,
    /// Parameters at the best leave-one-domain-out validation point.
    pub best_net: DomainBranchNet,
}

/// Per-domain shuffled batch sampler; wraps around with a reshuffle.
struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: Rng,
}

impl BatchSampler {
    fn new(n: usize, rng: Rng) -> Self {
        let mut s = BatchSampler {
            order: (0..n).collect(),
            cursor: 0,
            rng,
        };
        s.rng.shuffle(&mut s.order);
        s
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        for _ in 0..size {
            if self.cursor == self.order.len() {
                self.rng.shuffle(&mut self.order);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

fn gather(ds: &DomainDataset, idx: &[usize]) -> (Tensor4, Vec<usize>) {
    let (_, c, h, w) = ds.images.dims();
    let mut x = Tensor4::zeros(idx.len(), c, h, w);
    let mut y = Vec::with_capacity(idx.len());
    for (bi, &i) in idx.iter().enumerate() {
        for ch in 0..c {
            x.plane_mut(bi, ch).copy_from_slice(ds.images.plane(i, ch));
        }
        y.push(ds.labels[i]);
    }
    (x, y)
}

/// Prediction rule for `evaluate`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalRule {
    Ensemble,
    LeaveOneOut(usize),
    SingleBranch(usize),
}

/// Top-1 accuracy of `net` on a dataset under the chosen rule.
pub fn evaluate(net: &DomainBranchNet, ds: &DomainDataset, rule: EvalRule) -> Result<f64> {
    if ds.labels.is_empty() {
        return Err(TrainError(String::from("cannot evaluate on an empty dataset")));
    }
    // Chunked to bound intermediate allocation.
    let chunk = 64;
    let n = ds.labels.len();
    let mut correct = 0usize;
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let (x, y) = gather(ds, &idx);
        let pred = match rule {
            EvalRule::Ensemble => net.ensemble_predict(&x)?,
            EvalRule::LeaveOneOut(s) => net.leave_one_out_predict(&x, s)?,
            EvalRule::SingleBranch(s) => net.branch_predict(&x, s)?,
        };
        for (p, t) in pred.classes().iter().zip(y.iter()) {
            if p == t {
                correct += 1;
            }
        }
        start = end;
    }
    Ok(correct as f64 / n as f64)
}

/// Mean leave-one-domain-out validation accuracy over the source domains:
/// domain s's validation data is scored by the average of all branches
/// except s. With a single source, its own branch is used.
pub fn loo_validation_accuracy(
    net: &DomainBranchNet,
    val_sets: &[DomainDataset],
) -> Result<f64> {
    let mut acc = 0.0;
    for (s, ds) in val_sets.iter().enumerate() {
        let rule = if net.domains >= 2 {
            EvalRule::LeaveOneOut(s)
        } else {
            EvalRule::SingleBranch(s)
        };
        acc += evaluate(net, ds, rule)?;
    }
    Ok(acc / val_sets.len() as f64)
}

/// Put the network in (or out of) frozen-BN mode: running statistics stop
/// updating and gamma/beta drop out of the optimization.
pub fn freeze_bn_mode(net: &mut DomainBranchNet, frozen: bool) {
    net.freeze_bn = frozen;
}

/// The multi-domain training loop. Each iteration draws one batch per
/// source domain, accumulates the gradients of the summed loss, and takes a
/// single SGD step on all trainable parameters. The best checkpoint by
/// leave-one-domain-out validation is kept and used for the final target
/// evaluation.
pub fn train(
    net: &mut DomainBranchNet,
    train_sets: &[DomainDataset],
    val_sets: &[DomainDataset],
    target_test: Option<&DomainDataset>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if train_sets.is_empty() {
        return Err(TrainError(String::from("no source domains")));
    }
    if train_sets.len() != net.domains {
        return Err(TrainError(format!(
            "network has {} branches but {} training sets were given",
            net.domains,
            train_sets.len()
        )));
    }
    for ds in train_sets {
        if ds.labels.is_empty() {
            return Err(TrainError(String::from("empty training dataset")));
        }
    }

    // Label noise is applied once, up front, to training labels only.
    let noisy: Vec<DomainDataset> = train_sets
        .iter()
        .enumerate()
        .map(|(s, ds)| {
            let noise = NoiseConfig {
                level: cfg.noise.level,
                seed: cfg.noise.seed ^ (s as u64).wrapping_mul(0x9E3779B97F4A7C15),
            };
            let labels = inject_label_noise(&ds.labels, &noise, net.classes)?;
            Ok(DomainDataset {
                labels,
                ..ds.clone()
            })
        })
        .collect::<Result<_>>()?;

    let root = Rng::new(cfg.seed);
    let mut samplers: Vec<BatchSampler> = noisy
        .iter()
        .enumerate()
        .map(|(s, ds)| BatchSampler::new(ds.labels.len(), root.derive(1000 + s as u64)))
        .collect();

    let mut sgd = SgdState::new(cfg.momentum, cfg.weight_decay, net);
    let mut report = TrainReport {
        iter_log: Vec::new(),
        val_log: Vec::new(),
        best_val_iter: 0,
        best_val_accuracy: f64::NEG_INFINITY,
        final_w_per_domain: Vec::new(),
        target_ensemble_accuracy: None,
        target_branch_accuracy: Vec::new(),
    };
    let mut best_net = net.clone();
    let mut have_val = false;

    for t in 0..cfg.iters {
        let eta = lr_at(&cfg.schedule, t)?;
        let mut grads = NetGrads::zeros_like(net);
        let mut losses = Vec::with_capacity(noisy.len());
        for (s, ds) in noisy.iter().enumerate() {
            let idx = samplers[s].next_batch(cfg.batch_per_domain);
            let (x, y) = gather(ds, &idx);
            losses.push(net.loss_and_grads(&x, &y, s, &mut grads)?);
        }

        {
            let frozen = net.freeze_bn;
            let gbufs = grads.buffers();
            let mut pbufs = net.param_buffers_mut();
            sgd_step(&mut pbufs, &gbufs, &mut sgd, eta, |k| {
                frozen && matches!(k, ParamKind::Gamma | ParamKind::Beta)
            })?;
        }

        if cfg.log_every > 0 && (t + 1) % cfg.log_every == 0 {
            let loss_total = losses.iter().sum();
            let w: Vec<f64> = (0..net.domains)
                .map(|s| net.mixture.weights_for(s)[0])
                .collect();
            report.iter_log.push(IterRecord {
                iter: t + 1,
                eta,
                loss_total,
                loss_per_domain: losses.clone(),
                w_per_domain: w,
            });
        }
        if cfg.val_every > 0 && (t + 1) % cfg.val_every == 0 && !val_sets.is_empty() {
            let acc = loo_validation_accuracy(net, val_sets)?;
            report.val_log.push(ValRecord {
                iter: t + 1,
                accuracy: acc,
            });
            if acc > report.best_val_accuracy {
                report.best_val_accuracy = acc;
                report.best_val_iter = t + 1;
                best_net = net.clone();
            }
            have_val = true;
        }
    }
    if !have_val {
        best_net = net.clone();
        report.best_val_accuracy = f64::NAN;
    }

    report.final_w_per_domain = (0..best_net.domains)
        .map(|s| best_net.mixture.weights_for(s)[0])
        .collect();
    if let Some(test) = target_test {
        report.target_ensemble_accuracy = Some(evaluate(&best_net, test, EvalRule::Ensemble)?);
        report.target_branch_accuracy = (0..best_net.domains)
            .map(|s| evaluate(&best_net, test, EvalRule::SingleBranch(s)))
            .collect::<Result<_>>()?;
    }

    Ok(TrainOutcome {
        report,
        best_net,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::norm::{NormConfig, Variant};
    use crate::synth::Split;

    fn make_net(variant: Variant, domains: usize, seed: u64) -> DomainBranchNet {
        let mut rng = Rng::new(seed);
        DomainBranchNet::new(2, 3, domains, NormConfig::new(variant), &mut rng)
    }

    fn toy_dataset(seed: u64, n: usize, classes: usize, domain_id: usize) -> DomainDataset {
        let mut rng = Rng::new(seed);
        let mut images = Tensor4::zeros(n, 2, 4, 4);
        let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        for (i, &y) in labels.iter().enumerate() {
            for ch in 0..2 {
                for v in images.plane_mut(i, ch).iter_mut() {
                    // Class-dependent offset plus noise: linearly separable.
                    *v = y as f64 - 1.0 + 0.1 * rng.normal();
                }
            }
        }
        DomainDataset {
            images,
            labels,
            domain_id,
            split: Split::Train,
        }
    }

    #[test]
    fn schedule_endpoints() {
        let sched = LrSchedule::desk_default(1000);
        assert_eq!(lr_at(&sched, 0).unwrap(), 0.02);
        let end = lr_at(&sched, 1000).unwrap();
        assert!((end - 0.0033112005215234037).abs() < 1e-12 * end);
    }

    #[test]
    fn schedule_is_strictly_decreasing() {
        let sched = LrSchedule::desk_default(50);
        let mut prev = f64::INFINITY;
        for t in 0..=50 {
            let eta = lr_at(&sched, t).unwrap();
            assert!(eta < prev);
            prev = eta;
        }
    }

    #[test]
    fn schedule_degenerate_cases() {
        let mut sched = LrSchedule::desk_default(100);
        sched.alpha = 0.0;
        assert_eq!(lr_at(&sched, 37).unwrap(), 0.02);
        sched.total_iters = 0;
        assert!(lr_at(&sched, 0).is_err());
    }

    fn run_sgd(
        theta: &mut [f64],
        grad: &[f64],
        state: &mut SgdState,
        rate: f64,
    ) {
        let mut params = [(ParamKind::Conv, theta)];
        let grads = [(ParamKind::Conv, grad)];
        sgd_step(&mut params, &grads, state, rate, |_| false).unwrap();
    }

    fn plain_state(momentum: f64, len: usize) -> SgdState {
        SgdState {
            momentum,
            weight_decay: 0.0,
            velocity: vec![vec![0.0; len]],
        }
    }

    #[test]
    fn sgd_zero_gradient_is_identity() {
        let mut theta = vec![1.0, -2.0, 3.0];
        let mut state = plain_state(0.9, 3);
        run_sgd(&mut theta, &[0.0; 3], &mut state, 0.1);
        assert_eq!(theta, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn sgd_without_momentum_is_plain_descent() {
        let mut theta = vec![1.0, 2.0];
        let mut state = plain_state(0.0, 2);
        run_sgd(&mut theta, &[0.5, -0.25], &mut state, 0.1);
        assert_eq!(theta, vec![1.0 - 0.05, 2.0 + 0.025]);
    }

    #[test]
    fn sgd_two_steps_constant_gradient() {
        // v1 = g, v2 = 0.9 g + g; total displacement 2.9 g at eta = 1.
        let mut theta = vec![0.0];
        let mut state = plain_state(0.9, 1);
        run_sgd(&mut theta, &[1.0], &mut state, 1.0);
        run_sgd(&mut theta, &[1.0], &mut state, 1.0);
        assert!((theta[0] + 2.9).abs() < 1e-15);
    }

    #[test]
    fn sgd_skips_selected_kinds() {
        let mut gamma = vec![1.0];
        let mut params = [(ParamKind::Gamma, gamma.as_mut_slice())];
        let grads = [(ParamKind::Gamma, [5.0].as_slice())];
        let mut state = plain_state(0.0, 1);
        sgd_step(&mut params, &grads, &mut state, 0.1, |k| k == ParamKind::Gamma).unwrap();
        assert_eq!(gamma, vec![1.0]);
    }

    #[test]
    fn sgd_rejects_mismatched_buffers() {
        let mut theta = vec![0.0];
        let mut params = [(ParamKind::Conv, theta.as_mut_slice())];
        let grads = [(ParamKind::Fc, [1.0].as_slice())];
        let mut state = plain_state(0.0, 1);
        assert!(sgd_step(&mut params, &grads, &mut state, 0.1, |_| false).is_err());
    }

    #[test]
    fn weight_decay_only_touches_conv_and_fc() {
        let mut conv = vec![1.0];
        let mut gamma = vec![1.0];
        let mut params = [
            (ParamKind::Conv, conv.as_mut_slice()),
            (ParamKind::Gamma, gamma.as_mut_slice()),
        ];
        let grads = [
            (ParamKind::Conv, [0.0].as_slice()),
            (ParamKind::Gamma, [0.0].as_slice()),
        ];
        let mut state = SgdState {
            momentum: 0.0,
            weight_decay: 0.1,
            velocity: vec![vec![0.0], vec![0.0]],
        };
        sgd_step(&mut params, &grads, &mut state, 1.0, |_| false).unwrap();
        assert!((conv[0] - 0.9).abs() < 1e-15);
        assert_eq!(gamma, vec![1.0]);
    }

    #[test]
    fn label_noise_levels() {
        let labels: Vec<usize> = (0..10000).map(|i| i % 5).collect();
        let clean = inject_label_noise(&labels, &NoiseConfig { level: 0.0, seed: 1 }, 5).unwrap();
        assert_eq!(clean, labels);
        let flipped = inject_label_noise(&labels, &NoiseConfig { level: 1.0, seed: 1 }, 5).unwrap();
        assert!(flipped.iter().zip(labels.iter()).all(|(a, b)| a != b));
        assert!(flipped.iter().all(|&y| y < 5));
        let partial =
            inject_label_noise(&labels, &NoiseConfig { level: 0.2, seed: 1 }, 5).unwrap();
        let frac = partial
            .iter()
            .zip(labels.iter())
            .filter(|(a, b)| a != b)
            .count() as f64
            / labels.len() as f64;
        // 3-sigma binomial band around 0.2.
        assert!((frac - 0.2).abs() < 0.012, "flip fraction {}", frac);
    }

    #[test]
    fn label_noise_is_deterministic_and_validated() {
        let labels = vec![0, 1, 0, 1];
        let cfg = NoiseConfig { level: 0.5, seed: 9 };
        assert_eq!(
            inject_label_noise(&labels, &cfg, 2).unwrap(),
            inject_label_noise(&labels, &cfg, 2).unwrap()
        );
        assert!(inject_label_noise(&labels, &NoiseConfig { level: 0.5, seed: 9 }, 1).is_err());
        assert!(inject_label_noise(&labels, &NoiseConfig { level: 0.0, seed: 9 }, 1).is_ok());
    }

    #[test]
    fn gradient_accumulation_matches_per_domain_sum() {
        let base = make_net(Variant::Dson, 2, 21);
        let d0 = toy_dataset(1, 6, 3, 0);
        let d1 = toy_dataset(2, 6, 3, 1);
        let b0 = gather(&d0, &[0, 1, 2]);
        let b1 = gather(&d1, &[0, 1, 2]);

        let mut joint = base.clone();
        let mut acc = NetGrads::zeros_like(&joint);
        joint.loss_and_grads(&b0.0, &b0.1, 0, &mut acc).unwrap();
        joint.loss_and_grads(&b1.0, &b1.1, 1, &mut acc).unwrap();

        let mut solo = base.clone();
        let mut g0 = NetGrads::zeros_like(&solo);
        solo.loss_and_grads(&b0.0, &b0.1, 0, &mut g0).unwrap();
        let mut solo = base.clone();
        let mut g1 = NetGrads::zeros_like(&solo);
        solo.loss_and_grads(&b1.0, &b1.1, 1, &mut g1).unwrap();

        for ((_, a), ((_, x), (_, y))) in acc
            .buffers()
            .iter()
            .zip(g0.buffers().iter().zip(g1.buffers().iter()))
        {
            for (ai, (xi, yi)) in a.iter().zip(x.iter().zip(y.iter())) {
                assert!((ai - (xi + yi)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shared_weights_alias_across_branches() {
        let mut net = make_net(Variant::Dson, 2, 23);
        let d0 = toy_dataset(3, 6, 3, 0);
        let b0 = gather(&d0, &[0, 1, 2]);
        // Warm up branch 1's running stats, then snapshot its branch-local
        // parameters.
        net.forward_train(&b0.0, 1).unwrap();
        let norm_before = (net.norm1.affine[1].clone(), net.norm2.affine[1].clone());
        let out_before = net.forward_eval(&b0.0, 1).unwrap();

        // One SGD step driven only by domain 0's batch.
        let mut grads = NetGrads::zeros_like(&net);
        net.loss_and_grads(&b0.0, &b0.1, 0, &mut grads).unwrap();
        let mut sgd = SgdState::new(0.9, 0.0, &mut net);
        {
            let gbufs = grads.buffers();
            let mut pbufs = net.param_buffers_mut();
            sgd_step(&mut pbufs, &gbufs, &mut sgd, 0.05, |_| false).unwrap();
        }

        let out_after = net.forward_eval(&b0.0, 1).unwrap();
        assert_ne!(out_before.data, out_after.data);
        assert_eq!(net.norm1.affine[1], norm_before.0);
        assert_eq!(net.norm2.affine[1], norm_before.1);
    }

    #[test]
    fn evaluate_requires_data_and_scores_chance_for_random_nets() {
        let net = make_net(Variant::In, 1, 25);
        let empty = DomainDataset {
            images: Tensor4::zeros(0, 2, 4, 4),
            labels: Vec::new(),
            domain_id: 0,
            split: Split::Test,
        };
        assert!(evaluate(&net, &empty, EvalRule::SingleBranch(0)).is_err());

        // Labels independent of the images: a fresh net scores ~1/3.
        let mut rng = Rng::new(26);
        let n = 1500;
        let mut images = Tensor4::zeros(n, 2, 4, 4);
        rng.fill_uniform(&mut images, -1.0, 1.0);
        let mut labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        rng.shuffle(&mut labels);
        let ds = DomainDataset {
            images,
            labels,
            domain_id: 0,
            split: Split::Test,
        };
        let acc = evaluate(&net, &ds, EvalRule::SingleBranch(0)).unwrap();
        // 3-sigma band around 1/3 for n = 1500.
        assert!((acc - 1.0 / 3.0).abs() < 0.037, "accuracy {}", acc);
    }

    fn quick_cfg(seed: u64, iters: u64) -> TrainConfig {
        TrainConfig {
            iters,
            batch_per_domain: 4,
            schedule: LrSchedule {
                eta0: 0.01,
                alpha: 0.0,
                decay_beta: 0.75,
                total_iters: iters.max(1),
            },
            momentum: 0.0,
            weight_decay: 0.0,
            noise: NoiseConfig { level: 0.0, seed },
            seed,
            log_every: 1,
            val_every: 0,
        }
    }

    #[test]
    fn zero_iterations_change_nothing() {
        let mut net = make_net(Variant::Dson, 1, 27);
        let before = net.clone();
        let ds = toy_dataset(4, 6, 3, 0);
        let out = train(&mut net, &[ds], &[], None, &quick_cfg(0, 0)).unwrap();
        assert_eq!(net, before);
        assert!(out.report.iter_log.is_empty());
        assert!(out.report.val_log.is_empty());
    }

    #[test]
    fn training_descends_on_a_separable_toy() {
        let mut net = make_net(Variant::Dson, 1, 29);
        let ds = toy_dataset(5, 8, 3, 0);
        let mut cfg = quick_cfg(0, 10);
        cfg.batch_per_domain = 8; // full batch: the logged loss is comparable
        let out = train(&mut net, &[ds], &[], None, &cfg).unwrap();
        let losses: Vec<f64> = out.report.iter_log.iter().map(|r| r.loss_total).collect();
        assert_eq!(losses.len(), 10);
        for pair in losses.windows(2) {
            assert!(pair[1] < pair[0], "losses not decreasing: {:?}", losses);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let run = |seed: u64| {
            let mut net = make_net(Variant::Dson, 2, 31);
            let sets = [toy_dataset(6, 12, 3, 0), toy_dataset(7, 12, 3, 1)];
            let vals = [toy_dataset(8, 6, 3, 0), toy_dataset(9, 6, 3, 1)];
            let mut cfg = quick_cfg(seed, 12);
            cfg.val_every = 4;
            let out = train(&mut net, &sets, &vals, None, &cfg).unwrap();
            (out.report, net)
        };
        let (r1, n1) = run(5);
        let (r2, n2) = run(5);
        assert_eq!(r1, r2);
        assert_eq!(n1, n2);
        let (r3, _) = run(6);
        assert_ne!(r1, r3);
    }

    #[test]
    fn frozen_bn_keeps_stats_and_affine() {
        let ds = toy_dataset(10, 8, 3, 0);
        let mut net = make_net(Variant::Bn, 1, 33);
        freeze_bn_mode(&mut net, true);
        let running = net.norm1.running.clone();
        let affine = net.norm1.affine.clone();
        train(&mut net, core::slice::from_ref(&ds), &[], None, &quick_cfg(0, 5)).unwrap();
        assert_eq!(net.norm1.running, running);
        assert_eq!(net.norm1.affine, affine);

        let mut net = make_net(Variant::Bn, 1, 33);
        let running = net.norm1.running.clone();
        let affine = net.norm1.affine.clone();
        train(&mut net, core::slice::from_ref(&ds), &[], None, &quick_cfg(0, 5)).unwrap();
        assert_ne!(net.norm1.running, running);
        assert_ne!(net.norm1.affine, affine);
    }

    #[test]
    fn validation_tracks_the_best_checkpoint() {
        let mut net = make_net(Variant::Dson, 2, 35);
        let sets = [toy_dataset(11, 12, 3, 0), toy_dataset(12, 12, 3, 1)];
        let vals = [toy_dataset(13, 6, 3, 0), toy_dataset(14, 6, 3, 1)];
        let mut cfg = quick_cfg(3, 20);
        cfg.val_every = 5;
        let out = train(&mut net, &sets, &vals, None, &cfg).unwrap();
        assert_eq!(out.report.val_log.len(), 4);
        let best = out
            .report
            .val_log
            .iter()
            .map(|v| v.accuracy)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(out.report.best_val_accuracy, best);
        assert!(out.report.best_val_iter % 5 == 0 && out.report.best_val_iter <= 20);
    }
}
