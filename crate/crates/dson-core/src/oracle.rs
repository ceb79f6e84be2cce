//! Independent brute-force references: literal-loop statistics, six-loop
//! convolution, and finite-difference gradient checks for every layer and
//! for the end-to-end loss. These implementations deliberately share no
//! code with the production paths they verify.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::model::{DomainBranchNet, NetGrads};
use crate::norm::{
    self, AffineParams, ChannelStats, MixedStats, MixtureWeight, NormConfig, StatMode, Variant,
};
use crate::tensor::{self, finite_diff_grad, rel_err, GradPair, Rng, Tensor4};

/// Result of one registered check.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// The full oracle report; every registered check appears exactly once.
#[derive(Debug, Clone)]
pub struct OracleReport {
    pub seed: u64,
    pub checks: Vec<CheckResult>,
}

impl OracleReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

/// Tolerance for algebraic equivalences (same formula, different evaluation
/// order).
pub const TOL_ALGEBRAIC: f64 = 1e-12;
/// Relative tolerance for finite-difference gradient checks at h = 1e-5.
pub const TOL_GRADIENT: f64 = 1e-5;
pub const FD_STEP: f64 = 1e-5;

// ---------------------------------------------------------------------------
// Naive references
// ---------------------------------------------------------------------------

/// Literal transcription of the statistics definitions: explicit nested
/// loops, two-pass mean then variance.
pub fn naive_stats(x: &Tensor4, mode: StatMode) -> ChannelStats {
    let (n, c, h, w) = x.dims();
    match mode {
        StatMode::Batch => {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut sum = 0.0;
                for b in 0..n {
                    for i in 0..h {
                        for j in 0..w {
                            sum += x.at(b, ch, i, j);
                        }
                    }
                }
                mean[ch] = sum / (n * h * w) as f64;
                let mut sq = 0.0;
                for b in 0..n {
                    for i in 0..h {
                        for j in 0..w {
                            let d = x.at(b, ch, i, j) - mean[ch];
                            sq += d * d;
                        }
                    }
                }
                var[ch] = sq / (n * h * w) as f64;
            }
            ChannelStats {
                mode,
                mean,
                var,
            }
        }
        StatMode::Instance => {
            let mut mean = vec![0.0; n * c];
            let mut var = vec![0.0; n * c];
            for b in 0..n {
                for ch in 0..c {
                    let mut sum = 0.0;
                    for i in 0..h {
                        for j in 0..w {
                            sum += x.at(b, ch, i, j);
                        }
                    }
                    mean[b * c + ch] = sum / (h * w) as f64;
                    let mut sq = 0.0;
                    for i in 0..h {
                        for j in 0..w {
                            let d = x.at(b, ch, i, j) - mean[b * c + ch];
                            sq += d * d;
                        }
                    }
                    var[b * c + ch] = sq / (h * w) as f64;
                }
            }
            ChannelStats { mode, mean, var }
        }
        StatMode::Layer => {
            let mut mean = vec![0.0; n];
            let mut var = vec![0.0; n];
            for b in 0..n {
                let mut sum = 0.0;
                for ch in 0..c {
                    for i in 0..h {
                        for j in 0..w {
                            sum += x.at(b, ch, i, j);
                        }
                    }
                }
                mean[b] = sum / (c * h * w) as f64;
                let mut sq = 0.0;
                for ch in 0..c {
                    for i in 0..h {
                        for j in 0..w {
                            let d = x.at(b, ch, i, j) - mean[b];
                            sq += d * d;
                        }
                    }
                }
                var[b] = sq / (c * h * w) as f64;
            }
            ChannelStats { mode, mean, var }
        }
    }
}

/// Elementwise convex combination written out directly.
pub fn naive_mix(bn: &ChannelStats, inst: &ChannelStats, w: f64) -> MixedStats {
    let c = bn.mean.len();
    let n = inst.mean.len() / c;
    let mut mean = vec![0.0; n * c];
    let mut var = vec![0.0; n * c];
    for b in 0..n {
        for ch in 0..c {
            mean[b * c + ch] = w * bn.mean[ch] + (1.0 - w) * inst.mean[b * c + ch];
            var[b * c + ch] = w * bn.var[ch] + (1.0 - w) * inst.var[b * c + ch];
        }
    }
    MixedStats {
        mean,
        var,
        instances: n,
        channels: c,
    }
}

/// Six nested loops over every output position and kernel tap.
pub fn naive_conv2d(x: &Tensor4, weight: &Tensor4, bias: &[f64]) -> Tensor4 {
    let (n, cin, h, w) = x.dims();
    let cout = weight.n;
    let mut y = Tensor4::zeros(n, cout, h, w);
    for b in 0..n {
        for co in 0..cout {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = bias[co];
                    for ci in 0..cin {
                        for di in 0..3i64 {
                            for dj in 0..3i64 {
                                let si = i as i64 + di - 1;
                                let sj = j as i64 + dj - 1;
                                if si < 0 || sj < 0 || si >= h as i64 || sj >= w as i64 {
                                    continue;
                                }
                                acc += x.at(b, ci, si as usize, sj as usize)
                                    * weight.at(co, ci, di as usize, dj as usize);
                            }
                        }
                    }
                    *y.at_mut(b, co, i, j) = acc;
                }
            }
        }
    }
    y
}

fn random_tensor(rng: &mut Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor4 {
    let mut t = Tensor4::zeros(n, c, h, w);
    rng.fill_uniform(&mut t, -2.0, 2.0);
    t
}

fn max_slice_rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| rel_err(x, y))
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Equivalence checks
// ---------------------------------------------------------------------------

fn check_stats(seed: u64, mode: StatMode, iters: usize) -> f64 {
    let mut rng = Rng::new(seed).derive(match mode {
        StatMode::Batch => 11,
        StatMode::Instance => 12,
        StatMode::Layer => 13,
    });
    let mut worst: f64 = 0.0;
    for _ in 0..iters {
        let n = 1 + rng.below(4);
        let c = 1 + rng.below(8);
        let h = 1 + rng.below(8);
        let w = 1 + rng.below(8);
        let x = random_tensor(&mut rng, n, c, h, w);
        let got = norm::compute_stats(&x, mode).unwrap();
        let want = naive_stats(&x, mode);
        worst = worst
            .max(max_slice_rel_err(&got.mean, &want.mean))
            .max(max_slice_rel_err(&got.var, &want.var));
    }
    worst
}

fn check_mix(seed: u64, iters: usize) -> f64 {
    let mut rng = Rng::new(seed).derive(14);
    let mut worst: f64 = 0.0;
    for _ in 0..iters {
        let n = 1 + rng.below(4);
        let c = 1 + rng.below(8);
        let h = 1 + rng.below(6);
        let w = 1 + rng.below(6);
        let x = random_tensor(&mut rng, n, c, h, w);
        let bn = norm::compute_stats(&x, StatMode::Batch).unwrap();
        let inst = norm::compute_stats(&x, StatMode::Instance).unwrap();
        let logit = rng.uniform_in(-4.0, 4.0);
        let mw = MixtureWeight::new(logit);
        let got = norm::mix_stats(&bn, &inst, &mw).unwrap();
        let want = naive_mix(&bn, &inst, mw.w());
        worst = worst
            .max(max_slice_rel_err(&got.mean, &want.mean))
            .max(max_slice_rel_err(&got.var, &want.var));
    }
    worst
}

fn check_conv(seed: u64, iters: usize) -> f64 {
    let mut rng = Rng::new(seed).derive(15);
    let mut worst: f64 = 0.0;
    for _ in 0..iters {
        let n = 1 + rng.below(4);
        let cin = 1 + rng.below(4);
        let cout = 1 + rng.below(4);
        let h = 1 + rng.below(8);
        let w = 1 + rng.below(8);
        let x = random_tensor(&mut rng, n, cin, h, w);
        let weight = random_tensor(&mut rng, cout, cin, 3, 3);
        let bias: Vec<f64> = (0..cout).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let got = tensor::conv2d_forward(&x, &weight, &bias).unwrap();
        let want = naive_conv2d(&x, &weight, &bias);
        worst = worst.max(tensor::max_rel_err(&got, &want));
    }
    worst
}

// ---------------------------------------------------------------------------
// Gradient checks
// ---------------------------------------------------------------------------

/// FD gradient of a scalar function of a flat parameter slice.
fn fd_vec<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut g = vec![0.0; x.len()];
    for k in 0..x.len() {
        let orig = probe[k];
        probe[k] = orig + h;
        let fp = f(&probe);
        probe[k] = orig - h;
        let fm = f(&probe);
        probe[k] = orig;
        g[k] = (fp - fm) / (2.0 * h);
    }
    g
}

fn check_conv_grad(seed: u64) -> f64 {
    let mut rng = Rng::new(seed).derive(20);
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let x = random_tensor(&mut rng, 2, 2, 4, 4);
        let weight = random_tensor(&mut rng, 3, 2, 3, 3);
        let bias: Vec<f64> = (0..3).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let r = random_tensor(&mut rng, 2, 3, 4, 4); // projection coefficients
        // Projection centered on the unperturbed output: mathematically the
        // same gradient, numerically far less FD roundoff.
        let y0 = tensor::conv2d_forward(&x, &weight, &bias).unwrap();
        let loss = |y: &Tensor4| -> f64 {
            y.data
                .iter()
                .zip(y0.data.iter())
                .zip(r.data.iter())
                .map(|((a, b), r)| (a - b) * r)
                .sum()
        };
        let (gx, gw, gb) = tensor::conv2d_backward(&x, &weight, &r).unwrap();
        let fx = finite_diff_grad(
            |xp| loss(&tensor::conv2d_forward(xp, &weight, &bias).unwrap()),
            &x,
            FD_STEP,
        );
        let fw = finite_diff_grad(
            |wp| loss(&tensor::conv2d_forward(&x, wp, &bias).unwrap()),
            &weight,
            FD_STEP,
        );
        let fb = fd_vec(
            |bp| loss(&tensor::conv2d_forward(&x, &weight, bp).unwrap()),
            &bias,
            FD_STEP,
        );
        worst = worst
            .max(tensor::max_rel_err(&gx, &fx))
            .max(tensor::max_rel_err(&gw, &fw))
            .max(max_slice_rel_err(&gb, &fb));
    }
    worst
}

fn check_elementwise_grads(seed: u64) -> f64 {
    let mut rng = Rng::new(seed).derive(21);
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let x = random_tensor(&mut rng, 2, 3, 4, 4);
        let r = random_tensor(&mut rng, 2, 3, 4, 4);
        // relu (shift inputs away from the kink)
        let mut xs = x.clone();
        for v in xs.data.iter_mut() {
            if v.abs() < 0.05 {
                *v += 0.1;
            }
        }
        let y0 = tensor::relu_forward(&xs);
        let loss = move |y: &Tensor4, y0: &Tensor4, r: &Tensor4| -> f64 {
            y.data
                .iter()
                .zip(y0.data.iter())
                .zip(r.data.iter())
                .map(|((a, b), r)| (a - b) * r)
                .sum()
        };
        let g = tensor::relu_backward(&xs, &r).unwrap();
        let f = finite_diff_grad(|xp| loss(&tensor::relu_forward(xp), &y0, &r), &xs, FD_STEP);
        worst = worst.max(tensor::max_rel_err(&g, &f));
        // avgpool
        let rp = random_tensor(&mut rng, 2, 3, 2, 2);
        let p0 = tensor::avgpool2x2_forward(&x).unwrap();
        let g = tensor::avgpool2x2_backward(x.dims(), &rp).unwrap();
        let f = finite_diff_grad(
            |xp| loss(&tensor::avgpool2x2_forward(xp).unwrap(), &p0, &rp),
            &x,
            FD_STEP,
        );
        worst = worst.max(tensor::max_rel_err(&g, &f));
        // global average pool
        let rg = random_tensor(&mut rng, 2, 3, 1, 1);
        let g0 = tensor::global_avg_pool_forward(&x);
        let g = tensor::global_avg_pool_backward(x.dims(), &rg).unwrap();
        let f = finite_diff_grad(
            |xp| loss(&tensor::global_avg_pool_forward(xp), &g0, &rg),
            &x,
            FD_STEP,
        );
        worst = worst.max(tensor::max_rel_err(&g, &f));
    }
    worst
}

fn check_linear_xent_grads(seed: u64) -> f64 {
    let mut rng = Rng::new(seed).derive(22);
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        // Keep logits modest so no class probability underflows past what a
        // central difference at this step size can resolve.
        let mut x = random_tensor(&mut rng, 3, 4, 1, 1);
        let mut weight = random_tensor(&mut rng, 5, 4, 1, 1);
        for v in x.data.iter_mut().chain(weight.data.iter_mut()) {
            *v *= 0.35;
        }
        let bias: Vec<f64> = (0..5).map(|_| rng.uniform_in(-0.5, 0.5)).collect();
        let labels: Vec<usize> = (0..3).map(|_| rng.below(5)).collect();
        let loss = |z: &Tensor4| tensor::cross_entropy(z, &labels).unwrap();

        let logits = tensor::linear_forward(&x, &weight, &bias).unwrap();
        let gz = tensor::cross_entropy_backward(&logits, &labels).unwrap();
        let fz = finite_diff_grad(|zp| loss(zp), &logits, FD_STEP);
        worst = worst.max(tensor::max_rel_err(&gz, &fz));

        let (gx, gw, gb) = tensor::linear_backward(&x, &weight, &gz).unwrap();
        let fx = finite_diff_grad(
            |xp| loss(&tensor::linear_forward(xp, &weight, &bias).unwrap()),
            &x,
            FD_STEP,
        );
        let fw = finite_diff_grad(
            |wp| loss(&tensor::linear_forward(&x, wp, &bias).unwrap()),
            &weight,
            FD_STEP,
        );
        let fb = fd_vec(
            |bp| loss(&tensor::linear_forward(&x, &weight, bp).unwrap()),
            &bias,
            FD_STEP,
        );
        worst = worst
            .max(tensor::max_rel_err(&gx, &fx))
            .max(tensor::max_rel_err(&gw, &fw))
            .max(max_slice_rel_err(&gb, &fb));
    }
    worst
}

/// Gradient check of the mixed-statistics normalization, spanning the
/// extreme and middle mixture weights and a layer-statistics component.
fn check_norm_grads(seed: u64) -> f64 {
    let mut rng = Rng::new(seed).derive(23);
    let mut worst: f64 = 0.0;
    let weight_sets: [[f64; 3]; 5] = [
        [0.01, 0.99, 0.0],
        [0.5, 0.5, 0.0],
        [0.99, 0.01, 0.0],
        [0.3, 0.3, 0.4],
        [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
    ];
    for ws in weight_sets {
        let x = random_tensor(&mut rng, 2, 3, 4, 4);
        let mut affine = AffineParams::identity(3);
        for g in affine.gamma.iter_mut() {
            *g = rng.uniform_in(0.5, 1.5);
        }
        for b in affine.beta.iter_mut() {
            *b = rng.uniform_in(-0.5, 0.5);
        }
        let eps = 1e-5;
        let r = random_tensor(&mut rng, 2, 3, 4, 4);
        let (y0, cache) = norm::norm_forward_train(&x, ws, &affine, eps).unwrap();
        let loss_of = |xp: &Tensor4, wsp: [f64; 3], aff: &AffineParams| -> f64 {
            let (y, _) = norm::norm_forward_train(xp, wsp, aff, eps).unwrap();
            y.data
                .iter()
                .zip(y0.data.iter())
                .zip(r.data.iter())
                .map(|((a, b), r)| (a - b) * r)
                .sum()
        };
        let grads = norm::norm_backward(&cache, &r).unwrap();

        let fx = finite_diff_grad(|xp| loss_of(xp, ws, &affine), &x, FD_STEP);
        worst = worst.max(tensor::max_rel_err(&grads.grad_x, &fx));

        let fgamma = fd_vec(
            |gp| {
                let aff = AffineParams {
                    gamma: gp.to_vec(),
                    beta: affine.beta.clone(),
                };
                loss_of(&x, ws, &aff)
            },
            &affine.gamma,
            FD_STEP,
        );
        let fbeta = fd_vec(
            |bp| {
                let aff = AffineParams {
                    gamma: affine.gamma.clone(),
                    beta: bp.to_vec(),
                };
                loss_of(&x, ws, &aff)
            },
            &affine.beta,
            FD_STEP,
        );
        worst = worst
            .max(max_slice_rel_err(&grads.grad_gamma, &fgamma))
            .max(max_slice_rel_err(&grads.grad_beta, &fbeta));

        // Raw statistic-weight gradients, perturbing one component at a time.
        for k in 0..3 {
            let fw = fd_vec(
                |wp| {
                    let mut w2 = ws;
                    w2[k] = wp[0];
                    loss_of(&x, w2, &affine)
                },
                &[ws[k]],
                FD_STEP,
            );
            worst = worst.max(rel_err(grads.grad_weights[k], fw[0]));
        }
    }
    worst
}

/// End-to-end gradient check of the summed multi-domain loss with respect to
/// every parameter buffer, on a 2-domain toy.
pub fn check_full_net(seed: u64, variant: Variant) -> f64 {
    let mut rng = Rng::new(seed).derive(30 + variant as u64);
    let cfg = NormConfig::new(variant);
    let domains = 2;
    let classes = 3;
    let base = DomainBranchNet::new(2, classes, domains, cfg, &mut rng);

    // Finite differences are unreliable when a pre-relu activation sits at
    // the kink; resample batches until all activations are clear of zero.
    let batches: Vec<(Tensor4, Vec<usize>)> = loop {
        let candidate: Vec<(Tensor4, Vec<usize>)> = (0..domains)
            .map(|_| {
                let x = random_tensor(&mut rng, 2, 2, 4, 4);
                let y: Vec<usize> = (0..2).map(|_| rng.below(classes)).collect();
                (x, y)
            })
            .collect();
        let mut probe = base.clone();
        probe.freeze_bn = true;
        let mut min_act = f64::INFINITY;
        for (s, (x, _)) in candidate.iter().enumerate() {
            let (_, cache) = probe.forward_train(x, s).unwrap();
            for v in cache.norm1_out.data.iter().chain(cache.norm2_out.data.iter()) {
                min_act = min_act.min(v.abs());
            }
        }
        if min_act > 1e-3 {
            break candidate;
        }
    };

    // Analytic gradients of the summed loss.
    let mut work = base.clone();
    let mut grads = NetGrads::zeros_like(&work);
    for (s, (x, y)) in batches.iter().enumerate() {
        work.loss_and_grads(x, y, s, &mut grads).unwrap();
    }

    let loss_at = |net: &DomainBranchNet| net.total_loss(&batches).unwrap();

    // Directional central differences, one parameter group at a time. A
    // directional probe keeps the compared quantities well scaled (a per-entry
    // difference quotient cannot resolve near-cancelling entries at this step
    // size) while still flagging any wrong entry: a bad component of the
    // gradient shifts the dot product by its own magnitude.
    let mut worst: f64 = 0.0;
    let gbufs = grads.buffers();
    let n_bufs = gbufs.len();
    for bi in 0..n_bufs {
        let len = gbufs[bi].1.len();
        for _ in 0..3 {
            let mut dir: Vec<f64> = (0..len)
                .map(|_| {
                    let m = rng.uniform_in(0.5, 1.0);
                    if rng.below(2) == 0 {
                        m
                    } else {
                        -m
                    }
                })
                .collect();
            // Unit length keeps the cubic truncation term of the central
            // difference negligible regardless of the group size.
            let norm = libm::sqrt(dir.iter().map(|v| v * v).sum::<f64>());
            for v in dir.iter_mut() {
                *v /= norm;
            }
            let analytic: f64 = gbufs[bi]
                .1
                .iter()
                .zip(dir.iter())
                .map(|(g, v)| g * v)
                .sum();
            let mut probe = base.clone();
            {
                let mut bufs = probe.param_buffers_mut();
                for (t, v) in bufs[bi].1.iter_mut().zip(dir.iter()) {
                    *t += FD_STEP * v;
                }
            }
            let lp = loss_at(&probe);
            let mut probe = base.clone();
            {
                let mut bufs = probe.param_buffers_mut();
                for (t, v) in bufs[bi].1.iter_mut().zip(dir.iter()) {
                    *t -= FD_STEP * v;
                }
            }
            let lm = loss_at(&probe);
            let fd = (lp - lm) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic, fd));
        }
    }
    worst
}

/// Sanity helper used by tests: a value/gradient pair from a scalar map,
/// verified to keep matching dims.
pub fn grad_pair_of<F: FnMut(&Tensor4) -> f64>(f: F, x: &Tensor4, h: f64) -> GradPair {
    let grad = finite_diff_grad(f, x, h);
    let pair = GradPair {
        value: x.clone(),
        grad,
    };
    debug_assert!(pair.dims_match());
    pair
}

// ---------------------------------------------------------------------------
// Registry
// ---------------------------------------------------------------------------

/// Run every registered check. Deterministic given the seed.
pub fn run_all_checks(seed: u64) -> OracleReport {
    let mut checks = Vec::new();
    let mut push = |name: &str, err: f64, tol: f64| {
        checks.push(CheckResult {
            name: String::from(name),
            max_rel_err: err,
            tolerance: tol,
            pass: err <= tol,
        });
    };
    push("stats_batch", check_stats(seed, StatMode::Batch, 50), TOL_ALGEBRAIC);
    push(
        "stats_instance",
        check_stats(seed, StatMode::Instance, 50),
        TOL_ALGEBRAIC,
    );
    push("stats_layer", check_stats(seed, StatMode::Layer, 50), TOL_ALGEBRAIC);
    push("mix_stats", check_mix(seed, 50), TOL_ALGEBRAIC);
    push("conv_forward", check_conv(seed, 50), TOL_ALGEBRAIC);
    push("grad_conv", check_conv_grad(seed), TOL_GRADIENT);
    push("grad_elementwise", check_elementwise_grads(seed), TOL_GRADIENT);
    push("grad_linear_xent", check_linear_xent_grads(seed), TOL_GRADIENT);
    push("grad_norm_mixture", check_norm_grads(seed), TOL_GRADIENT);
    for (name, variant) in [
        ("grad_net_bn", Variant::Bn),
        ("grad_net_in", Variant::In),
        ("grad_net_dsbn", Variant::Dsbn),
        ("grad_net_sn", Variant::SnShared),
        ("grad_net_ibn", Variant::IbnSplit),
        ("grad_net_dson", Variant::Dson),
    ] {
        push(name, check_full_net(seed, variant), TOL_GRADIENT);
    }
    OracleReport { seed, checks }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn naive_stats_constant_var_exactly_zero() {
        let x = Tensor4::full(3, 2, 4, 4, 0.375); // dyadic, so sums stay exact
        for mode in [StatMode::Batch, StatMode::Instance, StatMode::Layer] {
            let s = naive_stats(&x, mode);
            assert!(s.var.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn naive_stats_single_instance_modes_coincide() {
        let mut rng = Rng::new(40);
        let x = random_tensor(&mut rng, 1, 3, 5, 5);
        let b = naive_stats(&x, StatMode::Batch);
        let i = naive_stats(&x, StatMode::Instance);
        assert_eq!(b.mean, i.mean);
        assert_eq!(b.var, i.var);
    }

    #[test]
    fn all_checks_pass() {
        let report = run_all_checks(0);
        for c in &report.checks {
            assert!(
                c.pass,
                "{} failed: max rel err {:e} > {:e}",
                c.name, c.max_rel_err, c.tolerance
            );
        }
        assert_eq!(report.checks.len(), 15);
    }

    #[test]
    fn report_is_deterministic() {
        let a = run_all_checks(7);
        let b = run_all_checks(7);
        for (x, y) in a.checks.iter().zip(b.checks.iter()) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.max_rel_err.to_bits(), y.max_rel_err.to_bits());
        }
    }

    #[test]
    fn oracle_detects_perturbed_gradient() {
        // A corrupted analytic gradient must be flagged by the same
        // comparison the checks use.
        let mut rng = Rng::new(41);
        let x = random_tensor(&mut rng, 1, 1, 3, 3);
        let w = random_tensor(&mut rng, 1, 1, 3, 3);
        let r = random_tensor(&mut rng, 1, 1, 3, 3);
        let (gx, _, _) = tensor::conv2d_backward(&x, &w, &r).unwrap();
        let fd = finite_diff_grad(
            |xp| {
                tensor::conv2d_forward(xp, &w, &[0.0])
                    .unwrap()
                    .data
                    .iter()
                    .zip(r.data.iter())
                    .map(|(a, b)| a * b)
                    .sum()
            },
            &x,
            FD_STEP,
        );
        assert!(tensor::max_rel_err(&gx, &fd) <= TOL_GRADIENT);
        let mut bad = gx.clone();
        bad.data[0] += 0.5;
        assert!(tensor::max_rel_err(&bad, &fd) > TOL_GRADIENT);
    }

    #[test]
    fn grad_pair_helper_keeps_dims() {
        let x = Tensor4::full(1, 2, 2, 2, 0.5);
        let p = grad_pair_of(|t| t.data.iter().sum(), &x, 1e-5);
        assert!(p.dims_match());
    }
}
