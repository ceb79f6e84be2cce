//! Acceptance gate for the workspace: one line of output per criterion,
//! nonzero exit if any criterion fails.
//!
//! Criteria 4-7 share one grid of full-length training runs on the default
//! four-domain preset, so this target takes a while; everything else is
//! seconds. Run it with `cargo test --test acceptance`.

use std::collections::HashMap;
use std::time::Instant;

use rayon::prelude::*;

use dson_core::model::DomainBranchNet;
use dson_core::norm::{self, AffineParams, MixtureParams, NormConfig, StatMode, Variant};
use dson_core::optim::{self, LrSchedule};
use dson_core::oracle;
use dson_core::synth::{self, DomainDataset};
use dson_core::{Rng, Tensor4};

use dson_lab::config::{ExperimentConfig, TargetSpec, VariantSpec};
use dson_lab::runner::{self, CellKey};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const DOMAINS: [usize; 4] = [0, 1, 2, 3];
const NOISE_LEVEL: f64 = 0.2;

struct Criterion {
    number: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn report(c: &Criterion) {
    println!(
        "criterion {} ({}): {} -- {}",
        c.number,
        c.name,
        if c.pass { "pass" } else { "FAIL" },
        c.detail
    );
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

// ---------------------------------------------------------------------------
// Criteria 1 and 2: oracle equivalence and the gradient suite
// ---------------------------------------------------------------------------

fn check_oracles() -> (Criterion, Criterion) {
    let algebraic = [
        "stats_batch",
        "stats_instance",
        "stats_layer",
        "mix_stats",
        "conv_forward",
    ];
    let t0 = Instant::now();
    let rep = oracle::run_all_checks(0);
    let elapsed = t0.elapsed().as_secs_f64();

    let mut alg_worst: f64 = 0.0;
    let mut alg_pass = true;
    let mut grad_worst: f64 = 0.0;
    let mut grad_pass = true;
    for c in &rep.checks {
        if algebraic.contains(&c.name.as_str()) {
            alg_worst = alg_worst.max(c.max_rel_err);
            alg_pass &= c.pass;
        } else {
            grad_worst = grad_worst.max(c.max_rel_err);
            grad_pass &= c.pass;
        }
    }
    (
        Criterion {
            number: 1,
            name: "oracle equivalence",
            pass: alg_pass && elapsed < 10.0,
            detail: format!(
                "max rel err {:.3e} (tol 1e-12), full registry in {:.1}s",
                alg_worst, elapsed
            ),
        },
        Criterion {
            number: 2,
            name: "gradient suite",
            pass: grad_pass && elapsed < 60.0,
            detail: format!(
                "max rel err {:.3e} (tol 1e-5), full registry in {:.1}s",
                grad_worst, elapsed
            ),
        },
    )
}

// ---------------------------------------------------------------------------
// Criterion 3: normalization identities
// ---------------------------------------------------------------------------

fn check_identities() -> Criterion {
    let eps = 1e-12;
    let mut rng = Rng::new(3);
    let mut worst_mean: f64 = 0.0;
    let mut worst_var_low: f64 = 1.0;
    let mut worst_var_high: f64 = 0.0;
    let mut worst_invariance: f64 = 0.0;

    for _ in 0..20 {
        let n = 2 + rng.below(3);
        let c = 1 + rng.below(6);
        let h = 2 + rng.below(6);
        let w = 2 + rng.below(6);
        let mut x = Tensor4::zeros(n, c, h, w);
        rng.fill_uniform(&mut x, -2.0, 2.0);
        let affine = AffineParams::identity(c);

        // Batch statistics: output has zero per-channel mean, unit variance.
        let (y, _) = norm::norm_forward_train(&x, [1.0, 0.0, 0.0], &affine, eps).unwrap();
        let stats = norm::compute_stats(&y, StatMode::Batch).unwrap();
        for &m in &stats.mean {
            worst_mean = worst_mean.max(m.abs());
        }
        for &v in &stats.var {
            worst_var_low = worst_var_low.min(v);
            worst_var_high = worst_var_high.max(v);
        }

        // Instance statistics: output is invariant to per-instance,
        // per-channel affine restyling of the input.
        let (y, _) = norm::norm_forward_train(&x, [0.0, 1.0, 0.0], &affine, eps).unwrap();
        let mut styled = x.clone();
        for b in 0..n {
            for ch in 0..c {
                let gain = rng.uniform_in(0.5, 2.0);
                let bias = rng.uniform_in(-1.0, 1.0);
                for v in styled.plane_mut(b, ch) {
                    *v = gain * *v + bias;
                }
            }
        }
        let (ys, _) = norm::norm_forward_train(&styled, [0.0, 1.0, 0.0], &affine, eps).unwrap();
        for (a, b) in y.data.iter().zip(ys.data.iter()) {
            worst_invariance = worst_invariance.max((a - b).abs());
        }
    }

    let pass = worst_mean <= 1e-10
        && worst_var_low >= 1.0 - 1e-6
        && worst_var_high <= 1.0
        && worst_invariance <= 1e-6;
    Criterion {
        number: 3,
        name: "normalization identities",
        pass,
        detail: format!(
            "|mean| <= {:.2e}, var in [{:.9}, {:.9}], style invariance <= {:.2e}",
            worst_mean, worst_var_low, worst_var_high, worst_invariance
        ),
    }
}

// ---------------------------------------------------------------------------
// Criteria 4-7: the shared training grid on the preset
// ---------------------------------------------------------------------------

#[derive(Clone)]
struct CellSummary {
    target_accuracy: f64,
    /// (source domain id, batch-component weight) at the selected checkpoint.
    source_weights: Vec<(usize, f64)>,
    seconds: f64,
}

type GridKey = (VariantSpec, bool, usize, u64); // variant, noisy, target, seed

fn grid_config(noise: f64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.noise = noise;
    cfg.log_every = 0;
    cfg.val_every = 100;
    cfg
}

fn run_grid(data: &[(DomainDataset, DomainDataset)]) -> HashMap<GridKey, CellSummary> {
    let mut jobs: Vec<(VariantSpec, f64, usize, u64)> = Vec::new();
    for &(variant, noise) in &[
        (VariantSpec::Bn, 0.0),
        (VariantSpec::Dson, 0.0),
        (VariantSpec::DsonAgnostic, 0.0),
        (VariantSpec::Bn, NOISE_LEVEL),
        (VariantSpec::Dson, NOISE_LEVEL),
    ] {
        for &target in &DOMAINS {
            for &seed in &SEEDS {
                jobs.push((variant, noise, target, seed));
            }
        }
    }

    let summaries: Vec<(GridKey, CellSummary)> = jobs
        .par_iter()
        .map(|&(variant, noise, target, seed)| {
            let cfg = grid_config(noise);
            // Cells are single-threaded, so thread CPU time is the cost of
            // one cell on one core regardless of machine load.
            let t0 = cpu_time::ThreadTime::now();
            let cell = run_cell_or_panic(&cfg, variant, target, seed, data);
            let net = &cell.outcome.best_net;
            let source_weights = cell
                .sources
                .iter()
                .enumerate()
                .map(|(branch, &d)| (d, net.mixture.weights_for(branch)[0]))
                .collect();
            (
                (variant, noise > 0.0, target, seed),
                CellSummary {
                    target_accuracy: cell
                        .outcome
                        .report
                        .target_ensemble_accuracy
                        .expect("grid cells hold out a target"),
                    source_weights,
                    seconds: t0.elapsed().as_secs_f64(),
                },
            )
        })
        .collect();
    summaries.into_iter().collect()
}

fn run_cell_or_panic(
    cfg: &ExperimentConfig,
    variant: VariantSpec,
    target: usize,
    seed: u64,
    data: &[(DomainDataset, DomainDataset)],
) -> runner::CellResult {
    runner::run_cell(
        cfg,
        CellKey {
            variant,
            target,
            seed,
        },
        data,
    )
    .unwrap_or_else(|e| panic!("cell {:?} t{} s{}: {}", variant, target, seed, e))
}

fn grid_mean(grid: &HashMap<GridKey, CellSummary>, variant: VariantSpec, noisy: bool) -> f64 {
    let accs: Vec<f64> = DOMAINS
        .iter()
        .flat_map(|&t| {
            SEEDS
                .iter()
                .map(move |&s| grid[&(variant, noisy, t, s)].target_accuracy)
        })
        .collect();
    mean(&accs)
}

fn check_dg_gap(grid: &HashMap<GridKey, CellSummary>) -> Criterion {
    let dson = grid_mean(grid, VariantSpec::Dson, false);
    let bn = grid_mean(grid, VariantSpec::Bn, false);
    let secs: Vec<f64> = grid
        .iter()
        .filter(|((v, noisy, _, _), _)| !noisy && matches!(v, VariantSpec::Dson | VariantSpec::Bn))
        .map(|(_, s)| s.seconds)
        .collect();
    let mean_secs = mean(&secs);
    Criterion {
        number: 4,
        name: "held-out domain accuracy gap",
        pass: dson - bn >= 0.10 && mean_secs < 300.0,
        detail: format!(
            "mixed-norm {:.4} vs batch-norm {:.4} (gap {:+.4}, need >= +0.10), mean {:.0}s/cell",
            dson,
            bn,
            dson - bn,
            mean_secs
        ),
    }
}

fn check_weight_sharing(grid: &HashMap<GridKey, CellSummary>) -> Criterion {
    let specific = grid_mean(grid, VariantSpec::Dson, false);
    let agnostic = grid_mean(grid, VariantSpec::DsonAgnostic, false);
    Criterion {
        number: 5,
        name: "per-domain vs shared mixture weights",
        pass: specific >= agnostic,
        detail: format!(
            "per-domain {:.4} vs shared {:.4} (need per-domain >= shared)",
            specific, agnostic
        ),
    }
}

fn check_mixture_behavior(
    grid: &HashMap<GridKey, CellSummary>,
    data: &[(DomainDataset, DomainDataset)],
) -> Criterion {
    // Single-source runs: one per (domain, seed).
    let runs: Vec<((usize, u64), f64)> = DOMAINS
        .par_iter()
        .flat_map(|&d| SEEDS.par_iter().map(move |&s| (d, s)))
        .map(|(d, s)| {
            let cfg = grid_config(0.0);
            let run = runner::run_single_source(&cfg, VariantSpec::Dson, d, s, data)
                .unwrap_or_else(|e| panic!("single-source d{} s{}: {}", d, s, e));
            ((d, s), 1.0 - run.net.mixture.weights_for(0)[0])
        })
        .collect();

    let mut wins = 0usize;
    let mut total = 0usize;
    for &((d, s), single_ratio) in &runs {
        // Multi-source ratio: mean of domain d's instance share over the
        // clean grid cells in which d served as a source.
        let mut ratios = Vec::new();
        for &t in &DOMAINS {
            if t == d {
                continue;
            }
            let cell = &grid[&(VariantSpec::Dson, false, t, s)];
            let &(_, w) = cell
                .source_weights
                .iter()
                .find(|(src, _)| *src == d)
                .expect("domain is a source when not the target");
            ratios.push(1.0 - w);
        }
        total += 1;
        if mean(&ratios) > single_ratio {
            wins += 1;
        }
    }
    Criterion {
        number: 6,
        name: "mixture-weight behavior",
        pass: wins * 2 > total,
        detail: format!(
            "multi-source instance share exceeds single-source in {}/{} cells",
            wins, total
        ),
    }
}

fn check_noise_robustness(grid: &HashMap<GridKey, CellSummary>) -> Criterion {
    let drop_dson =
        grid_mean(grid, VariantSpec::Dson, false) - grid_mean(grid, VariantSpec::Dson, true);
    let drop_bn =
        grid_mean(grid, VariantSpec::Bn, false) - grid_mean(grid, VariantSpec::Bn, true);
    Criterion {
        number: 7,
        name: "label-noise robustness",
        pass: drop_dson <= drop_bn,
        detail: format!(
            "accuracy drop at noise {}: mixed-norm {:+.4} vs batch-norm {:+.4}",
            NOISE_LEVEL, drop_dson, drop_bn
        ),
    }
}

// ---------------------------------------------------------------------------
// Criterion 8: protocol correctness
// ---------------------------------------------------------------------------

fn warmed_net(domains: usize, seed: u64) -> DomainBranchNet {
    let mut rng = Rng::new(seed);
    let mut net = DomainBranchNet::new(2, 3, domains, NormConfig::new(Variant::Dson), &mut rng);
    for s in 0..domains {
        let mut x = Tensor4::zeros(4, 2, 8, 8);
        rng.fill_uniform(&mut x, -1.0, 1.0);
        net.forward_train(&x, s).unwrap();
    }
    net
}

fn bits(t: &Tensor4) -> Vec<u64> {
    t.data.iter().map(|v| v.to_bits()).collect()
}

fn check_protocol() -> Criterion {
    let mut rng = Rng::new(8);
    let mut x = Tensor4::zeros(3, 2, 8, 8);
    rng.fill_uniform(&mut x, -1.0, 1.0);

    // Holding out one of two branches must equal the remaining branch exactly.
    let net = warmed_net(2, 80);
    let loo = net.leave_one_out_predict(&x, 0).unwrap();
    let other = net.branch_predict(&x, 1).unwrap();
    let loo_exact = bits(&loo.logits) == bits(&other.logits);

    // The ensemble must not care how the domains are numbered.
    let net = warmed_net(3, 81);
    let base = net.ensemble_predict(&x).unwrap();
    let mut permuted = net.clone();
    // Rotate the branches: (0, 1, 2) -> (1, 2, 0).
    for layer in [&mut permuted.norm1, &mut permuted.norm2] {
        layer.affine.rotate_left(1);
        layer.running.rotate_left(1);
    }
    if let MixtureParams::PerDomain(logits) = &mut permuted.mixture {
        logits.rotate_left(1);
    }
    let rotated = permuted.ensemble_predict(&x).unwrap();
    let perm_err = base
        .logits
        .data
        .iter()
        .zip(rotated.logits.data.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    let perm_ok = perm_err <= 1e-12;

    // Identical seeded training sweeps must emit byte-identical files.
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.domains = vec![0, 1, 2];
    cfg.seeds = vec![0];
    cfg.target = TargetSpec::One(0);
    cfg.iters = 10;
    cfg.batch_per_domain = 4;
    cfg.log_every = 2;
    cfg.val_every = 5;
    cfg.classes = 3;
    cfg.height = 8;
    cfg.width = 8;
    cfg.train_per_domain = 12;
    cfg.test_per_domain = 8;
    cfg.data_dir = dir.path().join("data").display().to_string();
    cfg.out_dir = dir.path().join("out").display().to_string();
    runner::cmd_gen_data(&cfg).unwrap();
    runner::cmd_train(&cfg, 1).unwrap();
    let paths = ["report_dson_t0_s0.csv", "metrics_dson_t0_s0.txt", "ckpt_dson_t0_s0.json"];
    let first: Vec<Vec<u8>> = paths
        .iter()
        .map(|p| std::fs::read(std::path::Path::new(&cfg.out_dir).join(p)).unwrap())
        .collect();
    runner::cmd_train(&cfg, 1).unwrap();
    let rerun_identical = paths.iter().zip(first.iter()).all(|(p, bytes)| {
        std::fs::read(std::path::Path::new(&cfg.out_dir).join(p)).unwrap() == *bytes
    });

    Criterion {
        number: 8,
        name: "protocol correctness",
        pass: loo_exact && perm_ok && rerun_identical,
        detail: format!(
            "two-branch hold-out bit-exact: {}, permutation max diff {:.2e}, rerun byte-identical: {}",
            loo_exact, perm_err, rerun_identical
        ),
    }
}

// ---------------------------------------------------------------------------
// Criterion 9: schedule values
// ---------------------------------------------------------------------------

fn check_schedule() -> Criterion {
    // 0.02 / 11^0.75, computed independently and frozen.
    const ETA_FINAL: f64 = 0.0033112005215234037;
    let sched = LrSchedule::desk_default(1000);
    let start = optim::lr_at(&sched, 0).unwrap();
    let end = optim::lr_at(&sched, 1000).unwrap();
    let end_err = (end - ETA_FINAL).abs();
    Criterion {
        number: 9,
        name: "schedule values",
        pass: start == 0.02 && end_err <= 1e-12,
        detail: format!("eta(0) = {}, |eta(T) - reference| = {:.2e}", start, end_err),
    }
}

// ---------------------------------------------------------------------------

fn main() {
    let t0 = Instant::now();
    let mut results = Vec::new();

    let (c1, c2) = check_oracles();
    report(&c1);
    report(&c2);
    results.push(c1);
    results.push(c2);

    let c3 = check_identities();
    report(&c3);
    results.push(c3);

    let (spec, domains) = synth::default_four_domain_preset().unwrap();
    let data = synth::generate(&spec, &domains).unwrap();
    let grid = run_grid(&data);

    for c in [
        check_dg_gap(&grid),
        check_weight_sharing(&grid),
        check_mixture_behavior(&grid, &data),
        check_noise_robustness(&grid),
        check_protocol(),
        check_schedule(),
    ] {
        report(&c);
        results.push(c);
    }

    let failed: Vec<usize> = results.iter().filter(|c| !c.pass).map(|c| c.number).collect();
    println!(
        "acceptance: {}/{} criteria passed in {:.0}s",
        results.len() - failed.len(),
        results.len(),
        t0.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        println!("failed criteria: {:?}", failed);
        std::process::exit(1);
    }
}
