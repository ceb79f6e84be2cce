//! Command implementations shared by the CLI binary and the test suites.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use dson_core::model::DomainBranchNet;
use dson_core::norm::{NormConfig, StatMode};
use dson_core::optim::{
    self, LrSchedule, NoiseConfig, TrainConfig, TrainOutcome,
};
use dson_core::oracle;
use dson_core::synth::{self, DatasetSpec, DomainDataset, DomainSpec};
use dson_core::Rng;

use crate::config::{ExperimentConfig, VariantSpec};
use crate::io::{self, Table};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabError(pub String);

impl fmt::Display for LabError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for LabError {}

macro_rules! from_err {
    ($t:ty) => {
        impl From<$t> for LabError {
            fn from(e: $t) -> Self {
                LabError(e.to_string())
            }
        }
    };
}

from_err!(crate::config::ConfigError);
from_err!(crate::io::IoError);
from_err!(dson_core::optim::TrainError);
from_err!(dson_core::synth::SynthError);
from_err!(dson_core::model::ModelError);
from_err!(std::io::Error);

pub type Result<T> = std::result::Result<T, LabError>;

// ---------------------------------------------------------------------------
// Dataset generation and loading
// ---------------------------------------------------------------------------

/// Style table of the four preset domains: mean gains step by 0.6 and mean
/// biases by 0.6, with a small per-channel spread.
fn preset_domain_style(id: usize) -> Result<DomainSpec> {
    let gains = [0.6, 1.2, 1.8, 2.4];
    let biases = [-0.6, 0.0, 0.6, 1.2];
    if id >= gains.len() {
        return Err(LabError(format!(
            "no preset style for domain {} (the preset defines {})",
            id,
            gains.len()
        )));
    }
    Ok(DomainSpec {
        id,
        gain: vec![gains[id] - 0.05, gains[id], gains[id] + 0.05],
        bias: vec![biases[id] + 0.05, biases[id], biases[id] - 0.05],
        style_jitter: 0.1,
        pixel_noise: 0.05,
    })
}

fn build_spec(cfg: &ExperimentConfig) -> Result<DatasetSpec> {
    // Template separation scales with the tensor size so custom resolutions
    // keep the preset's per-element contrast (preset: 3.0 at 3x16x16).
    let volume = (cfg.channels * cfg.height * cfg.width) as f64;
    let min_sep = 3.0 * (volume / (3.0 * 256.0)).sqrt();
    Ok(DatasetSpec::build(
        cfg.classes,
        cfg.channels,
        cfg.height,
        cfg.width,
        cfg.train_per_domain,
        cfg.test_per_domain,
        cfg.data_seed,
        min_sep,
    )?)
}

pub fn dataset_path(data_dir: &Path, domain: usize, split: &str) -> PathBuf {
    data_dir.join(format!("domain{}_{}.dsnd", domain, split))
}

/// Generate the configured synthetic datasets and write one file per
/// (domain, split). Deterministic; rerunning produces identical bytes.
pub fn cmd_gen_data(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let spec = build_spec(cfg)?;
    let domains: Vec<DomainSpec> = cfg
        .domains
        .iter()
        .map(|&d| preset_domain_style(d))
        .collect::<Result<_>>()?;
    let data_dir = Path::new(&cfg.data_dir);
    fs::create_dir_all(data_dir)?;
    let mut written = Vec::new();
    for (pair, d) in synth::generate(&spec, &domains)?.iter().zip(cfg.domains.iter()) {
        let train_path = dataset_path(data_dir, *d, "train");
        io::save_dataset(&pair.0, &train_path)?;
        written.push(train_path);
        let test_path = dataset_path(data_dir, *d, "test");
        io::save_dataset(&pair.1, &test_path)?;
        written.push(test_path);
    }
    Ok(written)
}

/// Load (train, test) for every configured domain.
pub fn load_all(cfg: &ExperimentConfig) -> Result<Vec<(DomainDataset, DomainDataset)>> {
    let data_dir = Path::new(&cfg.data_dir);
    cfg.domains
        .iter()
        .map(|&d| {
            let train = io::load_dataset(&dataset_path(data_dir, d, "train"))
                .map_err(|e| LabError(format!("domain {} train split: {}", d, e)))?;
            let test = io::load_dataset(&dataset_path(data_dir, d, "test"))
                .map_err(|e| LabError(format!("domain {} test split: {}", d, e)))?;
            Ok((train, test))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Cells
// ---------------------------------------------------------------------------

/// One training run: a variant, a held-out target, a seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellKey {
    pub variant: VariantSpec,
    pub target: usize,
    pub seed: u64,
}

pub struct CellResult {
    pub key: CellKey,
    /// Source domain ids in branch order.
    pub sources: Vec<usize>,
    pub outcome: TrainOutcome,
}

fn norm_config(variant: VariantSpec) -> NormConfig {
    let mut cfg = NormConfig::new(variant.core_variant());
    cfg.domain_specific_weights = variant.domain_specific_weights();
    cfg
}

fn train_config(cfg: &ExperimentConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        iters: cfg.iters,
        batch_per_domain: cfg.batch_per_domain,
        schedule: LrSchedule {
            eta0: cfg.eta0,
            alpha: cfg.lr_alpha,
            decay_beta: cfg.lr_beta,
            total_iters: cfg.iters.max(1),
        },
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
        noise: NoiseConfig {
            level: cfg.noise,
            seed,
        },
        seed,
        log_every: cfg.log_every,
        val_every: cfg.val_every,
    }
}

/// Train one cell: sources are every configured domain except the target,
/// validation is leave-one-domain-out on the sources' test splits, and the
/// best checkpoint is scored on the target's test split.
pub fn run_cell(
    cfg: &ExperimentConfig,
    key: CellKey,
    data: &[(DomainDataset, DomainDataset)],
) -> Result<CellResult> {
    let sources: Vec<usize> = cfg.domains.iter().copied().filter(|&d| d != key.target).collect();
    if sources.is_empty() {
        return Err(LabError(format!(
            "target {} leaves no source domains",
            key.target
        )));
    }
    let index_of = |d: usize| cfg.domains.iter().position(|&x| x == d).unwrap();
    let train_sets: Vec<DomainDataset> =
        sources.iter().map(|&d| data[index_of(d)].0.clone()).collect();
    let val_sets: Vec<DomainDataset> =
        sources.iter().map(|&d| data[index_of(d)].1.clone()).collect();
    let target_test = &data[index_of(key.target)].1;

    let (_, c, _, _) = train_sets[0].images.dims();
    let classes = train_sets
        .iter()
        .flat_map(|ds| ds.labels.iter())
        .max()
        .map(|&y| y + 1)
        .unwrap_or(0);
    let mut rng = Rng::new(key.seed).derive(0x6e6574); // net init stream
    let mut net = DomainBranchNet::new(c, classes, sources.len(), norm_config(key.variant), &mut rng);
    net.freeze_bn = cfg.freeze_bn;

    let outcome = optim::train(
        &mut net,
        &train_sets,
        &val_sets,
        Some(target_test),
        &train_config(cfg, key.seed),
    )?;
    Ok(CellResult {
        key,
        sources,
        outcome,
    })
}

/// A single-source cell: train on one domain, report accuracy on every
/// domain's test split.
pub struct SingleSourceResult {
    pub variant: VariantSpec,
    pub source: usize,
    pub seed: u64,
    /// Accuracy per configured domain, in `cfg.domains` order.
    pub accuracy: Vec<f64>,
    pub net: DomainBranchNet,
}

pub fn run_single_source(
    cfg: &ExperimentConfig,
    variant: VariantSpec,
    source: usize,
    seed: u64,
    data: &[(DomainDataset, DomainDataset)],
) -> Result<SingleSourceResult> {
    let index_of = |d: usize| cfg.domains.iter().position(|&x| x == d).unwrap();
    let train_sets = [data[index_of(source)].0.clone()];
    let val_sets = [data[index_of(source)].1.clone()];

    let (_, c, _, _) = train_sets[0].images.dims();
    let classes = train_sets[0].labels.iter().max().map(|&y| y + 1).unwrap_or(0);
    let mut rng = Rng::new(seed).derive(0x6e6574);
    let mut net = DomainBranchNet::new(c, classes, 1, norm_config(variant), &mut rng);
    net.freeze_bn = cfg.freeze_bn;

    let outcome = optim::train(
        &mut net,
        &train_sets,
        &val_sets,
        None,
        &train_config(cfg, seed),
    )?;
    let best = outcome.best_net;
    let accuracy = cfg
        .domains
        .iter()
        .map(|&d| {
            optim::evaluate(
                &best,
                &data[index_of(d)].1,
                optim::EvalRule::SingleBranch(0),
            )
            .map_err(LabError::from)
        })
        .collect::<Result<_>>()?;
    Ok(SingleSourceResult {
        variant,
        source,
        seed,
        accuracy,
        net: best,
    })
}

fn with_jobs<T, F>(jobs: usize, f: F) -> Result<T>
where
    T: Send,
    F: FnOnce() -> T + Send,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| LabError(e.to_string()))?;
    Ok(pool.install(f))
}

fn collect_cells(
    cfg: &ExperimentConfig,
    keys: Vec<CellKey>,
    data: &[(DomainDataset, DomainDataset)],
    jobs: usize,
) -> Result<Vec<CellResult>> {
    let results: Vec<Result<CellResult>> = with_jobs(jobs, || {
        keys.par_iter().map(|&key| run_cell(cfg, key, data)).collect()
    })?;
    let mut out = Vec::with_capacity(results.len());
    let mut errors = Vec::new();
    for r in results {
        match r {
            Ok(cell) => out.push(cell),
            Err(e) => errors.push(e.0),
        }
    }
    if !errors.is_empty() {
        return Err(LabError(errors.join("; ")));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn cell_stem(key: &CellKey) -> String {
    format!("{}_t{}_s{}", key.variant, key.target, key.seed)
}

fn write_cell_files(out_dir: &Path, cell: &CellResult) -> Result<()> {
    let stem = cell_stem(&cell.key);
    let report = &cell.outcome.report;
    fs::write(
        out_dir.join(format!("report_{}.csv", stem)),
        io::report_csv(report, cell.sources.len()),
    )?;
    fs::write(
        out_dir.join(format!("metrics_{}.txt", stem)),
        io::metrics_block(report),
    )?;
    io::save_checkpoint(&cell.outcome.best_net, &out_dir.join(format!("ckpt_{}.json", stem)))?;
    Ok(())
}

/// Leave-one-target-out training sweep: every (target, seed) pair of the
/// config, one variant. Writes per-cell reports, metrics, and checkpoints,
/// plus a sweep summary.
pub fn cmd_train(cfg: &ExperimentConfig, jobs: usize) -> Result<Table> {
    let data = load_all(cfg)?;
    let out_dir = Path::new(&cfg.out_dir);
    fs::create_dir_all(out_dir)?;

    let keys: Vec<CellKey> = cfg
        .target_list()
        .into_iter()
        .flat_map(|target| {
            cfg.seeds.iter().map(move |&seed| CellKey {
                variant: cfg.variant,
                target,
                seed,
            })
        })
        .collect();
    let cells = collect_cells(cfg, keys, &data, jobs)?;

    let mut table = Table::new(vec![
        "variant", "target", "seed", "best_val", "target_ensemble",
    ]);
    for cell in &cells {
        write_cell_files(out_dir, cell)?;
        let report = &cell.outcome.report;
        table.push_row(vec![
            cell.key.variant.to_string(),
            cell.key.target.to_string(),
            cell.key.seed.to_string(),
            format!("{:.4}", report.best_val_accuracy),
            format!("{:.4}", report.target_ensemble_accuracy.unwrap_or(f64::NAN)),
        ]);
    }
    fs::write(out_dir.join("train_summary.csv"), table.to_csv())?;
    fs::write(out_dir.join("train_summary.txt"), table.to_aligned())?;
    Ok(table)
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub struct AblationResult {
    /// accuracy[variant][target] lists the per-seed ensemble accuracies.
    pub accuracy: Vec<Vec<Vec<f64>>>,
    pub variants: Vec<VariantSpec>,
    pub targets: Vec<usize>,
    pub table: Table,
}

/// Run every normalization variant over the full (target, seed) grid and
/// emit a variants-by-targets table of mean and standard deviation.
pub fn cmd_ablate(cfg: &ExperimentConfig, jobs: usize) -> Result<AblationResult> {
    let data = load_all(cfg)?;
    let out_dir = Path::new(&cfg.out_dir);
    fs::create_dir_all(out_dir)?;

    let variants = VariantSpec::ALL.to_vec();
    let targets = cfg.target_list();
    let keys: Vec<CellKey> = variants
        .iter()
        .flat_map(|&variant| {
            targets.iter().flat_map(move |&target| {
                cfg.seeds.iter().map(move |&seed| CellKey {
                    variant,
                    target,
                    seed,
                })
            })
        })
        .collect();
    let cells = collect_cells(cfg, keys, &data, jobs)?;

    let mut accuracy = vec![vec![Vec::new(); targets.len()]; variants.len()];
    for cell in &cells {
        let vi = variants.iter().position(|&v| v == cell.key.variant).unwrap();
        let ti = targets.iter().position(|&t| t == cell.key.target).unwrap();
        accuracy[vi][ti]
            .push(cell.outcome.report.target_ensemble_accuracy.unwrap_or(f64::NAN));
    }

    let mut header = vec![String::from("variant")];
    for t in &targets {
        header.push(format!("target{}", t));
    }
    header.push(String::from("mean"));
    let mut table = Table::new(header);
    for (vi, &variant) in variants.iter().enumerate() {
        let mut row = vec![variant.to_string()];
        let mut all = Vec::new();
        for ti in 0..targets.len() {
            let (m, sd) = mean_sd(&accuracy[vi][ti]);
            row.push(format!("{:.4}+-{:.4}", m, sd));
            all.extend_from_slice(&accuracy[vi][ti]);
        }
        let (m, _) = mean_sd(&all);
        row.push(format!("{:.4}", m));
        table.push_row(row);
    }
    fs::write(out_dir.join("ablation.csv"), table.to_csv())?;
    fs::write(out_dir.join("ablation.txt"), table.to_aligned())?;
    Ok(AblationResult {
        accuracy,
        variants,
        targets,
        table,
    })
}

// ---------------------------------------------------------------------------
// single-source matrix
// ---------------------------------------------------------------------------

pub struct MatrixResult {
    /// bn[source][target] and dson[source][target], mean over seeds.
    pub bn: Vec<Vec<f64>>,
    pub dson: Vec<Vec<f64>>,
    pub domains: Vec<usize>,
    pub bn_table: Table,
    pub delta_table: Table,
}

/// Train on each single domain and evaluate on all domains: the BN accuracy
/// matrix plus the DSON-minus-BN delta matrix. DSON single-source
/// checkpoints are written for the weights report.
pub fn cmd_single_source_matrix(cfg: &ExperimentConfig, jobs: usize) -> Result<MatrixResult> {
    let data = load_all(cfg)?;
    let out_dir = Path::new(&cfg.out_dir);
    fs::create_dir_all(out_dir)?;

    let domains = cfg.domains.clone();
    let runs: Vec<(VariantSpec, usize, u64)> = [VariantSpec::Bn, VariantSpec::Dson]
        .iter()
        .flat_map(|&v| {
            domains.iter().flat_map(move |&d| {
                cfg.seeds.iter().map(move |&s| (v, d, s))
            })
        })
        .collect();
    let results: Vec<Result<SingleSourceResult>> = with_jobs(jobs, || {
        runs.par_iter()
            .map(|&(v, d, s)| run_single_source(cfg, v, d, s, &data))
            .collect()
    })?;

    let nd = domains.len();
    let mut acc = [vec![vec![Vec::new(); nd]; nd], vec![vec![Vec::new(); nd]; nd]];
    let mut errors = Vec::new();
    for r in results {
        match r {
            Ok(run) => {
                let m = if run.variant == VariantSpec::Bn { 0 } else { 1 };
                let si = domains.iter().position(|&d| d == run.source).unwrap();
                for (ti, &a) in run.accuracy.iter().enumerate() {
                    acc[m][si][ti].push(a);
                }
                if run.variant == VariantSpec::Dson {
                    io::save_checkpoint(
                        &run.net,
                        &out_dir.join(format!("ckpt_dson_single{}_s{}.json", run.source, run.seed)),
                    )?;
                }
            }
            Err(e) => errors.push(e.0),
        }
    }
    if !errors.is_empty() {
        return Err(LabError(errors.join("; ")));
    }

    let mean_grid = |g: &Vec<Vec<Vec<f64>>>| -> Vec<Vec<f64>> {
        g.iter()
            .map(|row| row.iter().map(|xs| mean_sd(xs).0).collect())
            .collect()
    };
    let bn = mean_grid(&acc[0]);
    let dson = mean_grid(&acc[1]);

    let mut header = vec![String::from("source")];
    for t in &domains {
        header.push(format!("target{}", t));
    }
    let mut bn_table = Table::new(header.clone());
    let mut delta_table = Table::new(header);
    for (si, &s) in domains.iter().enumerate() {
        bn_table.push_row(
            std::iter::once(s.to_string())
                .chain(bn[si].iter().map(|a| format!("{:.4}", a)))
                .collect(),
        );
        delta_table.push_row(
            std::iter::once(s.to_string())
                .chain(
                    dson[si]
                        .iter()
                        .zip(bn[si].iter())
                        .map(|(d, b)| format!("{:+.4}", d - b)),
                )
                .collect(),
        );
    }
    fs::write(out_dir.join("matrix_bn.csv"), bn_table.to_csv())?;
    fs::write(out_dir.join("matrix_bn.txt"), bn_table.to_aligned())?;
    fs::write(out_dir.join("matrix_dson_delta.csv"), delta_table.to_csv())?;
    fs::write(out_dir.join("matrix_dson_delta.txt"), delta_table.to_aligned())?;
    Ok(MatrixResult {
        bn,
        dson,
        domains,
        bn_table,
        delta_table,
    })
}

// ---------------------------------------------------------------------------
// weights report
// ---------------------------------------------------------------------------

pub struct WeightsReport {
    /// (domain, seed, single-source IN ratio, multi-source IN ratio).
    pub cells: Vec<(usize, u64, f64, f64)>,
    pub table: Table,
}

/// Read the DSON checkpoints written by `cmd_train` (multi-source) and
/// `cmd_single_source_matrix` (single-source) and report the learned IN
/// ratio (1 - w_d) per domain under both scenarios.
pub fn cmd_weights_report(cfg: &ExperimentConfig) -> Result<WeightsReport> {
    let out_dir = Path::new(&cfg.out_dir);
    let mut cells = Vec::new();
    for &d in &cfg.domains {
        for &seed in &cfg.seeds {
            let single = io::load_checkpoint(
                &out_dir.join(format!("ckpt_dson_single{}_s{}.json", d, seed)),
            )?;
            let single_ratio = 1.0 - single.mixture.weights_for(0)[0];

            // Multi-source: average domain d's weight over every sweep
            // checkpoint in which d was a source (target != d).
            let mut ratios = Vec::new();
            for &t in &cfg.domains {
                if t == d {
                    continue;
                }
                let ckpt = io::load_checkpoint(&out_dir.join(format!(
                    "ckpt_dson_t{}_s{}.json",
                    t, seed
                )))?;
                let sources: Vec<usize> =
                    cfg.domains.iter().copied().filter(|&x| x != t).collect();
                let branch = sources.iter().position(|&x| x == d).unwrap();
                ratios.push(1.0 - ckpt.mixture.weights_for(branch)[0]);
            }
            let multi_ratio = mean_sd(&ratios).0;
            cells.push((d, seed, single_ratio, multi_ratio));
        }
    }

    let mut table = Table::new(vec!["domain", "in_ratio_single", "in_ratio_multi"]);
    for &d in &cfg.domains {
        let single: Vec<f64> = cells
            .iter()
            .filter(|c| c.0 == d)
            .map(|c| c.2)
            .collect();
        let multi: Vec<f64> = cells
            .iter()
            .filter(|c| c.0 == d)
            .map(|c| c.3)
            .collect();
        table.push_row(vec![
            d.to_string(),
            format!("{:.4}", mean_sd(&single).0),
            format!("{:.4}", mean_sd(&multi).0),
        ]);
    }
    fs::write(out_dir.join("weights.csv"), table.to_csv())?;
    fs::write(out_dir.join("weights.txt"), table.to_aligned())?;
    Ok(WeightsReport { cells, table })
}

// ---------------------------------------------------------------------------
// grad-check and feature dumps
// ---------------------------------------------------------------------------

/// Run the oracle registry and render the report. The bool is the overall
/// pass flag.
pub fn cmd_grad_check(seed: u64) -> (Table, bool) {
    let report = oracle::run_all_checks(seed);
    let mut table = Table::new(vec!["check", "max_rel_err", "tolerance", "status"]);
    for check in &report.checks {
        table.push_row(vec![
            check.name.clone(),
            format!("{:.3e}", check.max_rel_err),
            format!("{:.0e}", check.tolerance),
            String::from(if check.pass { "pass" } else { "FAIL" }),
        ]);
    }
    (table, report.all_passed())
}

/// For every domain's test split, write the two-channel first-layer feature
/// dump under batch and instance statistics.
pub fn cmd_dump_features(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<PathBuf>> {
    let data = load_all(cfg)?;
    let out_dir = Path::new(&cfg.out_dir);
    fs::create_dir_all(out_dir)?;

    let (_, c, _, _) = data[0].1.images.dims();
    let classes = data
        .iter()
        .flat_map(|(_, test)| test.labels.iter())
        .max()
        .map(|&y| y + 1)
        .unwrap_or(0);
    let mut rng = Rng::new(seed).derive(0x6e6574);
    let net = DomainBranchNet::new(
        c,
        classes,
        cfg.domains.len(),
        norm_config(VariantSpec::Dson),
        &mut rng,
    );

    let mut written = Vec::new();
    for (i, &d) in cfg.domains.iter().enumerate() {
        let test = &data[i].1;
        for (mode, tag) in [(StatMode::Batch, "batch"), (StatMode::Instance, "instance")] {
            let rows = net.dump_features_2ch(&test.images, &test.labels, mode)?;
            let path = out_dir.join(format!("features_{}_d{}.csv", tag, d));
            fs::write(&path, io::features_csv(&rows))?;
            written.push(path);
        }
    }
    Ok(written)
}
