use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dson_lab::config::{ExperimentConfig, TargetSpec, VariantSpec};
use dson_lab::runner;

/// Desk-scale domain-generalization experiments with mixed batch/instance
/// normalization.
#[derive(Parser)]
#[command(name = "dson-lab", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment config file (key = value lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's seed list with a single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to the config value or $DSON_LAB_OUT.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Normalization variant (bn, in, dsbn, sn, ibn, dson, dson-agnostic).
    #[arg(long)]
    variant: Option<VariantSpec>,
    /// Label-noise level in [0, 1].
    #[arg(long)]
    noise: Option<f64>,
    /// Worker threads for independent cells.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic multi-domain dataset files.
    GenData(CommonArgs),
    /// Leave-one-target-out training sweep for one variant.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Held-out target domain (omit to sweep all).
        #[arg(long)]
        target: Option<usize>,
        /// Freeze running stats and affine normalization parameters.
        #[arg(long)]
        freeze_bn: bool,
    },
    /// Run every variant over the (target, seed) grid and tabulate.
    Ablate(CommonArgs),
    /// Report learned IN ratios from existing checkpoints.
    WeightsReport(CommonArgs),
    /// Single-source training matrix: BN accuracies and DSON deltas.
    SingleSourceMatrix(CommonArgs),
    /// Check the numerical core against brute-force oracles.
    GradCheck(CommonArgs),
    /// Dump first-layer two-channel features per domain.
    DumpFeatures(CommonArgs),
}

fn load_config(common: &CommonArgs) -> Result<ExperimentConfig, runner::LabError> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| runner::LabError(format!("{}: {}", path.display(), e)))?;
            ExperimentConfig::parse(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.display().to_string();
    } else if common.config.is_none() || cfg.out_dir == ExperimentConfig::default().out_dir {
        if let Ok(env_out) = std::env::var("DSON_LAB_OUT") {
            cfg.out_dir = env_out;
        }
    }
    if let Some(variant) = common.variant {
        cfg.variant = variant;
        cfg.domain_specific_weights = variant.domain_specific_weights();
    }
    if let Some(noise) = common.noise {
        if !(0.0..=1.0).contains(&noise) {
            return Err(runner::LabError(format!(
                "noise level {} outside [0, 1]",
                noise
            )));
        }
        cfg.noise = noise;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), runner::LabError> {
    match cli.command {
        Command::GenData(common) => {
            let cfg = load_config(&common)?;
            let written = runner::cmd_gen_data(&cfg)?;
            for path in written {
                println!("wrote {}", path.display());
            }
            Ok(())
        }
        Command::Train {
            common,
            target,
            freeze_bn,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(t) = target {
                cfg.target = TargetSpec::One(t);
            }
            if freeze_bn {
                cfg.freeze_bn = true;
            }
            let table = runner::cmd_train(&cfg, common.jobs)?;
            print!("{}", table.to_aligned());
            Ok(())
        }
        Command::Ablate(common) => {
            let cfg = load_config(&common)?;
            let result = runner::cmd_ablate(&cfg, common.jobs)?;
            print!("{}", result.table.to_aligned());
            Ok(())
        }
        Command::WeightsReport(common) => {
            let cfg = load_config(&common)?;
            let report = runner::cmd_weights_report(&cfg)?;
            print!("{}", report.table.to_aligned());
            Ok(())
        }
        Command::SingleSourceMatrix(common) => {
            let cfg = load_config(&common)?;
            let result = runner::cmd_single_source_matrix(&cfg, common.jobs)?;
            println!("single-source accuracy (bn):");
            print!("{}", result.bn_table.to_aligned());
            println!();
            println!("dson minus bn:");
            print!("{}", result.delta_table.to_aligned());
            Ok(())
        }
        Command::GradCheck(common) => {
            let seed = common.seed.unwrap_or(0);
            let (table, passed) = runner::cmd_grad_check(seed);
            print!("{}", table.to_aligned());
            if passed {
                Ok(())
            } else {
                Err(runner::LabError(String::from("oracle checks failed")))
            }
        }
        Command::DumpFeatures(common) => {
            let cfg = load_config(&common)?;
            let seed = common.seed.unwrap_or(0);
            let written = runner::cmd_dump_features(&cfg, seed)?;
            for path in written {
                println!("wrote {}", path.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::FAILURE
        }
    }
}
