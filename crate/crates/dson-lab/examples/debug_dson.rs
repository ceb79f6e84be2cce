use dson_core::synth;
use dson_lab::config::{ExperimentConfig, VariantSpec};
use dson_lab::runner::{run_cell, CellKey};

fn main() {
    let (spec, domains) = synth::default_four_domain_preset().unwrap();
    let data = synth::generate(&spec, &domains).unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.iters = 1000;
    cfg.log_every = 100;
    cfg.val_every = 100;
    let cells = [
        (VariantSpec::Dson, 1usize),
        (VariantSpec::Dson, 2),
        (VariantSpec::Dson, 3),
        (VariantSpec::In, 0),
        (VariantSpec::In, 1),
        (VariantSpec::Dsbn, 1),
        (VariantSpec::Bn, 2),
        (VariantSpec::Bn, 3),
    ];
    for (variant, target) in cells {
        let t0 = std::time::Instant::now();
        let cell = run_cell(
            &cfg,
            CellKey {
                variant,
                target,
                seed: 0,
            },
        &data,
        )
        .unwrap();
        let r = &cell.outcome.report;
        println!(
            "{:?} t{} {:.0?}: loss {:?} val {:?} best {:.3} target {:?} branches {:?} w {:?}",
            variant,
            target,
            t0.elapsed(),
            r.iter_log
                .iter()
                .map(|v| (v.loss_total * 100.0).round() / 100.0)
                .collect::<Vec<_>>(),
            r.val_log
                .iter()
                .map(|v| (v.accuracy * 1000.0).round() / 1000.0)
                .collect::<Vec<_>>(),
            r.best_val_accuracy,
            r.target_ensemble_accuracy,
            r.target_branch_accuracy
                .iter()
                .map(|a| (a * 100.0).round() / 100.0)
                .collect::<Vec<_>>(),
            r.final_w_per_domain
                .iter()
                .map(|w| (w * 100.0).round() / 100.0)
                .collect::<Vec<_>>(),
        );
    }
}
