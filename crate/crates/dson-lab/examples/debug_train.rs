use dson_lab::config::{ExperimentConfig, VariantSpec};
use dson_lab::runner::{run_cell, CellKey};
use dson_core::synth;

fn main() {
    let (spec, domains) = synth::default_four_domain_preset().unwrap();
    let data = synth::generate(&spec, &domains).unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.iters = 200;
    cfg.log_every = 20;
    cfg.val_every = 50;
    let cell = run_cell(&cfg, CellKey { variant: VariantSpec::Bn, target: 0, seed: 0 }, &data).unwrap();
    for r in &cell.outcome.report.iter_log {
        println!("iter {:4} eta {:.4} loss {:.4} per-domain {:?}", r.iter, r.eta, r.loss_total, r.loss_per_domain.iter().map(|l| (l*100.0).round()/100.0).collect::<Vec<_>>());
    }
    for v in &cell.outcome.report.val_log {
        println!("val iter {:4} acc {:.3}", v.iter, v.accuracy);
    }
}
