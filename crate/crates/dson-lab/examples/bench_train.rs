use dson_lab::config::{ExperimentConfig, VariantSpec};
use dson_lab::runner::{run_cell, CellKey};
use dson_core::synth;

fn main() {
    let (spec, domains) = synth::default_four_domain_preset().unwrap();
    let data = synth::generate(&spec, &domains).unwrap();
    for (variant, val) in [(VariantSpec::Bn, 0), (VariantSpec::In, 0), (VariantSpec::In, 100), (VariantSpec::Dson, 0)] {
        let mut cfg = ExperimentConfig::default();
        cfg.iters = 200;
        cfg.log_every = 0;
        cfg.val_every = val;
        let t0 = std::time::Instant::now();
        run_cell(&cfg, CellKey { variant, target: 0, seed: 0 }, &data).unwrap();
        println!("{:?} val_every={}: {:.1?}", variant, val, t0.elapsed());
    }
}
