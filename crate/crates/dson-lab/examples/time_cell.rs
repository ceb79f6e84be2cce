use dson_lab::config::ExperimentConfig;
use dson_lab::runner::{run_cell, CellKey};
use dson_lab::config::VariantSpec;
use dson_core::synth;

fn main() {
    let (spec, domains) = synth::default_four_domain_preset().unwrap();
    let t0 = std::time::Instant::now();
    let data = synth::generate(&spec, &domains).unwrap();
    println!("generate: {:.1?}", t0.elapsed());
    let cfg = ExperimentConfig::default();
    let t0 = std::time::Instant::now();
    let cell = run_cell(&cfg, CellKey { variant: VariantSpec::Dson, target: 0, seed: 0 }, &data).unwrap();
    println!("cell: {:.1?} target acc {:?}", t0.elapsed(), cell.outcome.report.target_ensemble_accuracy);
    let t0 = std::time::Instant::now();
    let cell = run_cell(&cfg, CellKey { variant: VariantSpec::Bn, target: 0, seed: 0 }, &data).unwrap();
    println!("bn cell: {:.1?} target acc {:?}", t0.elapsed(), cell.outcome.report.target_ensemble_accuracy);
}
