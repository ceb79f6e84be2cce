use dson_core::synth::{self, DatasetSpec, DomainSpec};
use dson_lab::config::{ExperimentConfig, VariantSpec};
use dson_lab::runner::{run_cell, CellKey};

fn domains_from(gains: [f64; 4], biases: [f64; 4], spread: f64) -> Vec<DomainSpec> {
    (0..4)
        .map(|d| DomainSpec {
            id: d,
            gain: vec![gains[d] - spread, gains[d], gains[d] + spread],
            bias: vec![biases[d] + spread, biases[d], biases[d] - spread],
            style_jitter: 0.1,
            pixel_noise: 0.05,
        })
        .collect()
}

fn main() {
    let candidates: &[(&str, [f64; 4], [f64; 4], f64)] = &[
        ("current", [0.6, 1.2, 1.8, 2.4], [-0.6, 0.0, 0.6, 1.2], 0.05),
        ("a", [1.0, 1.5, 2.0, 2.5], [-1.5, -0.5, 0.5, 1.5], 0.05),
        ("b", [2.5, 1.0, 2.0, 1.5], [-1.5, 1.5, -0.5, 0.5], 0.05),
        ("c", [1.0, 1.5, 2.0, 2.5], [-2.4, -0.8, 0.8, 2.4], 0.2),
    ];
    let spec = DatasetSpec::build(5, 3, 16, 16, 500, 200, synth::PRESET_SEED, 3.0).unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.iters = 400;
    cfg.log_every = 0;
    cfg.val_every = 100;

    for &(name, gains, biases, spread) in candidates {
        let data = synth::generate(&spec, &domains_from(gains, biases, spread)).unwrap();
        for variant in [VariantSpec::Bn, VariantSpec::Dson] {
            let mut accs = Vec::new();
            let mut ws = Vec::new();
            for target in 0..4 {
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
                accs.push(r.target_ensemble_accuracy.unwrap());
                ws.push(
                    r.final_w_per_domain.iter().sum::<f64>()
                        / r.final_w_per_domain.len() as f64,
                );
            }
            let mean = accs.iter().sum::<f64>() / 4.0;
            println!(
                "{} {:?}: targets {:?} mean {:.3} w {:?}",
                name,
                variant,
                accs.iter().map(|a| (a * 100.0).round() / 100.0).collect::<Vec<_>>(),
                mean,
                ws.iter().map(|w| (w * 100.0).round() / 100.0).collect::<Vec<_>>(),
            );
        }
    }
}
