use dson_core::model::{DomainBranchNet, NetGrads};
use dson_core::norm::{NormConfig, Variant};
use dson_core::{Rng, Tensor4};

fn main() {
    let mut rng = Rng::new(1);
    let mut x = Tensor4::zeros(16, 3, 16, 16);
    rng.fill_uniform(&mut x, -1.0, 1.0);
    let y: Vec<usize> = (0..16).map(|i| i % 5).collect();
    for variant in [Variant::Bn, Variant::In, Variant::Dson] {
        let mut net = DomainBranchNet::new(3, 5, 3, NormConfig::new(variant), &mut rng);
        let mut grads = NetGrads::zeros_like(&net);
        let t0 = std::time::Instant::now();
        for _ in 0..20 {
            net.loss_and_grads(&x, &y, 0, &mut grads).unwrap();
        }
        println!("{:?}: {:.1?} per iter", variant, t0.elapsed() / 20);
    }
}
