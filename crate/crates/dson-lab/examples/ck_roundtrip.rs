use std::path::Path;
use dson_lab::config::{ExperimentConfig, TargetSpec};
use dson_lab::{io, runner};

fn main() {
    let mut cfg = ExperimentConfig::default();
    cfg.domains = vec![0, 1, 2];
    cfg.seeds = vec![0];
    cfg.iters = 4;
    cfg.batch_per_domain = 4;
    cfg.log_every = 2;
    cfg.val_every = 2;
    cfg.classes = 3;
    cfg.height = 8;
    cfg.width = 8;
    cfg.train_per_domain = 12;
    cfg.test_per_domain = 8;
    cfg.data_dir = String::from("/tmp/ckrepro/data");
    cfg.out_dir = String::from("/tmp/ckrepro/out");
    cfg.target = TargetSpec::One(1);
    runner::cmd_gen_data(&cfg).unwrap();
    runner::cmd_train(&cfg, 1).unwrap();
    let path = Path::new("/tmp/ckrepro/out/ckpt_dson_t1_s0.json");
    let net = io::load_checkpoint(path).unwrap();
    io::save_checkpoint(&net, Path::new("/tmp/ckrepro/out/copy.json")).unwrap();
}
