use ckgnn::data::{gen_sbm, SbmConfig};
use ckgnn::models::ModelKind;
use ckgnn::train::{make_split, split_rng, train, SplitSizes, TrainConfig};
use std::time::Instant;

#[test]
fn calibrate() {
    for (dim, lz) in [(16usize, 16usize), (16, 8), (8, 8)] {
        for kind in [ModelKind::Gcn, ModelKind::Ckgcn] {
            let t = Instant::now();
            let mut accs = vec![];
            for seed in 0..20u64 {
                let b = gen_sbm(&SbmConfig { n: 400, classes: 4, p_in: 0.05, p_out: 0.005, dim, signal: 1.0, seed }).unwrap();
                let m = make_split(b.labels(), SplitSizes { train_per_class: 20, val: 100, test: 200 }, &mut split_rng(seed)).unwrap();
                let mut c = TrainConfig::new(kind);
                c.seed = seed;
                c.latent_z = lz;
                let o = train(&b, &m, &c).unwrap();
                accs.push(o.metrics.test_acc);
            }
            let mean = accs.iter().sum::<f64>() / 20.0;
            eprintln!("dim {dim} z {lz} {kind}: mean {mean:.4} {:.1}s", t.elapsed().as_secs_f64());
        }
    }
}
