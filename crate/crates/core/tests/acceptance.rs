//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion that could be evaluated failed.

mod common;

use std::sync::Arc;
use std::time::{Duration, Instant};

use ckgnn::autodiff::{grad_check, Tape};
use ckgnn::data::{gen_sbm, DatasetBundle, SbmConfig};
use ckgnn::graph::{check_psd_decomposition, Pattern, PSD_TOL};
use ckgnn::kernel::{gaussian, kernel_on_edges, mmd_squared, KernelModel};
use ckgnn::models::{GraphInput, GraphModel, ModelKind, ModelParams};
use ckgnn::params::ParamStore;
use ckgnn::train::{
    make_semi_supervised_split, make_split, split_rng, train, train_model, train_selecting_latent,
    Objective, SplitSizes, TrainConfig, LATENT_CANDIDATES,
};
use ckgnn::Tensor;
use common::*;
use rand::rngs::mock::StepRng;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Environment variable naming a Cora file in the dataset text format.
const CORA_ENV: &str = "CKGNN_CORA";

enum Outcome {
    Pass(String),
    Fail(String),
    /// Could not be evaluated in this environment.
    NotRun(String),
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn within(outcome: Outcome, elapsed: Duration, limit: Duration) -> Outcome {
    match outcome {
        Outcome::Pass(d) if elapsed > limit => {
            Outcome::Fail(format!("{d}; took {elapsed:.1?}, limit {limit:?}"))
        }
        o => o,
    }
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = f64::INFINITY;
    let mut lib_worst = f64::INFINITY;
    for g in 0..20 {
        let n = rng.gen_range(10..=200);
        let p = rng.gen_range(1.0..6.0) / n as f64;
        let graph = er_graph(n, p, g % 2 == 0, &mut rng);
        let a_hat = graph.normalized_adjacency();
        worst = worst.min(jacobi_min_eig(&identity_minus(&a_hat)));
        lib_worst = lib_worst.min(check_psd_decomposition(&a_hat, PSD_TOL).unwrap().min_eig_i_minus_s);
    }
    check(
        worst >= -1e-8 && lib_worst >= -1e-8,
        format!("20 graphs, min eig(I-Â) = {worst:.3e} (Jacobi), {lib_worst:.3e} (library) >= -1e-8"),
    )
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let x = random_tensor(50, 10, &mut rng).map(|v| 2.0 * v);
    let mut store = ParamStore::new();
    let km = KernelModel::new(&mut store, 10, 4, 4, &mut rng).unwrap();
    let z = km.embed(&store, &x).unwrap();
    let mut gram = Tensor::zeros(50, 50);
    for i in 0..50 {
        for j in 0..50 {
            gram.set(i, j, gaussian(z.row(i), z.row(j)));
        }
    }
    let min_eig = jacobi_min_eig(&gram);
    let in_range = gram.data().iter().all(|&v| v > 0.0 && v <= 1.0);
    let unit_diag = (0..50).all(|i| gram.get(i, i) == 1.0);

    // The sparse evaluation on a complete pattern must agree with the Gram.
    let complete = Arc::new(
        Pattern::new(50, (0..=50).map(|i| i * 50).collect(), (0..50).flat_map(|_| 0..50).collect()).unwrap(),
    );
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let k = kernel_on_edges(&mut tape, zv, &complete).unwrap();
    let same = tape.value(k).data() == gram.data();
    check(
        min_eig >= -1e-8 && in_range && unit_diag && same,
        format!(
            "50 points, min eig = {min_eig:.3e}, values in (0,1]: {in_range}, unit diagonal: {unit_diag}, sparse = dense: {same}"
        ),
    )
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let graph = er_graph(10, 0.3, true, &mut rng);
    let x = random_tensor(10, 6, &mut rng);
    let input = GraphInput::new(x, graph.normalized_adjacency()).unwrap();
    let labels: Vec<usize> = (0..10).map(|i| i % 3).collect();
    let train_idx: Vec<usize> = (0..6).collect();
    let mut parts = Vec::new();
    let mut ok = true;
    for kind in ModelKind::ALL {
        let mut cfg = TrainConfig::new(kind);
        cfg.hidden = Some(4);
        cfg.heads = 2;
        cfg.latent_z = 2;
        cfg.lambda1 = 0.7;
        cfg.lambda2 = 0.3;
        let mut store = ParamStore::new();
        let model = ModelParams::build(&cfg.model_spec(6, 3), &mut store, &mut rng).unwrap();
        jitter_biases(&mut store, &mut rng);
        let obj = Objective::new(&model, &labels, &train_idx, &cfg).unwrap();
        let report = grad_check(
            |tape, s| {
                let pass = model.forward(tape, s, &input, false, &mut StepRng::new(0, 0))?;
                Ok(obj.assemble(tape, &model, s, &pass)?.total)
            },
            &store,
            1e-4,
            usize::MAX,
            &mut rng,
        )
        .unwrap();
        let covers_kernel = !kind.uses_kernel() || obj.plan.is_some();
        ok &= report.passes(1e-4) && report.checked == store.num_scalars() && covers_kernel;
        parts.push(format!(
            "{kind} {:.2e} ({} coords, {} one-sided)",
            report.max_rel_error, report.checked, report.one_sided
        ));
    }
    check(ok, format!("max rel error <= 1e-4: {}", parts.join(", ")))
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst = 0.0f64;
    let mut self_worst = 0.0f64;
    for _ in 0..50 {
        let d = rng.gen_range(1..6);
        let a = random_tensor(rng.gen_range(1..10), d, &mut rng);
        let b = random_tensor(rng.gen_range(1..10), d, &mut rng);
        worst = worst.max((mmd_squared(&a, &b, gaussian).unwrap() - brute_mmd(&a, &b)).abs());
        self_worst = self_worst.max(mmd_squared(&a, &a, gaussian).unwrap().abs());
    }
    let x = random_tensor(1, 3, &mut rng);
    let y = random_tensor(1, 3, &mut rng);
    let single = mmd_squared(&x, &y, gaussian).unwrap();
    let exact = single == 2.0 - 2.0 * gaussian(x.row(0), y.row(0));
    check(
        worst <= 1e-12 && self_worst <= 1e-12 && exact,
        format!("50 instances, |mmd - brute| = {worst:.2e}, MMD(S,S) = {self_worst:.2e}, singleton exact: {exact}"),
    )
}

fn criterion_5() -> Outcome {
    // Forward pass.
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut fwd = 0.0f64;
    for _ in 0..5 {
        let g = er_graph(30, 0.15, true, &mut rng);
        let x = random_tensor(30, 20, &mut rng);
        let cfg = TrainConfig::new(ModelKind::Ckgcn);
        let spec = cfg.model_spec(20, 4);
        let mut store = ParamStore::new();
        let model = ModelParams::build(&spec, &mut store, &mut rng).unwrap();
        make_encoder_constant(&mut store, spec.kernel_layers);
        let input = GraphInput::new(x.clone(), g.normalized_adjacency()).unwrap();
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, &store, &input, false, &mut StepRng::new(0, 0)).unwrap();
        let (oracle, ostore) = DuplicatedGcn::copy_from(&store, spec.dropout);
        let dense = oracle.dense_forward(&ostore, &x, &dense_normalized_adjacency(&g));
        fwd = fwd.max(tape.value(pass.logits).max_abs_diff(&dense));
    }

    // Training trajectory with λ1 = λ2 = 0.
    let bundle = gen_sbm(&SbmConfig {
        n: 120,
        classes: 3,
        p_in: 0.15,
        p_out: 0.01,
        dim: 16,
        signal: 2.0,
        seed: 5,
    })
    .unwrap();
    let masks = make_split(
        bundle.labels(),
        SplitSizes { train_per_class: 10, val: 30, test: 60 },
        &mut split_rng(5),
    )
    .unwrap();
    let mut cfg = TrainConfig::new(ModelKind::Ckgcn);
    cfg.lambda1 = 0.0;
    cfg.lambda2 = 0.0;
    cfg.epochs = 100;
    cfg.patience = 100;
    let spec = cfg.model_spec(bundle.dim(), bundle.num_classes());
    let mut store = ParamStore::new();
    let model = ModelParams::build(&spec, &mut store, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    make_encoder_constant(&mut store, spec.kernel_layers);
    let (oracle, mut ostore) = DuplicatedGcn::copy_from(&store, spec.dropout);
    let input = bundle.graph_input().unwrap();
    let run = |m: &dyn GraphModel, s: &mut ParamStore| {
        train_model(m, s, &input, bundle.labels(), &masks, &cfg, &mut ChaCha8Rng::seed_from_u64(7), &mut |_| {})
            .unwrap()
    };
    let m1 = run(&model, &mut store);
    let m2 = run(&oracle, &mut ostore);
    let mut traj = 0.0f64;
    for (a, b) in m1.epochs.iter().zip(&m2.epochs) {
        traj = traj
            .max((a.loss_total - b.loss_total).abs())
            .max((a.val_loss - b.val_loss).abs());
    }
    for name in ["W0", "W1"] {
        traj = traj.max(store.get(store.find(name).unwrap()).max_abs_diff(ostore.get(ostore.find(name).unwrap())));
    }
    let same_len = m1.epochs.len() == m2.epochs.len();
    check(
        fwd <= 1e-12 && traj <= 1e-10 && same_len,
        format!("forward max abs error {fwd:.2e} <= 1e-12; trajectory ({} epochs) max abs error {traj:.2e} <= 1e-10", m1.epochs.len()),
    )
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut worst = 0.0f64;
    let mut uniform = true;
    for kind in [ModelKind::Gat, ModelKind::Ckgat] {
        for trial in 0..5 {
            let g = er_graph(40, 0.1, trial % 2 == 0, &mut rng);
            let x = random_tensor(40, 12, &mut rng);
            let spec = TrainConfig::new(kind).model_spec(12, 3);
            let mut store = ParamStore::new();
            let model = ModelParams::build(&spec, &mut store, &mut rng).unwrap();
            let input = GraphInput::new(x, g.normalized_adjacency()).unwrap();
            let pattern = input.pattern().clone();
            for zero in [false, true] {
                if zero {
                    for layer in &model.heads {
                        for h in layer {
                            let t = store.get_mut(h.theta);
                            *t = Tensor::zeros(t.rows(), 1);
                        }
                    }
                }
                let mut tape = Tape::new();
                let pass = model.forward(&mut tape, &store, &input, false, &mut StepRng::new(0, 0)).unwrap();
                for &(_, _, t) in &pass.attention {
                    let v = tape.value(t).data();
                    for i in 0..pattern.n() {
                        let r = pattern.row_range(i);
                        let k = r.len() as f64;
                        let s: f64 = r.clone().map(|e| v[e]).sum();
                        worst = worst.max((s - 1.0).abs());
                        if zero {
                            uniform &= r.into_iter().all(|e| v[e] == 1.0 / k);
                        }
                    }
                }
            }
        }
    }
    check(
        worst <= 1e-12 && uniform,
        format!("max |row sum - 1| = {worst:.2e} <= 1e-12; θ=0 exactly uniform: {uniform}"),
    )
}

/// Synthetic protocol: 20 labeled nodes per class, 100 validation and 200
/// test nodes; seed `s` drives the graph, the split and training.
/// Returns test accuracy with the default latent width and with the width
/// selected on validation accuracy.
fn synthetic_run(kind: ModelKind, seed: u64) -> (f64, f64) {
    let bundle = gen_sbm(&SbmConfig {
        n: 400,
        classes: 4,
        p_in: 0.05,
        p_out: 0.005,
        dim: 16,
        signal: 1.0,
        seed,
    })
    .unwrap();
    let masks = make_split(
        bundle.labels(),
        SplitSizes { train_per_class: 20, val: 100, test: 200 },
        &mut split_rng(seed),
    )
    .unwrap();
    let mut cfg = TrainConfig::new(kind);
    cfg.seed = seed;
    let fixed = train(&bundle, &masks, &cfg).unwrap().metrics.test_acc;
    let (_, selected) = train_selecting_latent(&bundle, &masks, &cfg, &LATENT_CANDIDATES).unwrap();
    (fixed, selected.metrics.test_acc)
}

fn criterion_7() -> Outcome {
    let means = |kind| {
        let runs: Vec<(f64, f64)> = (0..5).map(|s| synthetic_run(kind, s)).collect();
        (
            runs.iter().map(|r| r.0).sum::<f64>() / 5.0,
            runs.iter().map(|r| r.1).sum::<f64>() / 5.0,
        )
    };
    let (gcn, _) = means(ModelKind::Gcn);
    let (ck_fixed, ckgcn) = means(ModelKind::Ckgcn);
    check(
        gcn >= 0.85 && ckgcn >= gcn - 0.01,
        format!(
            "5 seeds, GCN mean test acc {gcn:.4} >= 0.85; CKGCN (latent 8/16 chosen on validation) {ckgcn:.4} >= GCN - 0.01 [latent fixed at 16: {ck_fixed:.4}]"
        ),
    )
}

fn criterion_8() -> Outcome {
    let Ok(path) = std::env::var(CORA_ENV) else {
        return Outcome::NotRun(format!("no converted Cora file; set {CORA_ENV}"));
    };
    let bundle = match DatasetBundle::load(&path) {
        Ok(b) => b,
        Err(e) => return Outcome::Fail(format!("cannot load {path}: {e}")),
    };
    let mut means = Vec::new();
    for kind in [ModelKind::Gcn, ModelKind::Ckgcn] {
        let mut total = 0.0;
        for seed in 0..5 {
            let masks = match bundle.masks() {
                Some(m) => m.clone(),
                None => make_semi_supervised_split(bundle.labels(), &mut split_rng(seed)).unwrap(),
            };
            let mut cfg = TrainConfig::new(kind);
            cfg.seed = seed;
            match train_selecting_latent(&bundle, &masks, &cfg, &LATENT_CANDIDATES) {
                Ok((_, out)) => total += out.metrics.test_acc,
                Err(e) => return Outcome::Fail(format!("{kind} seed {seed}: {e}")),
            }
        }
        means.push(100.0 * total / 5.0);
    }
    let (gcn, ckgcn) = (means[0], means[1]);
    check(
        (gcn - 81.5).abs() <= 2.0 && ckgcn >= gcn,
        format!("n={} |E|={}, GCN {gcn:.2}% within 81.5±2.0; CKGCN {ckgcn:.2}% >= GCN", bundle.n(), bundle.graph().num_edges()),
    )
}

fn criterion_9() -> Outcome {
    let bundle = gen_sbm(&SbmConfig {
        n: 150,
        classes: 3,
        p_in: 0.1,
        p_out: 0.01,
        dim: 16,
        signal: 1.0,
        seed: 9,
    })
    .unwrap();
    let masks = make_split(
        bundle.labels(),
        SplitSizes { train_per_class: 10, val: 40, test: 80 },
        &mut split_rng(9),
    )
    .unwrap();
    let mut ok = true;
    for kind in ModelKind::ALL {
        let mut cfg = TrainConfig::new(kind);
        cfg.epochs = 30;
        cfg.seed = 9;
        let a = train(&bundle, &masks, &cfg).unwrap();
        let b = train(&bundle, &masks, &cfg).unwrap();
        let bits = |m: &ckgnn::train::Metrics| -> Vec<u64> {
            m.epochs
                .iter()
                .flat_map(|e| {
                    [e.loss_ce, e.loss_kernel.unwrap_or(0.0), e.loss_diff.unwrap_or(0.0), e.loss_l2, e.loss_total, e.train_acc, e.val_acc, e.val_loss]
                })
                .map(f64::to_bits)
                .collect()
        };
        ok &= bits(&a.metrics) == bits(&b.metrics) && a.metrics == b.metrics && a.store == b.store;
    }
    check(ok, "4 models x 30 epochs, repeated runs bit-identical".into())
}

fn main() {
    let criteria: [(&str, fn() -> Outcome, Duration); 9] = [
        ("indefinite-kernel property", criterion_1, Duration::from_secs(10)),
        ("learned-kernel validity", criterion_2, Duration::from_secs(5)),
        ("gradient correctness", criterion_3, Duration::from_secs(60)),
        ("MMD oracle equivalence", criterion_4, Duration::from_secs(60)),
        ("reduction identity", criterion_5, Duration::from_secs(60)),
        ("attention normalization", criterion_6, Duration::from_secs(60)),
        ("synthetic end-to-end", criterion_7, Duration::from_secs(120)),
        ("Cora-scale spot check", criterion_8, Duration::from_secs(1800)),
        ("determinism", criterion_9, Duration::from_secs(60)),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (k, (name, run, limit)) in criteria.iter().enumerate() {
        let id = k + 1;
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str()) || *f == id.to_string()) {
            continue;
        }
        let start = Instant::now();
        let outcome = within(run(), start.elapsed(), *limit);
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Outcome::Pass(d) => println!("PASS [{id}] {name}: {d} ({secs:.2}s)"),
            Outcome::Fail(d) => {
                failed += 1;
                println!("FAIL [{id}] {name}: {d} ({secs:.2}s)");
            }
            Outcome::NotRun(d) => println!("FAIL [{id}] {name}: not evaluated, {d}"),
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

