mod common;

use ckgnn::autodiff::{grad_check, Tape};
use ckgnn::kernel::gaussian;
use ckgnn::models::{predict, GraphInput, GraphModel, ModelKind, ModelParams, ModelSpec};
use ckgnn::params::ParamStore;
use ckgnn::train::{Objective, TrainConfig};
use ckgnn::{Graph, Tensor};
use common::*;
use rand::rngs::mock::StepRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_spec(kind: ModelKind, d: usize, c: usize) -> ModelSpec {
    let mut cfg = TrainConfig::new(kind);
    cfg.hidden = Some(4);
    cfg.heads = 2;
    cfg.latent_z = 2;
    cfg.model_spec(d, c)
}

fn setup(kind: ModelKind, seed: u64) -> (ModelParams, ParamStore, GraphInput, Graph) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = er_graph(10, 0.3, true, &mut rng);
    let x = random_tensor(10, 6, &mut rng);
    let mut store = ParamStore::new();
    let model = ModelParams::build(&small_spec(kind, 6, 3), &mut store, &mut rng).unwrap();
    let input = GraphInput::new(x, g.normalized_adjacency()).unwrap();
    (model, store, input, g)
}

fn eval_pass(model: &ModelParams, store: &ParamStore, input: &GraphInput) -> (Tape, ckgnn::models::ForwardPass) {
    let mut tape = Tape::new();
    let pass = model
        .forward(&mut tape, store, input, false, &mut StepRng::new(0, 0))
        .unwrap();
    (tape, pass)
}

#[test]
fn outputs_are_row_stochastic() {
    for kind in ModelKind::ALL {
        let (model, store, input, _) = setup(kind, 1);
        let p = predict(&model, &store, &input).unwrap();
        for i in 0..p.rows() {
            let s: f64 = p.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "{kind}: row {i} sums to {s}");
            assert!(p.row(i).iter().all(|&v| v >= 0.0));
        }
    }
}

#[test]
fn permutation_equivariance() {
    for kind in ModelKind::ALL {
        let (model, store, input, g) = setup(kind, 2);
        let n = g.n();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(9));
        // Node i of the original graph becomes node perm[i].
        let mut inv = vec![0; n];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let g2 = Graph::new(n, g.edges().iter().map(|&(i, j, w)| (perm[i], perm[j], w))).unwrap();
        let x2 = input.features.gather_rows(&inv);
        let input2 = GraphInput::new(x2, g2.normalized_adjacency()).unwrap();
        let p1 = predict(&model, &store, &input).unwrap();
        let p2 = predict(&model, &store, &input2).unwrap();
        let back = p2.gather_rows(&perm);
        assert!(back.max_abs_diff(&p1) < 1e-12, "{kind}: {}", back.max_abs_diff(&p1));
    }
}

#[test]
fn attention_rows_sum_to_one() {
    for kind in [ModelKind::Gat, ModelKind::Ckgat] {
        for seed in 0..5 {
            let (model, store, input, _) = setup(kind, seed);
            let (tape, pass) = eval_pass(&model, &store, &input);
            assert_eq!(pass.attention.len(), 2 + 1);
            let pattern = input.pattern();
            for &(_, _, t) in &pass.attention {
                let v = tape.value(t);
                for i in 0..pattern.n() {
                    let s: f64 = pattern.row_range(i).map(|e| v.data()[e]).sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn zero_theta_gives_uniform_attention() {
    for kind in [ModelKind::Gat, ModelKind::Ckgat] {
        let (model, mut store, input, _) = setup(kind, 4);
        for layer in &model.heads {
            for h in layer {
                let t = store.get_mut(h.theta);
                *t = Tensor::zeros(t.rows(), 1);
            }
        }
        let (tape, pass) = eval_pass(&model, &store, &input);
        let pattern = input.pattern();
        for &(_, _, t) in &pass.attention {
            let v = tape.value(t);
            for i in 0..pattern.n() {
                let r = pattern.row_range(i);
                let k = r.len() as f64;
                for e in r {
                    assert_eq!(v.data()[e], 1.0 / k);
                }
            }
        }
    }
}

#[test]
fn single_head_gat_with_zero_theta_is_mean_aggregation() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let g = er_graph(10, 0.3, false, &mut rng);
    let x = random_tensor(10, 6, &mut rng);
    let mut spec = small_spec(ModelKind::Gat, 6, 3);
    spec.heads = 1;
    let mut store = ParamStore::new();
    let model = ModelParams::build(&spec, &mut store, &mut rng).unwrap();
    for layer in &model.heads {
        let t = store.get_mut(layer[0].theta);
        *t = Tensor::zeros(t.rows(), 1);
    }
    let input = GraphInput::new(x.clone(), g.normalized_adjacency()).unwrap();
    let (tape, pass) = eval_pass(&model, &store, &input);

    // Row-normalised Ã as a dense oracle.
    let mut mean = Tensor::identity(10);
    for &(i, j, _) in g.edges() {
        mean.set(i, j, 1.0);
        mean.set(j, i, 1.0);
    }
    for i in 0..10 {
        let d: f64 = mean.row(i).iter().sum();
        for v in mean.row_mut(i) {
            *v /= d;
        }
    }
    let w0 = store.get(model.weights[0]);
    let w1 = store.get(model.weights[1]);
    let h = relu(&mean.matmul(&x.matmul(w0).unwrap()).unwrap());
    let out = mean.matmul(&h.matmul(w1).unwrap()).unwrap();
    assert!(tape.value(pass.logits).max_abs_diff(&out) < 1e-12);
}

#[test]
fn constant_kernel_ckgcn_matches_duplicated_gcn() {
    for seed in 0..5 {
        let (model, mut store, input, g) = setup(ModelKind::Ckgcn, seed);
        make_encoder_constant(&mut store, model.spec.kernel_layers);
        let (tape, pass) = eval_pass(&model, &store, &input);
        assert!(tape.value(pass.kernel.unwrap()).data().iter().all(|&k| k == 1.0));
        let (oracle, ostore) = DuplicatedGcn::copy_from(&store, 0.5);
        let dense = oracle.dense_forward(&ostore, &input.features, &dense_normalized_adjacency(&g));
        let err = tape.value(pass.logits).max_abs_diff(&dense);
        assert!(err < 1e-12, "seed {seed}: {err}");
    }
}

#[test]
fn kernel_is_computed_from_raw_features() {
    let (model, store, input, _) = setup(ModelKind::Ckgat, 6);
    let (tape, pass) = eval_pass(&model, &store, &input);
    let z = model.kernel.as_ref().unwrap().embed(&store, &input.features).unwrap();
    let k = tape.value(pass.kernel.unwrap());
    for (e, (i, j)) in input.pattern().pairs().into_iter().enumerate() {
        assert!((k.data()[e] - gaussian(z.row(i), z.row(j))).abs() < 1e-15);
    }
}

#[test]
fn total_loss_gradients_match_finite_differences() {
    for (kind, seed) in ModelKind::ALL.into_iter().flat_map(|k| [7, 9, 11].map(move |s| (k, s))) {
        let (model, mut store, input, _) = setup(kind, seed);
        jitter_biases(&mut store, &mut ChaCha8Rng::seed_from_u64(seed));
        let labels: Vec<usize> = (0..10).map(|i| i % 3).collect();
        let train: Vec<usize> = (0..6).collect();
        let mut cfg = TrainConfig::new(kind);
        cfg.lambda1 = 0.7;
        cfg.lambda2 = 0.3;
        let obj = Objective::new(&model, &labels, &train, &cfg).unwrap();
        assert_eq!(obj.plan.is_some(), kind.uses_kernel());
        let report = grad_check(
            |tape, s| {
                let pass = model.forward(tape, s, &input, false, &mut StepRng::new(0, 0))?;
                Ok(obj.assemble(tape, &model, s, &pass)?.total)
            },
            &store,
            1e-4,
            usize::MAX,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert_eq!(report.checked, store.num_scalars());
        assert!(report.passes(1e-4), "{kind} seed {seed}: {report:?}");
    }
}

#[test]
fn dropout_only_acts_in_training() {
    let (model, store, input, _) = setup(ModelKind::Gcn, 8);
    let (t1, p1) = eval_pass(&model, &store, &input);
    let (t2, p2) = eval_pass(&model, &store, &input);
    assert_eq!(t1.value(p1.logits), t2.value(p2.logits));
    let mut tape = Tape::new();
    let pass = model
        .forward(&mut tape, &store, &input, true, &mut ChaCha8Rng::seed_from_u64(1))
        .unwrap();
    assert_ne!(tape.value(pass.logits), t1.value(p1.logits));
}
