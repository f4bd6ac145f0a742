//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::sync::Arc;

use ckgnn::autodiff::{Tape, Var};
use ckgnn::graph::{Graph, Pattern};
use ckgnn::models::{ForwardPass, GraphInput, GraphModel};
use ckgnn::params::{ParamId, ParamStore};
use ckgnn::{Result, SparseMatrix, Tensor};
use rand::{Rng, RngCore};

/// Erdős–Rényi graph; weights uniform in `[0.1, 2)` when `weighted`.
pub fn er_graph(n: usize, p: f64, weighted: bool, rng: &mut impl Rng) -> Graph {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.gen::<f64>() < p {
                let w = if weighted { rng.gen_range(0.1..2.0) } else { 1.0 };
                edges.push((i, j, w));
            }
        }
    }
    Graph::new(n, edges).unwrap()
}

pub fn random_tensor(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(rows, cols, data).unwrap()
}

/// Smallest eigenvalue of a dense symmetric matrix by cyclic Jacobi
/// rotations.
pub fn jacobi_min_eig(m: &Tensor) -> f64 {
    let n = m.rows();
    let mut a: Vec<Vec<f64>> = (0..n).map(|i| m.row(i).to_vec()).collect();
    let total: f64 = a.iter().flatten().map(|v| v * v).sum();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off <= 1e-26 * total {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i][i]).fold(f64::INFINITY, f64::min)
}

/// `I - S` as a dense matrix.
pub fn identity_minus(s: &SparseMatrix) -> Tensor {
    let mut d = s.to_dense().map(|v| -v);
    for i in 0..s.n() {
        d.set(i, i, d.get(i, i) + 1.0);
    }
    d
}

/// Dense `Â` straight from the edge list.
pub fn dense_normalized_adjacency(g: &Graph) -> Tensor {
    let n = g.n();
    let mut a = Tensor::identity(n);
    for &(i, j, w) in g.edges() {
        a.set(i, j, w);
        a.set(j, i, w);
    }
    let deg: Vec<f64> = (0..n).map(|i| a.row(i).iter().sum()).collect();
    for i in 0..n {
        for j in 0..n {
            a.set(i, j, a.get(i, j) / (deg[i] * deg[j]).sqrt());
        }
    }
    a
}

/// Explicit double sum `mean k(a,a') + mean k(b,b') - 2 mean k(a,b)`.
pub fn brute_mmd(a: &Tensor, b: &Tensor) -> f64 {
    let k = |x: &[f64], y: &[f64]| {
        let mut d = 0.0;
        for t in 0..x.len() {
            d += (x[t] - y[t]) * (x[t] - y[t]);
        }
        (-d).exp()
    };
    let mut aa = 0.0;
    for i in 0..a.rows() {
        for j in 0..a.rows() {
            aa += k(a.row(i), a.row(j));
        }
    }
    let mut bb = 0.0;
    for i in 0..b.rows() {
        for j in 0..b.rows() {
            bb += k(b.row(i), b.row(j));
        }
    }
    let mut ab = 0.0;
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            ab += k(a.row(i), b.row(j));
        }
    }
    let (na, nb) = (a.rows() as f64, b.rows() as f64);
    aa / (na * na) + bb / (nb * nb) - 2.0 * ab / (na * nb)
}

pub fn relu(t: &Tensor) -> Tensor {
    t.map(|v| v.max(0.0))
}

pub fn concat_cols(a: &Tensor, b: &Tensor) -> Tensor {
    let rows: Vec<Vec<f64>> = (0..a.rows())
        .map(|i| a.row(i).iter().chain(b.row(i)).copied().collect())
        .collect();
    Tensor::from_rows(&rows)
}

pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::from_vec(a.rows(), a.cols(), data).unwrap()
}

/// Two-layer GCN whose hidden layer concatenates `ÂHW` with itself and
/// whose output layer sums two copies of `ÂHW`.
pub struct DuplicatedGcn {
    pub w0: ParamId,
    pub w1: ParamId,
    pub dropout: f64,
}

impl DuplicatedGcn {
    /// Copies `W0` and `W1` out of `src` into a fresh store.
    pub fn copy_from(src: &ParamStore, dropout: f64) -> (Self, ParamStore) {
        let mut store = ParamStore::new();
        let w0 = store.add("W0", src.get(src.find("W0").unwrap()).clone(), true);
        let w1 = store.add("W1", src.get(src.find("W1").unwrap()).clone(), true);
        (Self { w0, w1, dropout }, store)
    }

    /// Dense evaluation-mode forward pass.
    pub fn dense_forward(&self, store: &ParamStore, x: &Tensor, a_hat: &Tensor) -> Tensor {
        let y = a_hat.matmul(&x.matmul(store.get(self.w0)).unwrap()).unwrap();
        let h = relu(&concat_cols(&y, &y));
        let o = a_hat.matmul(&h.matmul(store.get(self.w1)).unwrap()).unwrap();
        add(&o, &o)
    }
}

impl GraphModel for DuplicatedGcn {
    fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        input: &GraphInput,
        train: bool,
        rng: &mut dyn RngCore,
    ) -> Result<ForwardPass> {
        let pattern: &Arc<Pattern> = input.pattern();
        let x = tape.constant(input.features.clone());
        let a = tape.constant(Tensor::column(input.a_hat.values().to_vec()));
        let hd = tape.dropout(x, self.dropout, train, rng)?;
        let w0 = tape.param(store, self.w0);
        let hw = tape.matmul(hd, w0)?;
        let y1 = tape.spmm(pattern, a, hw)?;
        let y2 = tape.spmm(pattern, a, hw)?;
        let cat = tape.concat_cols(&[y1, y2])?;
        let h = tape.relu(cat)?;
        let hd = tape.dropout(h, self.dropout, train, rng)?;
        let w1 = tape.param(store, self.w1);
        let hw = tape.matmul(hd, w1)?;
        let o1 = tape.spmm(pattern, a, hw)?;
        let o2 = tape.spmm(pattern, a, hw)?;
        let logits: Var = tape.add(o1, o2)?;
        Ok(ForwardPass {
            features: x,
            logits,
            embeddings: None,
            kernel: None,
            composite: None,
            attention: Vec::new(),
        })
    }
}

/// Zeroes the last encoder layer so every node embeds to the origin and
/// `K ≡ 1`.
pub fn make_encoder_constant(store: &mut ParamStore, layers: usize) {
    let last = layers - 1;
    for name in [format!("enc{last}.w"), format!("enc{last}.b")] {
        let id = store.find(&name).unwrap();
        let t = store.get_mut(id);
        *t = Tensor::zeros(t.rows(), t.cols());
    }
}

/// Moves zero-initialised biases off zero so no ReLU sits exactly on its
/// kink during finite differencing.
pub fn jitter_biases(store: &mut ParamStore, rng: &mut impl Rng) {
    let ids: Vec<ParamId> = store.iter().filter(|(_, p)| p.name.ends_with(".b")).map(|(id, _)| id).collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
    }
}
