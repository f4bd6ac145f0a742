//! The learnable feature kernel and the losses that shape it.
//!
//! `k_φ(x_i, x_j) = exp(-‖f_enc(x_i) - f_enc(x_j)‖²)` where `f_enc` is the
//! encoder half of a small autoencoder. It is only ever evaluated on the
//! stored entries of `Ã` (for aggregation) and on pairs of labeled training
//! nodes (for the class-separation losses).

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{Pattern, SparseMatrix};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// `exp(-‖a - b‖²)`.
pub fn gaussian(a: &[f64], b: &[f64]) -> f64 {
    (-a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Encoder/decoder MLP pair whose encoder defines the kernel.
///
/// Affine layers with ReLU between them and no activation after the last
/// layer of either half.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelModel {
    pub encoder: Vec<Affine>,
    pub decoder: Vec<Affine>,
    input_dim: usize,
    latent_dim: usize,
}

/// Layer widths `d = w_0 > ... > w_L = z`, geometrically spaced.
pub fn encoder_widths(input_dim: usize, latent_dim: usize, layers: usize) -> Vec<usize> {
    let ratio = latent_dim as f64 / input_dim as f64;
    (0..=layers)
        .map(|k| {
            if k == 0 {
                input_dim
            } else if k == layers {
                latent_dim
            } else {
                let w = (input_dim as f64 * ratio.powf(k as f64 / layers as f64)).round() as usize;
                w.clamp(latent_dim, input_dim)
            }
        })
        .collect()
}

impl KernelModel {
    /// Registers encoder and decoder parameters in `store`. Biases start at
    /// zero, weights Glorot-uniform. None of them take weight decay.
    pub fn new(
        store: &mut ParamStore,
        input_dim: usize,
        latent_dim: usize,
        layers_per_side: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if layers_per_side == 0 {
            return Err(Error::InvalidArgument(
                "kernel autoencoder needs at least one layer per side".into(),
            ));
        }
        if latent_dim == 0 || latent_dim > input_dim {
            return Err(Error::InvalidArgument(format!(
                "latent width {latent_dim} must be in 1..={input_dim}"
            )));
        }
        let widths = encoder_widths(input_dim, latent_dim, layers_per_side);
        let layer = |store: &mut ParamStore, name: String, a: usize, b: usize, rng: &mut _| Affine {
            weight: store.add_glorot(format!("{name}.w"), a, b, false, rng),
            bias: store.add(format!("{name}.b"), Tensor::zeros(1, b), false),
        };
        let encoder = widths
            .windows(2)
            .enumerate()
            .map(|(k, w)| layer(store, format!("enc{k}"), w[0], w[1], rng))
            .collect();
        let rev: Vec<usize> = widths.iter().rev().copied().collect();
        let decoder = rev
            .windows(2)
            .enumerate()
            .map(|(k, w)| layer(store, format!("dec{k}"), w[0], w[1], rng))
            .collect();
        Ok(Self {
            encoder,
            decoder,
            input_dim,
            latent_dim,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.encoder
            .iter()
            .chain(&self.decoder)
            .flat_map(|a| [a.weight, a.bias])
    }

    /// `x̄_i = f_dec(z_i)`.
    pub fn decode(&self, tape: &mut Tape, store: &ParamStore, z: Var) -> Result<Var> {
        Self::mlp(tape, store, &self.decoder, z)
    }

    fn mlp(tape: &mut Tape, store: &ParamStore, layers: &[Affine], x: Var) -> Result<Var> {
        let mut h = x;
        for (k, l) in layers.iter().enumerate() {
            let w = tape.param(store, l.weight);
            let b = tape.param(store, l.bias);
            h = tape.matmul(h, w)?;
            h = tape.add_row(h, b)?;
            if k + 1 < layers.len() {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    /// `z_i = f_enc(x_i)`.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let cols = tape.value(x).cols();
        if cols != self.input_dim {
            return Err(Error::shape(
                "autoencoder",
                format!("input width {cols}, model expects {}", self.input_dim),
            ));
        }
        Self::mlp(tape, store, &self.encoder, x)
    }

    /// `(Z, X̄)` with `X̄ = f_dec(f_enc(X))`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<(Var, Var)> {
        let z = self.encode(tape, store, x)?;
        let xbar = self.decode(tape, store, z)?;
        Ok((z, xbar))
    }

    /// Embeddings outside of any training step.
    pub fn embed(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let z = self.encode(&mut tape, store, xv)?;
        Ok(tape.value(z).clone())
    }
}

/// `Σ_i ‖x_i - x̄_i‖²`.
pub fn reconstruction_loss(tape: &mut Tape, x: Var, xbar: Var) -> Result<Var> {
    let d = tape.sub(xbar, x)?;
    let sq = tape.square(d)?;
    tape.sum(sq)
}

/// Kernel values over the stored entries of `pattern`, as an `nnz x 1`
/// tape variable. Fails unless the result is a valid [`SparseKernel`].
pub fn kernel_on_edges(tape: &mut Tape, z: Var, pattern: &Arc<Pattern>) -> Result<Var> {
    let rows = tape.value(z).rows();
    if rows != pattern.n() {
        return Err(Error::shape(
            "kernel_on_edges",
            format!("{rows} embeddings for n={}", pattern.n()),
        ));
    }
    if !pattern.is_structurally_symmetric() {
        return Err(Error::InvalidSparse("kernel pattern must be symmetric".into()));
    }
    let pairs = Arc::new(pattern.pairs());
    let d = tape.neg_sqdist_on_pairs(z, &pairs)?;
    let k = tape.exp(d)?;
    validate_kernel_values(pattern, tape.value(k).data())?;
    Ok(k)
}

/// Off-diagonal values must lie in `(0, 1]`, except that an exact `0.0` is
/// accepted: it is `exp(-d)` for `d` beyond the `f64` underflow threshold
/// (about 745), which well-separated embeddings do reach during training.
fn validate_kernel_values(pattern: &Pattern, values: &[f64]) -> Result<()> {
    for ((&i, &j), &v) in pattern.row_of().iter().zip(pattern.col_idx()).zip(values) {
        let ok = if i == j { v == 1.0 } else { (0.0..=1.0).contains(&v) };
        if !ok {
            return Err(Error::KernelRange {
                row: i,
                col: j,
                value: v,
            });
        }
    }
    Ok(())
}

/// Learned kernel evaluated on a symmetric pattern: values in `(0, 1]`,
/// unit diagonal, bit-symmetric.
#[derive(Debug, Clone)]
pub struct SparseKernel(SparseMatrix);

impl SparseKernel {
    /// Evaluates `k_φ` on every stored entry of `pattern`.
    pub fn evaluate(
        model: &KernelModel,
        store: &ParamStore,
        x: &Tensor,
        pattern: &Arc<Pattern>,
    ) -> Result<Self> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let z = model.encode(&mut tape, store, xv)?;
        let k = kernel_on_edges(&mut tape, z, pattern)?;
        Self::from_matrix(SparseMatrix::new(
            Arc::clone(pattern),
            tape.value(k).data().to_vec(),
        )?)
    }

    /// Wraps precomputed values after checking the kernel invariants.
    pub fn from_matrix(m: SparseMatrix) -> Result<Self> {
        validate_kernel_values(m.pattern(), m.values())?;
        if !m.is_symmetric() {
            let (i, j, _) = m
                .entries()
                .find(|&(i, j, v)| m.get(j, i).to_bits() != v.to_bits())
                .expect("asymmetric matrix has a witness");
            return Err(Error::Asymmetric(i, j));
        }
        Ok(Self(m))
    }

    pub fn matrix(&self) -> &SparseMatrix {
        &self.0
    }
}

/// `K̂ = K ⊙ Â` on a shared pattern.
pub fn composite_kernel(k: &SparseKernel, a_hat: &SparseMatrix) -> Result<SparseMatrix> {
    compose(k.matrix(), a_hat)
}

/// Element-wise product of two matrices with identical patterns.
pub fn compose(a: &SparseMatrix, b: &SparseMatrix) -> Result<SparseMatrix> {
    if !a.same_pattern(b) {
        return Err(Error::PatternMismatch);
    }
    let values = a.values().iter().zip(b.values()).map(|(x, y)| x * y).collect();
    a.with_values(values)
}

/// Biased (V-statistic) estimate of `MMD²` between the row sets of `a`
/// and `b`.
pub fn mmd_squared(a: &Tensor, b: &Tensor, k: impl Fn(&[f64], &[f64]) -> f64) -> Result<f64> {
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::TooFew {
            what: "samples per set",
            needed: 1,
            got: 0,
        });
    }
    if a.cols() != b.cols() {
        return Err(Error::shape("mmd_squared", "sample dimensions differ"));
    }
    let mean = |p: &Tensor, q: &Tensor| {
        let mut s = 0.0;
        for i in 0..p.rows() {
            for j in 0..q.rows() {
                s += k(p.row(i), q.row(j));
            }
        }
        s / (p.rows() * q.rows()) as f64
    };
    Ok(mean(a, a) + mean(b, b) - 2.0 * mean(a, b))
}

/// Labeled training nodes grouped by class; empty classes are dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPartition {
    classes: Vec<Vec<usize>>,
}

impl ClassPartition {
    pub fn new(labels: &[usize], labeled: &[usize]) -> Self {
        let c = labeled.iter().map(|&i| labels[i] + 1).max().unwrap_or(0);
        let mut classes = vec![Vec::new(); c];
        for &i in labeled {
            classes[labels[i]].push(i);
        }
        classes.retain(|v| !v.is_empty());
        Self { classes }
    }

    pub fn classes(&self) -> &[Vec<usize>] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn members(&self) -> impl Iterator<Item = usize> + '_ {
        self.classes.iter().flatten().copied()
    }
}

/// Unordered labeled pairs `i < j` and their weights in the ordered-pair
/// expansion of `Σ_a Σ_{b≠a} MMD²(P_a, P_b)`.
#[derive(Debug, Clone)]
pub struct PairPlan {
    pub pairs: Arc<Vec<(usize, usize)>>,
    weights: Tensor,
    /// Contribution of the `i == j` terms, where `k = 1`.
    diagonal: f64,
}

impl PairPlan {
    pub fn new(partition: &ClassPartition) -> Result<Self> {
        let c = partition.num_classes();
        if c < 2 {
            return Err(Error::TooFew {
                what: "classes with labeled nodes",
                needed: 2,
                got: c,
            });
        }
        let mut nodes: Vec<(usize, usize)> = Vec::new();
        for (a, members) in partition.classes().iter().enumerate() {
            nodes.extend(members.iter().map(|&i| (i, a)));
        }
        let size: Vec<f64> = partition.classes().iter().map(|m| m.len() as f64).collect();
        let same = |a: usize| 2.0 * (c as f64 - 1.0) / (size[a] * size[a]);
        let diagonal = nodes.iter().map(|&(_, a)| same(a)).sum();
        let mut pairs = Vec::new();
        let mut w = Vec::new();
        for (p, &(i, a)) in nodes.iter().enumerate() {
            for &(j, b) in &nodes[p + 1..] {
                pairs.push((i, j));
                // Both orders (i,j) and (j,i) carry the same weight.
                w.push(if a == b {
                    2.0 * same(a)
                } else {
                    2.0 * (-2.0 / (size[a] * size[b]))
                });
            }
        }
        Ok(Self {
            pairs: Arc::new(pairs),
            weights: Tensor::column(w),
            diagonal,
        })
    }
}

/// Scalar pieces of the kernel objective, as tape variables.
#[derive(Debug, Clone, Copy)]
pub struct KernelLoss {
    /// `Σ ‖x - x̄‖² - β Σ_a Σ_{b≠a} MMD²`.
    pub total: Var,
    pub reconstruction: Var,
    pub mmd_sum: Var,
    /// Kernel values on the unordered labeled pairs, reused by `L_d`.
    pub pair_values: Var,
}

/// `L_k`. `z` and `xbar` come from [`KernelModel::forward`] on all nodes.
pub fn kernel_loss(
    tape: &mut Tape,
    x: Var,
    z: Var,
    xbar: Var,
    plan: &PairPlan,
    beta: f64,
) -> Result<KernelLoss> {
    if beta < 0.0 {
        return Err(Error::InvalidArgument(format!("beta {beta} < 0")));
    }
    let reconstruction = reconstruction_loss(tape, x, xbar)?;
    let d = tape.neg_sqdist_on_pairs(z, &plan.pairs)?;
    let pair_values = tape.exp(d)?;
    let w = tape.constant(plan.weights.clone());
    let weighted = tape.mul(pair_values, w)?;
    let off = tape.sum(weighted)?;
    let diag = tape.constant(Tensor::scalar(plan.diagonal));
    let mmd_sum = tape.add(off, diag)?;
    let scaled = tape.scale(mmd_sum, -beta)?;
    let total = tape.add(reconstruction, scaled)?;
    Ok(KernelLoss {
        total,
        reconstruction,
        mmd_sum,
        pair_values,
    })
}

/// `L_d = -(max k - min k)²` over the given kernel values.
pub fn difference_regularizer(tape: &mut Tape, values: Var) -> Result<Var> {
    let len = tape.value(values).len();
    if len < 2 {
        return Err(Error::TooFew {
            what: "kernel values",
            needed: 2,
            got: len,
        });
    }
    let hi = tape.max_all(values)?;
    let lo = tape.min_all(values)?;
    let gap = tape.sub(hi, lo)?;
    let sq = tape.square(gap)?;
    tape.scale(sq, -1.0)
}

/// `L = L_ce + λ1 L_k + λ2 L_d`.
pub fn total_loss(tape: &mut Tape, ce: Var, lk: Var, ld: Var, lambda1: f64, lambda2: f64) -> Result<Var> {
    if lambda1 < 0.0 || lambda2 < 0.0 {
        return Err(Error::InvalidArgument("loss weights must be >= 0".into()));
    }
    let a = tape.scale(lk, lambda1)?;
    let b = tape.scale(ld, lambda2)?;
    let s = tape.add(ce, a)?;
    tape.add(s, b)
}
