//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every primitive applied during one forward pass.
//! [`Tape::backward`] walks the record in reverse once, accumulating
//! adjoints additively so a value used twice receives the sum of both
//! branch gradients. A tape is single-use: backward consumes it.
//!
//! Besides dense algebra the tape knows a few graph primitives:
//! [`Tape::spmm`] multiplies a sparse matrix whose *values* are a tape
//! variable by a dense variable, and [`Tape::segment_softmax`] normalises
//! values row by row over a CSR pattern. Those two are what let gradients
//! reach the learned kernel and attention coefficients.

mod gradcheck;
mod optim;

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

pub use gradcheck::{grad_check, GradCheckReport, GRAD_CHECK_FLOOR};
pub use optim::{Adam, AdamState};

use crate::error::{Error, Result};
use crate::graph::Pattern;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

/// LeakyReLU slope used by attention logits.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Square(Var),
    ConcatCols(Vec<Var>),
    Relu(Var),
    LeakyRelu(Var, f64),
    Exp(Var),
    RowSoftmax(Var),
    SegmentSoftmax(Var, Arc<Pattern>),
    NegSqDist(Var, Arc<Vec<(usize, usize)>>),
    AttentionLogits {
        h: Var,
        theta: Var,
        pattern: Arc<Pattern>,
    },
    Spmm {
        pattern: Arc<Pattern>,
        values: Var,
        dense: Var,
    },
    Dropout(Var, Vec<f64>),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        mask: Vec<usize>,
        probs: Tensor,
    },
    Sum(Var),
    Mean(Var),
    /// Reduction that passes the adjoint to one attaining entry.
    Pick(Var, usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of one forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    /// Gradient of `v`, or `None` when nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients for every parameter in `store`, zero when unused.
    pub fn for_params(&self, store: &ParamStore) -> Vec<Tensor> {
        store
            .iter()
            .map(|(id, p)| {
                self.params
                    .get(&id)
                    .and_then(|&v| self.get(v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(p.value.rows(), p.value.cols()))
            })
            .collect()
    }
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

fn softmax_in_place(xs: &mut [f64]) {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in xs.iter_mut() {
        *x /= s;
    }
}

/// Element-wise dropout outside of any tape. Survivors are scaled by
/// `1 / (1 - rate)`; in evaluation mode the input is returned unchanged.
pub fn dropout_apply(x: &Tensor, rate: f64, train: bool, rng: &mut impl Rng) -> Result<Tensor> {
    let mask = dropout_mask(x.len(), rate, train, rng)?;
    Ok(match mask {
        None => x.clone(),
        Some(m) => {
            let data = x.data().iter().zip(&m).map(|(a, b)| a * b).collect();
            Tensor::from_vec(x.rows(), x.cols(), data)?
        }
    })
}

fn dropout_mask(
    len: usize,
    rate: f64,
    train: bool,
    rng: &mut (impl Rng + ?Sized),
) -> Result<Option<Vec<f64>>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!(
            "dropout rate {rate} outside [0, 1)"
        )));
    }
    if !train || rate == 0.0 {
        return Ok(None);
    }
    let keep = 1.0 / (1.0 - rate);
    Ok(Some(
        (0..len)
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect(),
    ))
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        name: &'static str,
        value: Tensor,
        op: Op,
        inputs: &[Var],
    ) -> Result<Var> {
        check_finite(name, &value)?;
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, op, rg))
    }

    /// Records an input value. Gradients are tracked iff `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Leaf for a stored parameter. Repeated calls return the same handle.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(store.get(id).clone(), true);
        self.params.insert(id, v);
        v
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::from_vec(x.rows(), x.cols(), data).expect("same shape")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push_checked("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |p, q| p + q);
        self.push_checked("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |p, q| p - q);
        self.push_checked("sub", out, Op::Sub(a, b), &[a, b])
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |p, q| p * q);
        self.push_checked("mul", out, Op::Mul(a, b), &[a, b])
    }

    /// Adds the `1 x d` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, r) = (self.value(a), self.value(b));
        if r.rows() != 1 || r.cols() != x.cols() {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + row {:?}", x.shape(), r.shape()),
            ));
        }
        let mut out = x.clone();
        for i in 0..out.rows() {
            for (o, &bv) in out.row_mut(i).iter_mut().zip(r.data()) {
                *o += bv;
            }
        }
        self.push_checked("add_row", out, Op::AddRow(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v * s);
        self.push_checked("scale", out, Op::Scale(a, s), &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v * v);
        self.push_checked("square", out, Op::Square(a), &[a])
    }

    /// Horizontal concatenation; all parts must have the same row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        let rows = self.value(*first).rows();
        if let Some(p) = parts.iter().find(|p| self.value(**p).rows() != rows) {
            return Err(Error::shape(
                "concat_cols",
                format!("{} rows vs {rows}", self.value(*p).rows()),
            ));
        }
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(i));
            }
        }
        let out = Tensor::from_vec(rows, cols, data)?;
        self.push_checked("concat_cols", out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push_checked("relu", out, Op::Relu(a), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let out = self.value(a).map(|v| if v > 0.0 { v } else { slope * v });
        self.push_checked("leaky_relu", out, Op::LeakyRelu(a, slope), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        self.push_checked("exp", out, Op::Exp(a), &[a])
    }

    /// Softmax across the columns of each row (max-shifted).
    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            softmax_in_place(out.row_mut(i));
        }
        self.push_checked("row_softmax", out, Op::RowSoftmax(a), &[a])
    }

    /// Softmax of an `nnz x 1` value column within each row segment of
    /// `pattern`. Every row must have at least one stored entry.
    pub fn segment_softmax(&mut self, a: Var, pattern: &Arc<Pattern>) -> Result<Var> {
        let x = self.value(a);
        if x.shape() != (pattern.nnz(), 1) {
            return Err(Error::shape(
                "segment_softmax",
                format!("{:?} values for nnz={}", x.shape(), pattern.nnz()),
            ));
        }
        if let Some(i) = (0..pattern.n()).find(|&i| pattern.row_range(i).is_empty()) {
            return Err(Error::InvalidSparse(format!(
                "row {i} has no stored entries to normalise over"
            )));
        }
        let mut out = x.clone();
        for i in 0..pattern.n() {
            softmax_in_place(&mut out.data_mut()[pattern.row_range(i)]);
        }
        self.push_checked(
            "segment_softmax",
            out,
            Op::SegmentSoftmax(a, Arc::clone(pattern)),
            &[a],
        )
    }

    /// `-‖z_i - z_j‖²` for each listed pair, as a `pairs x 1` column.
    pub fn neg_sqdist_on_pairs(&mut self, z: Var, pairs: &Arc<Vec<(usize, usize)>>) -> Result<Var> {
        let zt = self.value(z);
        if let Some(&(i, j)) = pairs.iter().find(|&&(i, j)| i >= zt.rows() || j >= zt.rows()) {
            return Err(Error::shape(
                "neg_sqdist_on_pairs",
                format!("pair ({i},{j}) with {} rows", zt.rows()),
            ));
        }
        let vals = pairs
            .iter()
            .map(|&(i, j)| {
                -zt.row(i)
                    .iter()
                    .zip(zt.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
            .collect();
        let out = Tensor::column(vals);
        self.push_checked(
            "neg_sqdist_on_pairs",
            out,
            Op::NegSqDist(z, Arc::clone(pairs)),
            &[z],
        )
    }

    /// Per stored entry `(i, j)`: `[h_i ∥ h_j]ᵀ θ` with `h` an `n x f`
    /// matrix and `θ` a `2f x 1` column.
    pub fn attention_logits(&mut self, h: Var, theta: Var, pattern: &Arc<Pattern>) -> Result<Var> {
        let (ht, tt) = (self.value(h), self.value(theta));
        let f = ht.cols();
        if ht.rows() != pattern.n() || tt.shape() != (2 * f, 1) {
            return Err(Error::shape(
                "attention_logits",
                format!("h {:?}, theta {:?}, n={}", ht.shape(), tt.shape(), pattern.n()),
            ));
        }
        let (ta, tb) = tt.data().split_at(f);
        let src: Vec<f64> = (0..ht.rows()).map(|i| dot(ht.row(i), ta)).collect();
        let dst: Vec<f64> = (0..ht.rows()).map(|i| dot(ht.row(i), tb)).collect();
        let vals = pattern
            .row_of()
            .iter()
            .zip(pattern.col_idx())
            .map(|(&i, &j)| src[i] + dst[j])
            .collect();
        let out = Tensor::column(vals);
        self.push_checked(
            "attention_logits",
            out,
            Op::AttentionLogits {
                h,
                theta,
                pattern: Arc::clone(pattern),
            },
            &[h, theta],
        )
    }

    /// Sparse-dense product `S X` where the stored values of `S` are the
    /// `nnz x 1` variable `values`. Differentiable in both operands.
    pub fn spmm(&mut self, pattern: &Arc<Pattern>, values: Var, dense: Var) -> Result<Var> {
        let v = self.value(values);
        if v.shape() != (pattern.nnz(), 1) {
            return Err(Error::shape(
                "spmm",
                format!("{:?} values for nnz={}", v.shape(), pattern.nnz()),
            ));
        }
        let out = crate::graph::spmm_raw(pattern, v.data(), self.value(dense))?;
        self.push_checked(
            "spmm",
            out,
            Op::Spmm {
                pattern: Arc::clone(pattern),
                values,
                dense,
            },
            &[values, dense],
        )
    }

    /// Inverted dropout; identity when `train` is false or `rate` is zero.
    pub fn dropout(&mut self, a: Var, rate: f64, train: bool, rng: &mut (impl Rng + ?Sized)) -> Result<Var> {
        match dropout_mask(self.value(a).len(), rate, train, rng)? {
            None => Ok(a),
            Some(mask) => {
                let x = self.value(a);
                let data = x.data().iter().zip(&mask).map(|(p, q)| p * q).collect();
                let out = Tensor::from_vec(x.rows(), x.cols(), data)?;
                self.push_checked("dropout", out, Op::Dropout(a, mask), &[a])
            }
        }
    }

    /// Mean over `mask` rows of `-log softmax(logits)[label]`.
    pub fn masked_cross_entropy(&mut self, logits: Var, labels: &[usize], mask: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        if labels.len() != x.rows() {
            return Err(Error::shape(
                "masked_cross_entropy",
                format!("{} labels for {} rows", labels.len(), x.rows()),
            ));
        }
        if mask.is_empty() {
            return Err(Error::InvalidArgument("empty cross-entropy mask".into()));
        }
        if let Some(&i) = mask.iter().find(|&&i| i >= x.rows() || labels[i] >= x.cols()) {
            return Err(Error::shape(
                "masked_cross_entropy",
                format!("mask row {i} or its label out of range"),
            ));
        }
        let mut probs = x.clone();
        let mut loss = 0.0;
        for &i in mask {
            let row = x.row(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - row[labels[i]];
            softmax_in_place(probs.row_mut(i));
        }
        let out = Tensor::scalar(loss / mask.len() as f64);
        self.push_checked(
            "masked_cross_entropy",
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                mask: mask.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push_checked("sum", out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let out = Tensor::scalar(x.sum() / x.len() as f64);
        self.push_checked("mean", out, Op::Mean(a), &[a])
    }

    /// Largest entry; the adjoint goes to the first index attaining it.
    pub fn max_all(&mut self, a: Var) -> Result<Var> {
        self.pick(a, "max_all", |cand, best| cand > best)
    }

    /// Smallest entry; the adjoint goes to the first index attaining it.
    pub fn min_all(&mut self, a: Var) -> Result<Var> {
        self.pick(a, "min_all", |cand, best| cand < best)
    }

    fn pick(&mut self, a: Var, name: &'static str, better: impl Fn(f64, f64) -> bool) -> Result<Var> {
        let x = self.value(a).data();
        if x.is_empty() {
            return Err(Error::shape(name, "empty tensor"));
        }
        let mut best = 0;
        for (k, &v) in x.iter().enumerate().skip(1) {
            if better(v, x[best]) {
                best = k;
            }
        }
        let out = Tensor::scalar(x[best]);
        self.push_checked(name, out, Op::Pick(a, best), &[a])
    }

    /// Back-propagates from the scalar `loss`. Consumes the tape's record:
    /// a second call fails with [`Error::StaleTape`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::StaleTape);
        }
        let (r, c) = self.value(loss).shape();
        if (r, c) != (1, 1) {
            return Err(Error::NonScalarLoss(r, c));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let mut send = |v: Var, t: Tensor| {
            if self.nodes[v.0].requires_grad {
                accumulate(&mut grads[v.0], t);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if rg(*a) {
                    let mut ga = Tensor::zeros(av.rows(), av.cols());
                    gemm(false, true, g, bv, &mut ga);
                    send(*a, ga);
                }
                if rg(*b) {
                    let mut gb = Tensor::zeros(bv.rows(), bv.cols());
                    gemm(true, false, av, g, &mut gb);
                    send(*b, gb);
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    send(*a, hadamard(g, self.value(*b)));
                }
                if rg(*b) {
                    send(*b, hadamard(g, self.value(*a)));
                }
            }
            Op::AddRow(a, b) => {
                send(*a, g.clone());
                if rg(*b) {
                    let mut gb = Tensor::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (o, &v) in gb.data_mut().iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    send(*b, gb);
                }
            }
            Op::Scale(a, s) => send(*a, g.map(|v| v * s)),
            Op::Square(a) => {
                let x = self.value(*a);
                send(*a, zip_map(g, x, |gv, xv| 2.0 * xv * gv));
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if rg(*p) {
                        let mut gp = Tensor::zeros(g.rows(), w);
                        for i in 0..g.rows() {
                            gp.row_mut(i).copy_from_slice(&g.row(i)[offset..offset + w]);
                        }
                        send(*p, gp);
                    }
                    offset += w;
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                send(*a, zip_map(g, x, |gv, xv| if xv > 0.0 { gv } else { 0.0 }));
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.value(*a);
                send(*a, zip_map(g, x, |gv, xv| if xv > 0.0 { gv } else { slope * gv }));
            }
            Op::Exp(a) => send(*a, hadamard(g, out)),
            Op::RowSoftmax(a) => {
                let mut ga = Tensor::zeros(out.rows(), out.cols());
                for i in 0..out.rows() {
                    softmax_adjoint(out.row(i), g.row(i), ga.row_mut(i));
                }
                send(*a, ga);
            }
            Op::SegmentSoftmax(a, pattern) => {
                let mut ga = Tensor::zeros(out.rows(), 1);
                for i in 0..pattern.n() {
                    let r = pattern.row_range(i);
                    softmax_adjoint(
                        &out.data()[r.clone()],
                        &g.data()[r.clone()],
                        &mut ga.data_mut()[r],
                    );
                }
                send(*a, ga);
            }
            Op::NegSqDist(z, pairs) => {
                let zt = self.value(*z);
                let mut gz = Tensor::zeros(zt.rows(), zt.cols());
                for (&(i, j), &ge) in pairs.iter().zip(g.data()) {
                    if i == j {
                        continue;
                    }
                    for k in 0..zt.cols() {
                        let d = 2.0 * ge * (zt.get(i, k) - zt.get(j, k));
                        gz.data_mut()[i * zt.cols() + k] -= d;
                        gz.data_mut()[j * zt.cols() + k] += d;
                    }
                }
                send(*z, gz);
            }
            Op::AttentionLogits { h, theta, pattern } => {
                let (ht, tt) = (self.value(*h), self.value(*theta));
                let f = ht.cols();
                let (ta, tb) = tt.data().split_at(f);
                // Per-node sums of the edge adjoints, split by role.
                let mut g_src = vec![0.0; ht.rows()];
                let mut g_dst = vec![0.0; ht.rows()];
                for ((&i, &j), &ge) in pattern.row_of().iter().zip(pattern.col_idx()).zip(g.data()) {
                    g_src[i] += ge;
                    g_dst[j] += ge;
                }
                if rg(*h) {
                    let mut gh = Tensor::zeros(ht.rows(), f);
                    for i in 0..ht.rows() {
                        for (k, o) in gh.row_mut(i).iter_mut().enumerate() {
                            *o = g_src[i] * ta[k] + g_dst[i] * tb[k];
                        }
                    }
                    send(*h, gh);
                }
                if rg(*theta) {
                    let mut gt = Tensor::zeros(2 * f, 1);
                    for i in 0..ht.rows() {
                        let row = ht.row(i);
                        for k in 0..f {
                            gt.data_mut()[k] += g_src[i] * row[k];
                            gt.data_mut()[f + k] += g_dst[i] * row[k];
                        }
                    }
                    send(*theta, gt);
                }
            }
            Op::Spmm {
                pattern,
                values,
                dense,
            } => {
                let (vt, xt) = (self.value(*values), self.value(*dense));
                if rg(*values) {
                    let gv = pattern
                        .row_of()
                        .iter()
                        .zip(pattern.col_idx())
                        .map(|(&i, &j)| dot(g.row(i), xt.row(j)))
                        .collect();
                    send(*values, Tensor::column(gv));
                }
                if rg(*dense) {
                    let mut gx = Tensor::zeros(xt.rows(), xt.cols());
                    for i in 0..pattern.n() {
                        let gi = g.row(i);
                        for e in pattern.row_range(i) {
                            let v = vt.data()[e];
                            let row = gx.row_mut(pattern.col_idx()[e]);
                            for (o, &gv) in row.iter_mut().zip(gi) {
                                *o += v * gv;
                            }
                        }
                    }
                    send(*dense, gx);
                }
            }
            Op::Dropout(a, mask) => {
                let data = g.data().iter().zip(mask).map(|(p, q)| p * q).collect();
                send(*a, Tensor::from_vec(g.rows(), g.cols(), data).expect("same shape"));
            }
            Op::CrossEntropy {
                logits,
                labels,
                mask,
                probs,
            } => {
                let scale = g.item() / mask.len() as f64;
                let mut gl = Tensor::zeros(probs.rows(), probs.cols());
                for &i in mask {
                    let row = gl.row_mut(i);
                    for (o, &p) in row.iter_mut().zip(probs.row(i)) {
                        *o += scale * p;
                    }
                    row[labels[i]] -= scale;
                }
                send(*logits, gl);
            }
            Op::Sum(a) => {
                let x = self.value(*a);
                send(*a, Tensor::filled(x.rows(), x.cols(), g.item()));
            }
            Op::Mean(a) => {
                let x = self.value(*a);
                send(*a, Tensor::filled(x.rows(), x.cols(), g.item() / x.len() as f64));
            }
            Op::Pick(a, k) => {
                let x = self.value(*a);
                let mut ga = Tensor::zeros(x.rows(), x.cols());
                ga.data_mut()[*k] = g.item();
                send(*a, ga);
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    zip_map(a, b, |x, y| x * y)
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.rows(), a.cols(), data).expect("same shape")
}

/// `dx = y ⊙ (g - <g, y>)` for `y = softmax(x)`.
fn softmax_adjoint(y: &[f64], g: &[f64], out: &mut [f64]) {
    let inner = dot(y, g);
    for ((o, &yv), &gv) in out.iter_mut().zip(y).zip(g) {
        *o = yv * (gv - inner);
    }
}
