//! Sparse graph storage and the fixed GCN aggregation operator.
//!
//! [`SparseMatrix`] is a square CSR matrix whose sparsity pattern lives in a
//! shared [`Pattern`]. `Ã`, `Â`, the learned kernel `K`, the composite `K̂`
//! and every attention matrix are built over the same pattern, so composing
//! them element-wise is a zip over value arrays.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest `n` accepted by [`check_psd_decomposition`].
pub const PSD_CHECK_MAX_N: usize = 2000;

/// Default tolerance on the smallest eigenvalue of `I - S`.
pub const PSD_TOL: f64 = 1e-8;

/// CSR sparsity structure of a square `n x n` matrix.
#[derive(Debug, Clone)]
pub struct Pattern {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    /// Row of every stored entry.
    row_of: Vec<usize>,
}

impl PartialEq for Pattern {
    fn eq(&self, other: &Self) -> bool {
        self.n == other.n && self.row_ptr == other.row_ptr && self.col_idx == other.col_idx
    }
}

impl Pattern {
    /// Validates and wraps raw CSR arrays.
    pub fn new(n: usize, row_ptr: Vec<usize>, col_idx: Vec<usize>) -> Result<Self> {
        if row_ptr.len() != n + 1 {
            return Err(Error::InvalidSparse(format!(
                "row_ptr has length {}, expected {}",
                row_ptr.len(),
                n + 1
            )));
        }
        if row_ptr[0] != 0 || row_ptr[n] != col_idx.len() {
            return Err(Error::InvalidSparse(
                "row_ptr must start at 0 and end at nnz".into(),
            ));
        }
        let mut row_of = Vec::with_capacity(col_idx.len());
        for i in 0..n {
            let (lo, hi) = (row_ptr[i], row_ptr[i + 1]);
            if hi < lo {
                return Err(Error::InvalidSparse(format!(
                    "row_ptr decreases at row {i}"
                )));
            }
            for e in lo..hi {
                let c = col_idx[e];
                if c >= n {
                    return Err(Error::InvalidSparse(format!(
                        "column {c} out of range in row {i}"
                    )));
                }
                if e > lo && col_idx[e - 1] >= c {
                    return Err(Error::InvalidSparse(format!(
                        "columns not strictly increasing in row {i}"
                    )));
                }
                row_of.push(i);
            }
        }
        Ok(Self {
            n,
            row_ptr,
            col_idx,
            row_of,
        })
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    #[inline]
    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    #[inline]
    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    #[inline]
    pub fn row_of(&self) -> &[usize] {
        &self.row_of
    }

    /// Entry range of row `i`.
    #[inline]
    pub fn row_range(&self, i: usize) -> std::ops::Range<usize> {
        self.row_ptr[i]..self.row_ptr[i + 1]
    }

    /// Position of `(i, j)` in the value array, if stored.
    pub fn find(&self, i: usize, j: usize) -> Option<usize> {
        let r = self.row_range(i);
        self.col_idx[r.clone()]
            .binary_search(&j)
            .ok()
            .map(|k| r.start + k)
    }

    /// `(row, col)` of every stored entry, in storage order.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.row_of
            .iter()
            .copied()
            .zip(self.col_idx.iter().copied())
            .collect()
    }

    pub fn is_structurally_symmetric(&self) -> bool {
        self.pairs().iter().all(|&(i, j)| self.find(j, i).is_some())
    }
}

/// Square CSR matrix of `f64` values over a shared [`Pattern`].
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    pattern: Arc<Pattern>,
    values: Vec<f64>,
    symmetric: bool,
}

impl SparseMatrix {
    pub fn new(pattern: Arc<Pattern>, values: Vec<f64>) -> Result<Self> {
        if values.len() != pattern.nnz() {
            return Err(Error::InvalidSparse(format!(
                "{} values for {} stored entries",
                values.len(),
                pattern.nnz()
            )));
        }
        let symmetric = bitwise_symmetric(&pattern, &values);
        Ok(Self {
            pattern,
            values,
            symmetric,
        })
    }

    /// Builds from `(i, j, value)` triplets; duplicates are rejected.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut sorted: Vec<_> = triplets.to_vec();
        for &(i, j, _) in &sorted {
            if i >= n || j >= n {
                return Err(Error::InvalidSparse(format!(
                    "entry ({i},{j}) out of range for n={n}"
                )));
            }
        }
        sorted.sort_by_key(|&(i, j, _)| (i, j));
        if let Some(w) = sorted.windows(2).find(|w| (w[0].0, w[0].1) == (w[1].0, w[1].1)) {
            return Err(Error::InvalidSparse(format!(
                "duplicate entry ({},{})",
                w[0].0, w[0].1
            )));
        }
        let mut row_ptr = vec![0usize; n + 1];
        for &(i, _, _) in &sorted {
            row_ptr[i + 1] += 1;
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        let col_idx = sorted.iter().map(|t| t.1).collect();
        let values = sorted.iter().map(|t| t.2).collect();
        Self::new(Arc::new(Pattern::new(n, row_ptr, col_idx)?), values)
    }

    /// Stores every nonzero entry of a dense square tensor.
    pub fn from_dense(t: &Tensor) -> Result<Self> {
        if t.rows() != t.cols() {
            return Err(Error::NotSquare {
                rows: t.rows(),
                cols: t.cols(),
            });
        }
        let mut trip = Vec::new();
        for i in 0..t.rows() {
            for j in 0..t.cols() {
                let v = t.get(i, j);
                if v != 0.0 {
                    trip.push((i, j, v));
                }
            }
        }
        Self::from_triplets(t.rows(), &trip)
    }

    pub fn identity(n: usize) -> Self {
        let trip: Vec<_> = (0..n).map(|i| (i, i, 1.0)).collect();
        Self::from_triplets(n, &trip).expect("identity is well formed")
    }

    /// Same pattern, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(Arc::clone(&self.pattern), values)
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.pattern.n
    }

    #[inline]
    pub fn nnz(&self) -> usize {
        self.pattern.nnz()
    }

    #[inline]
    pub fn pattern(&self) -> &Arc<Pattern> {
        &self.pattern
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// True when `(i,j)` is stored iff `(j,i)` is, with bit-identical values.
    #[inline]
    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn same_pattern(&self, other: &SparseMatrix) -> bool {
        Arc::ptr_eq(&self.pattern, &other.pattern) || *self.pattern == *other.pattern
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.pattern.find(i, j).map_or(0.0, |e| self.values[e])
    }

    /// Iterates `(row, col, value)` in storage order.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.pattern
            .row_of
            .iter()
            .zip(&self.pattern.col_idx)
            .zip(&self.values)
            .map(|((&i, &j), &v)| (i, j, v))
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n())
            .map(|i| self.values[self.pattern.row_range(i)].iter().sum())
            .collect()
    }

    pub fn to_dense(&self) -> Tensor {
        let n = self.n();
        let mut t = Tensor::zeros(n, n);
        for (i, j, v) in self.entries() {
            t.set(i, j, v);
        }
        t
    }

    fn require_symmetric(&self) -> Result<()> {
        if self.symmetric {
            return Ok(());
        }
        for (i, j, v) in self.entries() {
            if self.pattern.find(j, i).map(|e| self.values[e]) != Some(v) {
                return Err(Error::Asymmetric(i, j));
            }
        }
        unreachable!("symmetric flag out of sync")
    }
}

fn bitwise_symmetric(p: &Pattern, values: &[f64]) -> bool {
    p.row_of
        .iter()
        .zip(&p.col_idx)
        .zip(values)
        .all(|((&i, &j), &v)| {
            p.find(j, i)
                .is_some_and(|e| values[e].to_bits() == v.to_bits())
        })
}

/// Undirected graph with positive edge weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    n: usize,
    /// Canonical `(i, j, w)` with `i < j`, sorted.
    edges: Vec<(usize, usize, f64)>,
}

impl Graph {
    /// Validates an undirected edge list. Endpoint order does not matter,
    /// but the same undirected pair may appear only once.
    pub fn new(n: usize, edges: impl IntoIterator<Item = (usize, usize, f64)>) -> Result<Self> {
        let mut canon = Vec::new();
        for (a, b, w) in edges {
            if a >= n || b >= n {
                return Err(Error::InvalidGraph(format!(
                    "edge ({a},{b}) out of range for n={n}"
                )));
            }
            if a == b {
                return Err(Error::InvalidGraph(format!("self-loop on node {a}")));
            }
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::InvalidGraph(format!(
                    "edge ({a},{b}) has non-positive weight {w}"
                )));
            }
            canon.push((a.min(b), a.max(b), w));
        }
        canon.sort_by_key(|&(i, j, _)| (i, j));
        if let Some(w) = canon.windows(2).find(|w| (w[0].0, w[0].1) == (w[1].0, w[1].1)) {
            return Err(Error::InvalidGraph(format!(
                "duplicate edge ({},{})",
                w[0].0, w[0].1
            )));
        }
        Ok(Self { n, edges: canon })
    }

    pub fn unweighted(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        Self::new(n, edges.iter().map(|&(i, j)| (i, j, 1.0)))
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn edges(&self) -> &[(usize, usize, f64)] {
        &self.edges
    }

    #[inline]
    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Symmetric adjacency `A` with an empty diagonal.
    pub fn adjacency(&self) -> SparseMatrix {
        let mut trip = Vec::with_capacity(2 * self.edges.len());
        for &(i, j, w) in &self.edges {
            trip.push((i, j, w));
            trip.push((j, i, w));
        }
        SparseMatrix::from_triplets(self.n, &trip).expect("graph edges are validated")
    }

    /// `Â = D̃^{-1/2} (A + I) D̃^{-1/2}`.
    pub fn normalized_adjacency(&self) -> SparseMatrix {
        let a_tilde = add_self_loops(&self.adjacency()).expect("adjacency has no diagonal");
        symmetric_normalize(&a_tilde).expect("self-loops make every row sum positive")
    }
}

/// Weighted degrees, the row sums of `Ã`.
#[derive(Debug, Clone, PartialEq)]
pub struct DegreeVector(pub Vec<f64>);

impl DegreeVector {
    pub fn of(m: &SparseMatrix) -> Self {
        Self(m.row_sums())
    }
}

/// `Ã = A + I`. Fails if any diagonal entry is already nonzero, so a second
/// application is rejected.
pub fn add_self_loops(a: &SparseMatrix) -> Result<SparseMatrix> {
    a.require_symmetric()?;
    let n = a.n();
    let mut trip: Vec<(usize, usize, f64)> = Vec::with_capacity(a.nnz() + n);
    for (i, j, v) in a.entries() {
        if i == j {
            if v != 0.0 {
                return Err(Error::DiagonalPresent(i));
            }
            continue;
        }
        trip.push((i, j, v));
    }
    trip.extend((0..n).map(|i| (i, i, 1.0)));
    SparseMatrix::from_triplets(n, &trip)
}

/// `â_ij = ã_ij / sqrt(d_i d_j)` with `d` the row sums of `Ã`. Keeps the
/// pattern of the input.
pub fn symmetric_normalize(a_tilde: &SparseMatrix) -> Result<SparseMatrix> {
    let deg = DegreeVector::of(a_tilde);
    if let Some(i) = deg.0.iter().position(|&d| !(d > 0.0)) {
        return Err(Error::ZeroRowSum(i));
    }
    let values = a_tilde
        .entries()
        .map(|(i, j, v)| v / (deg.0[i] * deg.0[j]).sqrt())
        .collect();
    a_tilde.with_values(values)
}

/// Sparse-dense product `S * X`, accumulated row by row in index order.
pub fn spmm(s: &SparseMatrix, x: &Tensor) -> Result<Tensor> {
    spmm_raw(s.pattern(), s.values(), x)
}

pub(crate) fn spmm_raw(p: &Pattern, values: &[f64], x: &Tensor) -> Result<Tensor> {
    if x.rows() != p.n() {
        return Err(Error::shape(
            "spmm",
            format!("{0}x{0} sparse * {1}x{2} dense", p.n(), x.rows(), x.cols()),
        ));
    }
    let d = x.cols();
    let mut out = Tensor::zeros(p.n(), d);
    for i in 0..p.n() {
        let orow = out.row_mut(i);
        for e in p.row_range(i) {
            let v = values[e];
            let xrow = x.row(p.col_idx[e]);
            for (o, &xv) in orow.iter_mut().zip(xrow) {
                *o += v * xv;
            }
        }
    }
    Ok(out)
}

/// Spectral evidence that a symmetric `S` splits as `I - (I - S)` into two
/// positive semi-definite parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsdReport {
    pub min_eig_s: f64,
    pub min_eig_i_minus_s: f64,
    pub passes: bool,
}

/// Dense eigen-check that `I - S` is positive semi-definite up to `tol`.
pub fn check_psd_decomposition(s: &SparseMatrix, tol: f64) -> Result<PsdReport> {
    let n = s.n();
    if n > PSD_CHECK_MAX_N {
        return Err(Error::TooLarge {
            n,
            limit: PSD_CHECK_MAX_N,
        });
    }
    s.require_symmetric()?;
    let dense = s.to_dense();
    let m_s = nalgebra::DMatrix::from_row_slice(n, n, dense.data());
    let m_is = nalgebra::DMatrix::<f64>::identity(n, n) - &m_s;
    let min_eig_s = min_eigenvalue(m_s);
    let min_eig_i_minus_s = min_eigenvalue(m_is);
    Ok(PsdReport {
        min_eig_s,
        min_eig_i_minus_s,
        passes: min_eig_i_minus_s >= -tol,
    })
}

/// Smallest eigenvalue of a dense symmetric matrix (`+inf` when empty).
pub fn min_eigenvalue(m: nalgebra::DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    m.symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}
