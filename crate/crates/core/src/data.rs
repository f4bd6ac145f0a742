//! Datasets: an in-memory bundle, a line-oriented text format, a stochastic
//! block model generator, and a kernel-vs-adjacency export.
//!
//! Dataset file layout (UTF-8; blank lines and lines starting with `#` are
//! ignored):
//!
//! ```text
//! n d c
//! N <id> <label> <f_1> ... <f_d>      one per node, ids 0..n-1 in order
//! E <i> <j> [weight]                  one per undirected edge, i < j
//! M <train|val|test> <id> ...         optional, all three or none
//! ```

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::graph::{Graph, Pattern, SparseMatrix};
use crate::models::GraphInput;
use crate::tensor::Tensor;
use crate::train::{SplitMasks, Subset};

/// Features, labels, graph and optional fixed split of one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    features: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    graph: Graph,
    masks: Option<SplitMasks>,
}

impl DatasetBundle {
    pub fn new(
        features: Tensor,
        labels: Vec<usize>,
        num_classes: usize,
        graph: Graph,
        masks: Option<SplitMasks>,
    ) -> Result<Self> {
        let n = graph.n();
        if features.rows() != n || labels.len() != n {
            return Err(Error::shape(
                "dataset",
                format!(
                    "{} feature rows and {} labels for {n} nodes",
                    features.rows(),
                    labels.len()
                ),
            ));
        }
        if num_classes == 0 {
            return Err(Error::InvalidArgument("class count must be positive".into()));
        }
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "node {i} has label {y}, only {num_classes} classes"
            )));
        }
        if !features.all_finite() {
            return Err(Error::NonFinite { op: "dataset features" });
        }
        if let Some(m) = &masks {
            if m.n() != n {
                return Err(Error::Split(format!("masks cover {} nodes, graph has {n}", m.n())));
            }
        }
        Ok(Self {
            features,
            labels,
            num_classes,
            graph,
            masks,
        })
    }

    pub fn n(&self) -> usize {
        self.graph.n()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn masks(&self) -> Option<&SplitMasks> {
        self.masks.as_ref()
    }

    pub fn set_masks(&mut self, masks: Option<SplitMasks>) -> Result<()> {
        if let Some(m) = &masks {
            if m.n() != self.n() {
                return Err(Error::Split(format!(
                    "masks cover {} nodes, graph has {}",
                    m.n(),
                    self.n()
                )));
            }
        }
        self.masks = masks;
        Ok(())
    }

    /// `n x c` indicator matrix of the labels.
    pub fn one_hot(&self) -> Tensor {
        let mut y = Tensor::zeros(self.n(), self.num_classes);
        for (i, &c) in self.labels.iter().enumerate() {
            y.set(i, c, 1.0);
        }
        y
    }

    /// Features together with `Â` of the graph.
    pub fn graph_input(&self) -> Result<GraphInput> {
        GraphInput::new(self.features.clone(), self.graph.normalized_adjacency())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "{} {} {}", self.n(), self.dim(), self.num_classes)?;
        let mut line = String::new();
        for i in 0..self.n() {
            line.clear();
            write!(line, "N {i} {}", self.labels[i]).expect("write to string");
            for v in self.features.row(i) {
                write!(line, " {v}").expect("write to string");
            }
            writeln!(w, "{line}")?;
        }
        for &(i, j, wt) in self.graph.edges() {
            if wt == 1.0 {
                writeln!(w, "E {i} {j}")?;
            } else {
                writeln!(w, "E {i} {j} {wt}")?;
            }
        }
        if let Some(m) = &self.masks {
            for s in Subset::ALL {
                line.clear();
                write!(line, "M {s}").expect("write to string");
                for i in m.get(s) {
                    write!(line, " {i}").expect("write to string");
                }
                writeln!(w, "{line}")?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from(r: impl BufRead) -> Result<Self> {
        Parser::default().run(r)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(fs::File::open(path)?))
    }
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}

fn num<T: std::str::FromStr>(tok: &str, what: &str, line: usize) -> Result<T> {
    tok.parse()
        .map_err(|_| parse_err(line, format!("invalid {what} {tok:?}")))
}

#[derive(Default)]
struct Parser {
    header: Option<(usize, usize, usize)>,
    features: Vec<f64>,
    labels: Vec<usize>,
    edges: Vec<(usize, usize, f64)>,
    seen: HashSet<(usize, usize)>,
    masks: [Option<(usize, Vec<usize>)>; 3],
}

impl Parser {
    fn run(mut self, r: impl BufRead) -> Result<DatasetBundle> {
        let mut last = 0;
        for (idx, text) in r.lines().enumerate() {
            let text = text?;
            last = idx + 1;
            let t = text.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let toks: Vec<&str> = t.split_whitespace().collect();
            self.line(&toks, idx + 1)?;
        }
        self.finish(last)
    }

    fn line(&mut self, toks: &[&str], ln: usize) -> Result<()> {
        let Some((n, d, c)) = self.header else {
            if toks.len() != 3 {
                return Err(parse_err(ln, "header must be `n d c`"));
            }
            let n = num(toks[0], "node count", ln)?;
            let d = num(toks[1], "feature width", ln)?;
            let c: usize = num(toks[2], "class count", ln)?;
            if c == 0 {
                return Err(parse_err(ln, "class count must be positive"));
            }
            self.header = Some((n, d, c));
            return Ok(());
        };
        match toks[0] {
            "N" => {
                if !self.edges.is_empty() || self.masks.iter().any(Option::is_some) {
                    return Err(parse_err(ln, "node lines must precede edge and mask lines"));
                }
                if toks.len() != 3 + d {
                    return Err(parse_err(
                        ln,
                        format!("node line needs id, label and {d} features"),
                    ));
                }
                let id: usize = num(toks[1], "node id", ln)?;
                if id != self.labels.len() {
                    return Err(parse_err(
                        ln,
                        format!("expected node id {}, got {id}", self.labels.len()),
                    ));
                }
                if id >= n {
                    return Err(parse_err(ln, format!("node id {id} out of range for n={n}")));
                }
                let y: usize = num(toks[2], "label", ln)?;
                if y >= c {
                    return Err(parse_err(ln, format!("label {y} out of range for c={c}")));
                }
                for tok in &toks[3..] {
                    let v: f64 = num(tok, "feature", ln)?;
                    if !v.is_finite() {
                        return Err(parse_err(ln, format!("non-finite feature {tok}")));
                    }
                    self.features.push(v);
                }
                self.labels.push(y);
            }
            "E" => {
                if !(3..=4).contains(&toks.len()) {
                    return Err(parse_err(ln, "edge line must be `E i j [weight]`"));
                }
                let i: usize = num(toks[1], "endpoint", ln)?;
                let j: usize = num(toks[2], "endpoint", ln)?;
                if i >= j {
                    return Err(parse_err(ln, format!("edge endpoints must satisfy i < j, got {i} {j}")));
                }
                if j >= n {
                    return Err(parse_err(ln, format!("edge endpoint {j} out of range for n={n}")));
                }
                let w = match toks.get(3) {
                    Some(tok) => num(tok, "weight", ln)?,
                    None => 1.0,
                };
                if !(w > 0.0 && f64::is_finite(w)) {
                    return Err(parse_err(ln, format!("edge weight must be positive, got {w}")));
                }
                if !self.seen.insert((i, j)) {
                    return Err(parse_err(ln, format!("duplicate edge {i} {j}")));
                }
                self.edges.push((i, j, w));
            }
            "M" => {
                if toks.len() < 2 {
                    return Err(parse_err(ln, "mask line must name a subset"));
                }
                let s: Subset = toks[1]
                    .parse()
                    .map_err(|_| parse_err(ln, format!("unknown mask {:?}", toks[1])))?;
                if self.masks[s as usize].is_some() {
                    return Err(parse_err(ln, format!("mask {s} given twice")));
                }
                let mut ids = Vec::with_capacity(toks.len() - 2);
                for tok in &toks[2..] {
                    let i: usize = num(tok, "mask id", ln)?;
                    if i >= n {
                        return Err(parse_err(ln, format!("mask id {i} out of range for n={n}")));
                    }
                    ids.push(i);
                }
                self.masks[s as usize] = Some((ln, ids));
            }
            other => return Err(parse_err(ln, format!("unknown record type {other:?}"))),
        }
        Ok(())
    }

    fn finish(self, last: usize) -> Result<DatasetBundle> {
        let (n, d, c) = self
            .header
            .ok_or_else(|| parse_err(last.max(1), "missing header"))?;
        if self.labels.len() != n {
            return Err(parse_err(
                last,
                format!("expected {n} node lines, found {}", self.labels.len()),
            ));
        }
        let masks = match &self.masks {
            [None, None, None] => None,
            [Some(tr), Some(va), Some(te)] => {
                let at = tr.0.max(va.0).max(te.0);
                let m = SplitMasks::new(n, tr.1.clone(), va.1.clone(), te.1.clone())
                    .map_err(|e| parse_err(at, e.to_string()))?;
                Some(m)
            }
            partial => {
                let at = partial.iter().flatten().map(|m| m.0).max().unwrap_or(last);
                return Err(parse_err(at, "mask lines must give train, val and test"));
            }
        };
        let features = Tensor::from_vec(n, d, self.features)?;
        let graph = Graph::new(n, self.edges)?;
        DatasetBundle::new(features, self.labels, c, graph, masks)
    }
}

/// Parameters of [`gen_sbm`].
#[derive(Debug, Clone, PartialEq)]
pub struct SbmConfig {
    pub n: usize,
    pub classes: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub dim: usize,
    pub signal: f64,
    pub seed: u64,
}

/// Stochastic block model with `classes` equal contiguous blocks. Node
/// features are a per-class mean (a random unit direction scaled by
/// `signal`) plus standard Gaussian noise.
pub fn gen_sbm(cfg: &SbmConfig) -> Result<DatasetBundle> {
    let SbmConfig {
        n,
        classes: c,
        p_in,
        p_out,
        dim,
        signal,
        seed,
    } = *cfg;
    if !(0.0 <= p_out && p_out < p_in && p_in <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need 0 <= p_out < p_in <= 1, got p_in={p_in} p_out={p_out}"
        )));
    }
    if c < 2 || n < c {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 classes and one node per class, got n={n} c={c}"
        )));
    }
    if dim == 0 || !(signal >= 0.0 && signal.is_finite()) {
        return Err(Error::InvalidArgument(
            "feature width must be positive and signal finite and >= 0".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..n).map(|i| i * c / n).collect();

    let mut means = Tensor::zeros(c, dim);
    for a in 0..c {
        let row = means.row_mut(a);
        for v in row.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in row.iter_mut() {
            *v *= signal / norm;
        }
    }
    let mut features = Tensor::zeros(n, dim);
    for i in 0..n {
        for k in 0..dim {
            let noise: f64 = rng.sample(StandardNormal);
            features.set(i, k, means.get(labels[i], k) + noise);
        }
    }
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let p = if labels[i] == labels[j] { p_in } else { p_out };
            if rng.gen::<f64>() < p {
                edges.push((i, j, 1.0));
            }
        }
    }
    DatasetBundle::new(features, labels, c, Graph::new(n, edges)?, None)
}

/// Summary statistics of `|K̂ - Â|` over the stored entries.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComparisonSummary {
    pub n: usize,
    pub nnz: usize,
    pub mean_abs_diff: f64,
    pub max_abs_diff: f64,
}

impl ComparisonSummary {
    pub fn of(k_hat: &SparseMatrix, a_hat: &SparseMatrix) -> Result<Self> {
        if !k_hat.same_pattern(a_hat) {
            return Err(Error::PatternMismatch);
        }
        let diffs = k_hat.values().iter().zip(a_hat.values()).map(|(k, a)| (k - a).abs());
        let (mut sum, mut max) = (0.0, 0.0f64);
        for d in diffs {
            sum += d;
            max = max.max(d);
        }
        let nnz = k_hat.nnz();
        Ok(Self {
            n: k_hat.n(),
            nnz,
            mean_abs_diff: if nnz == 0 { 0.0 } else { sum / nnz as f64 },
            max_abs_diff: max,
        })
    }
}

/// Writes `K̂`, `Â` and `|K̂ - Â|` as aligned sparse triplets after a `#`
/// summary header.
pub fn export_kernel_comparison(
    k_hat: &SparseMatrix,
    a_hat: &SparseMatrix,
    path: impl AsRef<Path>,
) -> Result<ComparisonSummary> {
    let summary = ComparisonSummary::of(k_hat, a_hat)?;
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(
        w,
        "# n={} nnz={} mean_abs_diff={} max_abs_diff={}",
        summary.n, summary.nnz, summary.mean_abs_diff, summary.max_abs_diff
    )?;
    writeln!(w, "# i\tj\tk_hat\ta_hat\tabs_diff")?;
    for ((i, j, k), a) in k_hat.entries().zip(a_hat.values()) {
        writeln!(w, "{i}\t{j}\t{k}\t{a}\t{}", (k - a).abs())?;
    }
    w.flush()?;
    Ok(summary)
}

/// Reads a file written by [`export_kernel_comparison`] back into `(K̂, Â)`.
pub fn read_kernel_comparison(path: impl AsRef<Path>) -> Result<(SparseMatrix, SparseMatrix)> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut n = None;
    let mut entries: Vec<(usize, usize, f64, f64)> = Vec::new();
    for (idx, text) in r.lines().enumerate() {
        let text = text?;
        let ln = idx + 1;
        if let Some(rest) = text.strip_prefix('#') {
            for kv in rest.split_whitespace() {
                if let Some(v) = kv.strip_prefix("n=") {
                    n = Some(num::<usize>(v, "n", ln)?);
                }
            }
            continue;
        }
        if text.trim().is_empty() {
            continue;
        }
        let toks: Vec<&str> = text.split('\t').collect();
        if toks.len() != 5 {
            return Err(parse_err(ln, "expected 5 tab-separated columns"));
        }
        entries.push((
            num(toks[0], "row", ln)?,
            num(toks[1], "column", ln)?,
            num(toks[2], "k_hat", ln)?,
            num(toks[3], "a_hat", ln)?,
        ));
    }
    let n = n.ok_or_else(|| parse_err(1, "summary header lacks n="))?;
    let mut row_ptr = vec![0; n + 1];
    let mut col_idx = Vec::with_capacity(entries.len());
    for &(i, j, _, _) in &entries {
        if i >= n {
            return Err(Error::InvalidSparse(format!("row {i} out of range")));
        }
        row_ptr[i + 1] += 1;
        col_idx.push(j);
    }
    for i in 0..n {
        row_ptr[i + 1] += row_ptr[i];
    }
    // `Pattern::new` rejects entries that are not sorted row-major.
    let pattern = Arc::new(Pattern::new(n, row_ptr, col_idx)?);
    if pattern.row_of().iter().zip(&entries).any(|(&r, e)| r != e.0) {
        return Err(Error::InvalidSparse("triplets are not in row-major order".into()));
    }
    let k = SparseMatrix::new(Arc::clone(&pattern), entries.iter().map(|e| e.2).collect())?;
    let a = SparseMatrix::new(pattern, entries.iter().map(|e| e.3).collect())?;
    Ok((k, a))
}
