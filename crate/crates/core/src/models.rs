//! GCN, GAT and their composite-kernel variants.
//!
//! All four share one skeleton: every layer transforms its (dropped-out)
//! input by `W^l` and aggregates with one or more sparse operators over the
//! pattern of `Ã`. What differs is the set of operators:
//!
//! | model | hidden layer                              | output layer            |
//! |-------|-------------------------------------------|-------------------------|
//! | GCN   | `ReLU(Â HW)`                              | `Â HW`                  |
//! | GAT   | `∥_m ReLU(T_m HW)`                        | `Σ_m T_m HW`            |
//! | CKGCN | `ReLU([K̂ HW ∥ Â HW])`                     | `K̂ HW + Â HW`           |
//! | CKGAT | `∥_m ReLU([(K⊙T_m) HW ∥ T_m HW])`         | `Σ_m ((K⊙T_m) HW + T_m HW)` |
//!
//! Forward passes return logits; `row_softmax` of the logits gives the
//! class probabilities.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var, LEAKY_SLOPE};
use crate::error::{Error, Result};
use crate::graph::{Pattern, SparseMatrix};
use crate::kernel::{encoder_widths, kernel_on_edges, KernelModel};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Gcn,
    Gat,
    Ckgcn,
    Ckgat,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::Gcn, ModelKind::Gat, ModelKind::Ckgcn, ModelKind::Ckgat];

    pub fn uses_kernel(self) -> bool {
        matches!(self, ModelKind::Ckgcn | ModelKind::Ckgat)
    }

    pub fn uses_attention(self) -> bool {
        matches!(self, ModelKind::Gat | ModelKind::Ckgat)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Gcn => "gcn",
            ModelKind::Gat => "gat",
            ModelKind::Ckgcn => "ckgcn",
            ModelKind::Ckgat => "ckgat",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gcn" => Ok(ModelKind::Gcn),
            "gat" => Ok(ModelKind::Gat),
            "ckgcn" => Ok(ModelKind::Ckgcn),
            "ckgat" => Ok(ModelKind::Ckgat),
            other => Err(Error::InvalidArgument(format!("unknown model '{other}'"))),
        }
    }
}

/// Architecture hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub num_classes: usize,
    /// Width of each aggregation branch in every hidden layer.
    pub hidden: Vec<usize>,
    /// Attention heads per hidden layer (GAT family).
    pub heads: usize,
    /// Attention heads in the output layer (GAT family).
    pub output_heads: usize,
    pub dropout: f64,
    /// Also drop entries of the learned kernel during training.
    pub kernel_dropout: bool,
    pub latent_dim: usize,
    pub kernel_layers: usize,
}

impl ModelSpec {
    /// Two-layer defaults: 16 hidden units for the GCN family, 8 heads of
    /// 8 units for the GAT family.
    pub fn new(kind: ModelKind, input_dim: usize, num_classes: usize) -> Self {
        let hidden = if kind.uses_attention() { 8 } else { 16 };
        Self {
            kind,
            input_dim,
            num_classes,
            hidden: vec![hidden],
            heads: 8,
            output_heads: 1,
            dropout: 0.5,
            kernel_dropout: false,
            latent_dim: 16.min(input_dim),
            kernel_layers: 4,
        }
    }

    /// Layer shapes implied by the spec.
    pub fn layers(&self) -> Vec<LayerSpec> {
        let branches = if self.kind.uses_kernel() { 2 } else { 1 };
        let attn = self.kind.uses_attention();
        let mut width = self.input_dim;
        let mut out = Vec::new();
        for &h in &self.hidden {
            let heads = if attn { self.heads } else { 1 };
            out.push(LayerSpec {
                in_width: width,
                out_width: h,
                heads,
                activation: Activation::Relu,
                dropout: self.dropout,
            });
            width = h * heads * branches;
        }
        out.push(LayerSpec {
            in_width: width,
            out_width: self.num_classes,
            heads: if attn { self.output_heads } else { 1 },
            activation: Activation::Softmax,
            dropout: self.dropout,
        });
        out
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.input_dim == 0 || self.num_classes == 0 {
            return bad("input width and class count must be positive");
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be positive");
        }
        if self.kind.uses_attention() && (self.heads == 0 || self.output_heads == 0) {
            return bad("attention models need at least one head per layer");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_width: usize,
    pub out_width: usize,
    pub heads: usize,
    pub activation: Activation,
    pub dropout: f64,
}

/// One attention mechanism: `θ` of length `2 * out_width`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionHead {
    pub theta: ParamId,
    pub slope: f64,
}

/// Parameter handles of a built model. Values live in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub spec: ModelSpec,
    pub layers: Vec<LayerSpec>,
    /// `W^l`, shared by all heads of layer `l`.
    pub weights: Vec<ParamId>,
    /// Attention heads per layer; empty for the GCN family.
    pub heads: Vec<Vec<AttentionHead>>,
    pub kernel: Option<KernelModel>,
}

/// The fixed inputs of a forward pass.
#[derive(Debug, Clone)]
pub struct GraphInput {
    pub features: Tensor,
    /// `Â`, stored on the pattern of `Ã` (self-loops included).
    pub a_hat: SparseMatrix,
}

impl GraphInput {
    pub fn new(features: Tensor, a_hat: SparseMatrix) -> Result<Self> {
        if features.rows() != a_hat.n() {
            return Err(Error::shape(
                "graph input",
                format!("{} feature rows for n={}", features.rows(), a_hat.n()),
            ));
        }
        Ok(Self { features, a_hat })
    }

    pub fn pattern(&self) -> &Arc<Pattern> {
        self.a_hat.pattern()
    }

    pub fn n(&self) -> usize {
        self.a_hat.n()
    }
}

/// Tape handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub features: Var,
    pub logits: Var,
    /// Encoder output for every node (kernel models).
    pub embeddings: Option<Var>,
    /// `K` on the pattern of `Ã` (kernel models).
    pub kernel: Option<Var>,
    /// `K̂ = K ⊙ Â` (CKGCN).
    pub composite: Option<Var>,
    /// Normalised attention values per `(layer, head)`, before dropout.
    pub attention: Vec<(usize, usize, Var)>,
}

/// A model the trainer can drive.
pub trait GraphModel {
    fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        input: &GraphInput,
        train: bool,
        rng: &mut dyn RngCore,
    ) -> Result<ForwardPass>;

    fn kernel(&self) -> Option<&KernelModel> {
        None
    }
}

impl ModelParams {
    /// Registers all parameters of `spec` in `store`.
    pub fn build(spec: &ModelSpec, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let layers = spec.layers();
        let mut weights = Vec::new();
        let mut heads = Vec::new();
        for (l, ls) in layers.iter().enumerate() {
            weights.push(store.add_glorot(format!("W{l}"), ls.in_width, ls.out_width, true, rng));
            if spec.kind.uses_attention() {
                heads.push(
                    (0..ls.heads)
                        .map(|m| AttentionHead {
                            theta: store.add_glorot(
                                format!("theta{l}.{m}"),
                                2 * ls.out_width,
                                1,
                                true,
                                rng,
                            ),
                            slope: LEAKY_SLOPE,
                        })
                        .collect(),
                );
            }
        }
        let kernel = if spec.kind.uses_kernel() {
            Some(KernelModel::new(
                store,
                spec.input_dim,
                spec.latent_dim,
                spec.kernel_layers,
                rng,
            )?)
        } else {
            None
        };
        Ok(Self {
            spec: spec.clone(),
            layers,
            weights,
            heads,
            kernel,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.spec.kind
    }

    /// Checks that every handle exists in `store` with the shape the
    /// layer layout implies, e.g. after loading both from disk.
    pub fn check_store(&self, store: &ParamStore) -> Result<()> {
        let want = |id: ParamId, rows: usize, cols: usize| -> Result<()> {
            if id.0 >= store.len() {
                return Err(Error::InvalidArgument(format!("parameter {} missing", id.0)));
            }
            let got = store.get(id).shape();
            if got != (rows, cols) {
                return Err(Error::shape(
                    "parameter store",
                    format!("{} is {got:?}, expected ({rows}, {cols})", store.param(id).name),
                ));
            }
            Ok(())
        };
        if self.layers != self.spec.layers() || self.weights.len() != self.layers.len() {
            return Err(Error::InvalidArgument("layer layout does not match spec".into()));
        }
        for (l, ls) in self.layers.iter().enumerate() {
            want(self.weights[l], ls.in_width, ls.out_width)?;
            if self.kind().uses_attention() {
                let heads = self.heads.get(l).map_or(0, Vec::len);
                if heads != ls.heads {
                    return Err(Error::InvalidArgument(format!("layer {l} has {heads} heads")));
                }
                for h in &self.heads[l] {
                    want(h.theta, 2 * ls.out_width, 1)?;
                }
            }
        }
        match (&self.kernel, self.kind().uses_kernel()) {
            (Some(km), true) => {
                let widths = encoder_widths(km.input_dim(), km.latent_dim(), km.encoder.len());
                let rev: Vec<usize> = widths.iter().rev().copied().collect();
                for (layers, w) in [(&km.encoder, &widths), (&km.decoder, &rev)] {
                    if layers.len() + 1 != w.len() {
                        return Err(Error::InvalidArgument("autoencoder depth mismatch".into()));
                    }
                    for (a, pair) in layers.iter().zip(w.windows(2)) {
                        want(a.weight, pair[0], pair[1])?;
                        want(a.bias, 1, pair[1])?;
                    }
                }
                Ok(())
            }
            (None, false) => Ok(()),
            _ => Err(Error::InvalidArgument("kernel presence does not match model kind".into())),
        }
    }
}

/// Row-normalised attention values over `pattern` for transformed features
/// `hw` (`n x f`) and `θ` (`2f x 1`).
pub fn gat_attention(
    tape: &mut Tape,
    hw: Var,
    theta: Var,
    pattern: &Arc<Pattern>,
    slope: f64,
) -> Result<Var> {
    let e = tape.attention_logits(hw, theta, pattern)?;
    let e = tape.leaky_relu(e, slope)?;
    tape.segment_softmax(e, pattern)
}

/// Evaluation-mode attention matrix `T` for given `H`, `W` and `θ`.
pub fn attention_matrix(
    h: &Tensor,
    w: &Tensor,
    theta: &Tensor,
    pattern: &Arc<Pattern>,
) -> Result<SparseMatrix> {
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let wv = tape.constant(w.clone());
    let tv = tape.constant(theta.clone());
    let hw = tape.matmul(hv, wv)?;
    let t = gat_attention(&mut tape, hw, tv, pattern, LEAKY_SLOPE)?;
    SparseMatrix::new(Arc::clone(pattern), tape.value(t).data().to_vec())
}

impl GraphModel for ModelParams {
    fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        input: &GraphInput,
        train: bool,
        rng: &mut dyn RngCore,
    ) -> Result<ForwardPass> {
        let pattern = input.pattern();
        if input.features.cols() != self.spec.input_dim {
            return Err(Error::shape(
                "forward",
                format!(
                    "feature width {}, model expects {}",
                    input.features.cols(),
                    self.spec.input_dim
                ),
            ));
        }
        let x = tape.constant(input.features.clone());
        let a_hat = tape.constant(Tensor::column(input.a_hat.values().to_vec()));

        let mut pass = ForwardPass {
            features: x,
            logits: x,
            embeddings: None,
            kernel: None,
            composite: None,
            attention: Vec::new(),
        };

        // The kernel is computed once from raw features and shared by all
        // layers and heads.
        let mut agg_kernel = None;
        if let Some(km) = &self.kernel {
            let z = km.encode(tape, store, x)?;
            let k = kernel_on_edges(tape, z, pattern)?;
            pass.embeddings = Some(z);
            pass.kernel = Some(k);
            let k = if self.spec.kernel_dropout {
                tape.dropout(k, self.spec.dropout, train, rng)?
            } else {
                k
            };
            if self.kind() == ModelKind::Ckgcn {
                pass.composite = Some(tape.mul(k, a_hat)?);
            }
            agg_kernel = Some(k);
        }

        let last = self.layers.len() - 1;
        let mut h = x;
        for (l, ls) in self.layers.iter().enumerate() {
            let hd = tape.dropout(h, ls.dropout, train, rng)?;
            let w = tape.param(store, self.weights[l]);
            let hw = tape.matmul(hd, w)?;

            // Aggregation operators for this layer, one group per head.
            let mut groups: Vec<Vec<Var>> = Vec::new();
            match self.kind() {
                ModelKind::Gcn => groups.push(vec![a_hat]),
                ModelKind::Ckgcn => {
                    groups.push(vec![pass.composite.expect("built above"), a_hat]);
                }
                ModelKind::Gat | ModelKind::Ckgat => {
                    for (m, head) in self.heads[l].iter().enumerate() {
                        let theta = tape.param(store, head.theta);
                        let t = gat_attention(tape, hw, theta, pattern, head.slope)?;
                        pass.attention.push((l, m, t));
                        let t = tape.dropout(t, ls.dropout, train, rng)?;
                        if self.kind() == ModelKind::Ckgat {
                            let k = agg_kernel.expect("built above");
                            let km = tape.mul(k, t)?;
                            groups.push(vec![km, t]);
                        } else {
                            groups.push(vec![t]);
                        }
                    }
                }
            }

            if l < last {
                let mut parts = Vec::new();
                for g in &groups {
                    for &op in g {
                        parts.push(tape.spmm(pattern, op, hw)?);
                    }
                }
                let cat = if parts.len() == 1 {
                    parts[0]
                } else {
                    tape.concat_cols(&parts)?
                };
                h = tape.relu(cat)?;
            } else {
                let mut acc: Option<Var> = None;
                for g in &groups {
                    for &op in g {
                        let y = tape.spmm(pattern, op, hw)?;
                        acc = Some(match acc {
                            None => y,
                            Some(a) => tape.add(a, y)?,
                        });
                    }
                }
                h = acc.expect("at least one aggregation operator");
            }
        }
        pass.logits = h;
        Ok(pass)
    }

    fn kernel(&self) -> Option<&KernelModel> {
        self.kernel.as_ref()
    }
}

/// Class probabilities in evaluation mode.
pub fn predict(model: &dyn GraphModel, store: &ParamStore, input: &GraphInput) -> Result<Tensor> {
    let mut tape = Tape::new();
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    let pass = model.forward(&mut tape, store, input, false, &mut rng)?;
    let p = tape.row_softmax(pass.logits)?;
    Ok(tape.value(p).clone())
}
