//! Splits, the training loop with early stopping, and evaluation.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, AdamState, Tape, Var};
use crate::data::DatasetBundle;
use crate::error::{Error, Result};
use crate::kernel::{difference_regularizer, kernel_loss, ClassPartition, PairPlan};
use crate::models::{predict, ForwardPass, GraphInput, GraphModel, ModelKind, ModelParams, ModelSpec};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Train = 0,
    Val = 1,
    Test = 2,
}

impl Subset {
    pub const ALL: [Subset; 3] = [Subset::Train, Subset::Val, Subset::Test];
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Subset::Train => "train",
            Subset::Val => "val",
            Subset::Test => "test",
        })
    }
}

impl FromStr for Subset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Subset::Train),
            "val" => Ok(Subset::Val),
            "test" => Ok(Subset::Test),
            _ => Err(Error::InvalidArgument(format!("unknown subset {s:?}"))),
        }
    }
}

/// Disjoint, nonempty train/validation/test node sets. Each set is kept in
/// the order it was given.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitMasks {
    n: usize,
    sets: [Vec<usize>; 3],
}

impl SplitMasks {
    pub fn new(n: usize, train: Vec<usize>, val: Vec<usize>, test: Vec<usize>) -> Result<Self> {
        let sets = [train, val, test];
        let mut owner: Vec<Option<Subset>> = vec![None; n];
        for (s, ids) in Subset::ALL.into_iter().zip(&sets) {
            if ids.is_empty() {
                return Err(Error::Split(format!("{s} set is empty")));
            }
            for &i in ids {
                if i >= n {
                    return Err(Error::Split(format!("{s} node {i} out of range for n={n}")));
                }
                if let Some(prev) = owner[i] {
                    return Err(Error::Split(format!("node {i} is in both {prev} and {s}")));
                }
                owner[i] = Some(s);
            }
        }
        Ok(Self { n, sets })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, s: Subset) -> &[usize] {
        &self.sets[s as usize]
    }

    pub fn train(&self) -> &[usize] {
        self.get(Subset::Train)
    }

    pub fn val(&self) -> &[usize] {
        self.get(Subset::Val)
    }

    pub fn test(&self) -> &[usize] {
        self.get(Subset::Test)
    }

    /// Boolean mask over all nodes.
    pub fn mask(&self, s: Subset) -> Vec<bool> {
        let mut m = vec![false; self.n];
        for &i in self.get(s) {
            m[i] = true;
        }
        m
    }
}

/// Sizes for [`make_split`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train_per_class: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    /// 20 labeled nodes per class, 500 validation and 1000 test nodes.
    pub const SEMI_SUPERVISED: SplitSizes = SplitSizes {
        train_per_class: 20,
        val: 500,
        test: 1000,
    };
}

/// RNG stream used for split construction, independent of the training
/// stream for the same seed.
pub fn split_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// `train_per_class` random nodes of every class for training, then `val`
/// and `test` nodes drawn from the remainder.
pub fn make_split(labels: &[usize], sizes: SplitSizes, rng: &mut impl Rng) -> Result<SplitMasks> {
    let n = labels.len();
    let c = labels.iter().map(|&y| y + 1).max().unwrap_or(0);
    let mut by_class = vec![Vec::new(); c];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    if let Some((a, m)) = by_class
        .iter()
        .enumerate()
        .find(|(_, m)| m.len() < sizes.train_per_class)
    {
        return Err(Error::Split(format!(
            "class {a} has {} nodes, need {}",
            m.len(),
            sizes.train_per_class
        )));
    }
    let needed = sizes.train_per_class * c + sizes.val + sizes.test;
    if n < needed {
        return Err(Error::Split(format!("need at least {needed} nodes, have {n}")));
    }
    let mut train = Vec::new();
    let mut rest = Vec::new();
    for members in &mut by_class {
        members.shuffle(rng);
        train.extend_from_slice(&members[..sizes.train_per_class]);
        rest.extend_from_slice(&members[sizes.train_per_class..]);
    }
    rest.shuffle(rng);
    let val = rest[..sizes.val].to_vec();
    let test = rest[sizes.val..sizes.val + sizes.test].to_vec();
    SplitMasks::new(n, train, val, test)
}

/// 20 nodes per class for training, 500 for validation, 1000 for testing.
pub fn make_semi_supervised_split(labels: &[usize], rng: &mut impl Rng) -> Result<SplitMasks> {
    make_split(labels, SplitSizes::SEMI_SUPERVISED, rng)
}

/// 500 validation and 1000 test nodes; all remaining nodes train.
pub fn make_supervised_split(n: usize, rng: &mut impl Rng) -> Result<SplitMasks> {
    if n <= 1500 {
        return Err(Error::Split(format!("supervised split needs n > 1500, got {n}")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let val = perm[..500].to_vec();
    let test = perm[500..1500].to_vec();
    let train = perm[1500..].to_vec();
    SplitMasks::new(n, train, val, test)
}

/// Fraction of `mask` nodes whose arg-max prediction (lowest index on
/// ties) equals the label.
pub fn evaluate_accuracy(probabilities: &Tensor, labels: &[usize], mask: &[usize]) -> Result<f64> {
    if mask.is_empty() {
        return Err(Error::InvalidArgument("accuracy over an empty mask".into()));
    }
    if labels.len() != probabilities.rows() {
        return Err(Error::shape(
            "evaluate_accuracy",
            format!("{} labels for {} rows", labels.len(), probabilities.rows()),
        ));
    }
    let mut hits = 0usize;
    for &i in mask {
        if i >= labels.len() {
            return Err(Error::shape("evaluate_accuracy", format!("mask node {i} out of range")));
        }
        if probabilities.argmax_row(i) == labels[i] {
            hits += 1;
        }
    }
    Ok(hits as f64 / mask.len() as f64)
}

/// Hyper-parameters of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub beta: f64,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub latent_z: usize,
    /// Width per aggregation branch (per head for the GAT family).
    pub hidden: Option<usize>,
    pub heads: usize,
    pub output_heads: usize,
    pub kernel_layers: usize,
    pub kernel_dropout: bool,
    /// Epochs spent on the kernel objective alone before joint training.
    pub warmup_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Ckgcn,
            lr: 0.01,
            weight_decay: 5e-4,
            dropout: 0.5,
            lambda1: 0.5,
            lambda2: 0.1,
            beta: 1.0,
            epochs: 300,
            patience: 30,
            seed: 0,
            latent_z: 16,
            hidden: None,
            heads: 8,
            output_heads: 1,
            kernel_layers: 4,
            kernel_dropout: false,
            warmup_epochs: 0,
        }
    }
}

impl TrainConfig {
    pub fn new(model: ModelKind) -> Self {
        Self {
            model,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        for (name, v) in [
            ("weight_decay", self.weight_decay),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("beta", self.beta),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.patience > self.epochs {
            return bad(format!(
                "patience {} exceeds epochs {}",
                self.patience, self.epochs
            ));
        }
        if self.latent_z == 0 || self.kernel_layers == 0 {
            return bad("latent width and kernel depth must be positive".into());
        }
        if self.warmup_epochs > 0 && !self.model.uses_kernel() {
            return bad(format!("warmup needs a kernel model, got {}", self.model));
        }
        Ok(())
    }

    /// Architecture for `d` input features and `c` classes. The latent
    /// width is capped at `d`.
    pub fn model_spec(&self, d: usize, c: usize) -> ModelSpec {
        let mut spec = ModelSpec::new(self.model, d, c);
        if let Some(h) = self.hidden {
            spec.hidden = vec![h];
        }
        spec.heads = self.heads;
        spec.output_heads = self.output_heads;
        spec.dropout = self.dropout;
        spec.kernel_dropout = self.kernel_dropout;
        spec.latent_dim = self.latent_z.min(d);
        spec.kernel_layers = self.kernel_layers;
        spec
    }
}

/// One row of the training log. Losses are measured in training mode
/// before that epoch's update; accuracies in evaluation mode on the same
/// parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss_ce: f64,
    /// `L_k`, when the kernel objective is active.
    pub loss_kernel: Option<f64>,
    /// `L_d`, when the kernel objective is active.
    pub loss_diff: Option<f64>,
    pub loss_l2: f64,
    pub loss_total: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub epochs: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    /// Test accuracy of the parameters from `best_epoch`.
    pub test_acc: f64,
    pub stopped_early: bool,
}

/// Trained model, its parameter values, and the training log.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ModelParams,
    pub store: ParamStore,
    pub metrics: Metrics,
}

/// Tape handles of the pieces of the training objective.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub ce: Var,
    pub kernel: Option<Var>,
    pub diff: Option<Var>,
    pub l2: Var,
}

/// Fixed ingredients of the objective.
#[derive(Debug, Clone)]
pub struct Objective<'a> {
    pub labels: &'a [usize],
    pub train: &'a [usize],
    pub lambda1: f64,
    pub lambda2: f64,
    pub beta: f64,
    pub weight_decay: f64,
    /// Labeled pairs for `L_k` and `L_d`; `None` disables both.
    pub plan: Option<PairPlan>,
}

impl<'a> Objective<'a> {
    /// Kernel terms are active only for kernel models with a nonzero weight.
    pub fn new(
        model: &dyn GraphModel,
        labels: &'a [usize],
        train: &'a [usize],
        config: &TrainConfig,
    ) -> Result<Self> {
        let active = model.kernel().is_some() && (config.lambda1 > 0.0 || config.lambda2 > 0.0);
        let plan = if active {
            Some(PairPlan::new(&ClassPartition::new(labels, train))?)
        } else {
            None
        };
        Ok(Self {
            labels,
            train,
            lambda1: config.lambda1,
            lambda2: config.lambda2,
            beta: config.beta,
            weight_decay: config.weight_decay,
            plan,
        })
    }

    /// `L_ce + λ1 L_k + λ2 L_d + (wd/2) Σ ‖W‖²` on top of a forward pass.
    pub fn assemble(
        &self,
        tape: &mut Tape,
        model: &dyn GraphModel,
        store: &ParamStore,
        pass: &ForwardPass,
    ) -> Result<LossTerms> {
        let ce = tape.masked_cross_entropy(pass.logits, self.labels, self.train)?;
        let mut total = ce;
        let (mut kernel, mut diff) = (None, None);
        if let (Some(plan), Some(km), Some(z)) = (&self.plan, model.kernel(), pass.embeddings) {
            let xbar = km.decode(tape, store, z)?;
            let lk = kernel_loss(tape, pass.features, z, xbar, plan, self.beta)?;
            let ld = difference_regularizer(tape, lk.pair_values)?;
            let a = tape.scale(lk.total, self.lambda1)?;
            let b = tape.scale(ld, self.lambda2)?;
            total = tape.add(total, a)?;
            total = tape.add(total, b)?;
            kernel = Some(lk.total);
            diff = Some(ld);
        }
        let mut sq = tape.constant(Tensor::scalar(0.0));
        for (id, p) in store.iter() {
            if p.decay {
                let v = tape.param(store, id);
                let s = tape.square(v)?;
                let s = tape.sum(s)?;
                sq = tape.add(sq, s)?;
            }
        }
        let l2 = tape.scale(sq, 0.5 * self.weight_decay)?;
        let total = tape.add(total, l2)?;
        Ok(LossTerms {
            total,
            ce,
            kernel,
            diff,
            l2,
        })
    }
}

fn diverged(epoch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Diverged {
            epoch,
            ce: f64::NAN,
            kernel: f64::NAN,
            diff: f64::NAN,
        },
        other => other,
    }
}

/// Builds the model from `config.seed` and trains it on `masks`.
pub fn train(bundle: &DatasetBundle, masks: &SplitMasks, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with(bundle, masks, config, &mut |_| {})
}

/// [`train`] with a callback invoked after every epoch.
pub fn train_with(
    bundle: &DatasetBundle,
    masks: &SplitMasks,
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    config.validate()?;
    if masks.n() != bundle.n() {
        return Err(Error::Split(format!(
            "masks cover {} nodes, dataset has {}",
            masks.n(),
            bundle.n()
        )));
    }
    let spec = config.model_spec(bundle.dim(), bundle.num_classes());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut store = ParamStore::new();
    let model = ModelParams::build(&spec, &mut store, &mut rng)?;
    let input = bundle.graph_input()?;
    let metrics = train_model(
        &model,
        &mut store,
        &input,
        bundle.labels(),
        masks,
        config,
        &mut rng,
        on_epoch,
    )?;
    Ok(TrainOutcome {
        model,
        store,
        metrics,
    })
}

/// Latent widths tried by [`train_selecting_latent`].
pub const LATENT_CANDIDATES: [usize; 2] = [8, 16];

/// Trains once per latent width in `candidates` and keeps the run with the
/// highest best-epoch validation accuracy (the earlier candidate on ties).
/// Models without a kernel train once with `config` unchanged.
pub fn train_selecting_latent(
    bundle: &DatasetBundle,
    masks: &SplitMasks,
    config: &TrainConfig,
    candidates: &[usize],
) -> Result<(usize, TrainOutcome)> {
    if !config.model.uses_kernel() {
        return Ok((config.latent_z, train(bundle, masks, config)?));
    }
    let mut best: Option<(usize, TrainOutcome)> = None;
    for &z in candidates {
        let cfg = TrainConfig {
            latent_z: z,
            ..config.clone()
        };
        let out = train(bundle, masks, &cfg)?;
        if best
            .as_ref()
            .is_none_or(|b| out.metrics.best_val_acc > b.1.metrics.best_val_acc)
        {
            best = Some((z, out));
        }
    }
    best.ok_or_else(|| Error::InvalidArgument("no latent width candidates".into()))
}

/// Full-batch training of an already initialised model. On return `store`
/// holds the parameters of the best validation epoch.
#[allow(clippy::too_many_arguments)]
pub fn train_model(
    model: &dyn GraphModel,
    store: &mut ParamStore,
    input: &GraphInput,
    labels: &[usize],
    masks: &SplitMasks,
    config: &TrainConfig,
    rng: &mut dyn RngCore,
    on_epoch: &mut dyn FnMut(&EpochMetrics),
) -> Result<Metrics> {
    config.validate()?;
    if labels.len() != input.n() || masks.n() != input.n() {
        return Err(Error::shape(
            "train",
            format!(
                "{} labels and {}-node masks for n={}",
                labels.len(),
                masks.n(),
                input.n()
            ),
        ));
    }
    let objective = Objective::new(model, labels, masks.train(), config)?;
    let adam = Adam::with_lr(config.lr);

    if config.warmup_epochs > 0 {
        warmup(model, store, input, &objective, &adam, config.warmup_epochs)?;
    }

    let mut state = AdamState::new(store);
    let mut log = Vec::new();
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut stopped_early = false;
    for epoch in 0..config.epochs {
        let (train_acc, val_acc, val_loss) =
            eval_split(model, store, input, labels, masks).map_err(|e| diverged(epoch, e))?;
        if best.as_ref().is_none_or(|b| val_acc > b.1) {
            best = Some((epoch, val_acc, store.clone()));
        }

        let mut tape = Tape::new();
        let step = (|| {
            let pass = model.forward(&mut tape, store, input, true, rng)?;
            objective.assemble(&mut tape, model, store, &pass)
        })()
        .map_err(|e| diverged(epoch, e))?;
        let value = |v: Option<Var>| v.map(|v| tape.value(v).item());
        let m = EpochMetrics {
            epoch,
            loss_ce: tape.value(step.ce).item(),
            loss_kernel: value(step.kernel),
            loss_diff: value(step.diff),
            loss_l2: tape.value(step.l2).item(),
            loss_total: tape.value(step.total).item(),
            train_acc,
            val_acc,
            val_loss,
        };
        if !m.loss_total.is_finite() {
            return Err(Error::Diverged {
                epoch,
                ce: m.loss_ce,
                kernel: m.loss_kernel.unwrap_or(0.0),
                diff: m.loss_diff.unwrap_or(0.0),
            });
        }
        let grads = tape.backward(step.total).map_err(|e| diverged(epoch, e))?;
        adam.step(store, &grads.for_params(store), &mut state)?;
        on_epoch(&m);
        log.push(m);

        let best_epoch = best.as_ref().map_or(0, |b| b.0);
        if epoch - best_epoch >= config.patience {
            stopped_early = epoch + 1 < config.epochs;
            break;
        }
    }

    let (best_epoch, best_val_acc, best_store) = best.expect("at least one epoch ran");
    *store = best_store;
    let probs = predict(model, store, input)?;
    let test_acc = evaluate_accuracy(&probs, labels, masks.test())?;
    Ok(Metrics {
        epochs: log,
        best_epoch,
        best_val_acc,
        test_acc,
        stopped_early,
    })
}

/// Train accuracy, validation accuracy and validation cross-entropy in
/// evaluation mode.
fn eval_split(
    model: &dyn GraphModel,
    store: &ParamStore,
    input: &GraphInput,
    labels: &[usize],
    masks: &SplitMasks,
) -> Result<(f64, f64, f64)> {
    let mut tape = Tape::new();
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    let pass = model.forward(&mut tape, store, input, false, &mut rng)?;
    let val_loss = tape.masked_cross_entropy(pass.logits, labels, masks.val())?;
    let val_loss = tape.value(val_loss).item();
    let logits = tape.value(pass.logits);
    Ok((
        evaluate_accuracy(logits, labels, masks.train())?,
        evaluate_accuracy(logits, labels, masks.val())?,
        val_loss,
    ))
}

/// Optimises `λ1 L_k + λ2 L_d` over the encoder and decoder only.
fn warmup(
    model: &dyn GraphModel,
    store: &mut ParamStore,
    input: &GraphInput,
    objective: &Objective<'_>,
    adam: &Adam,
    epochs: usize,
) -> Result<()> {
    let (Some(km), Some(plan)) = (model.kernel(), &objective.plan) else {
        return Ok(());
    };
    let mut state = AdamState::new(store);
    for epoch in 0..epochs {
        let mut tape = Tape::new();
        let loss = (|| {
            let x = tape.constant(input.features.clone());
            let (z, xbar) = km.forward(&mut tape, store, x)?;
            let lk = kernel_loss(&mut tape, x, z, xbar, plan, objective.beta)?;
            let ld = difference_regularizer(&mut tape, lk.pair_values)?;
            let a = tape.scale(lk.total, objective.lambda1)?;
            let b = tape.scale(ld, objective.lambda2)?;
            tape.add(a, b)
        })()
        .map_err(|e| diverged(epoch, e))?;
        let grads = tape.backward(loss).map_err(|e| diverged(epoch, e))?;
        adam.step(store, &grads.for_params(store), &mut state)?;
    }
    Ok(())
}
