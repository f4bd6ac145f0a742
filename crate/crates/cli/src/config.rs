//! Run configuration: defaults, an optional JSON config file, then flags.

use std::fs;
use std::path::{Path, PathBuf};

use ckgnn::data::DatasetBundle;
use ckgnn::models::ModelKind;
use ckgnn::train::{
    make_semi_supervised_split, make_split, make_supervised_split, split_rng, SplitMasks,
    SplitSizes, TrainConfig,
};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Environment variable holding the default config file path.
pub const CONFIG_ENV: &str = "CKGNN_CONFIG";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    /// 20 labeled nodes per class, 500 validation, 1000 test.
    Semi,
    /// 500 validation, 1000 test, the rest for training.
    Super,
    /// Masks stored in the dataset file.
    File,
    /// Like `semi` with sizes from --train-per-class, --val-size, --test-size.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub kind: SplitKind,
    pub train_per_class: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        let s = SplitSizes::SEMI_SUPERVISED;
        Self {
            kind: SplitKind::Semi,
            train_per_class: s.train_per_class,
            val: s.val,
            test: s.test,
        }
    }
}

impl SplitConfig {
    /// Split for `bundle`; random splits are drawn from the split stream of
    /// `seed`.
    pub fn masks(&self, bundle: &DatasetBundle, seed: u64) -> Result<SplitMasks, CliError> {
        let mut rng = split_rng(seed);
        let masks = match self.kind {
            SplitKind::Semi => make_semi_supervised_split(bundle.labels(), &mut rng)?,
            SplitKind::Super => make_supervised_split(bundle.n(), &mut rng)?,
            SplitKind::Random => make_split(
                bundle.labels(),
                SplitSizes {
                    train_per_class: self.train_per_class,
                    val: self.val,
                    test: self.test,
                },
                &mut rng,
            )?,
            SplitKind::File => bundle
                .masks()
                .cloned()
                .ok_or_else(|| CliError::Usage("--split file: dataset has no mask lines".into()))?,
        };
        Ok(masks)
    }
}

/// Everything needed to reproduce a training run apart from the data.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub split: SplitConfig,
    /// Try latent widths 8 and 16 and keep the better on validation.
    pub select_latent: bool,
}

/// Training flags. Every flag left unset falls back to the config file,
/// then to the built-in default.
#[derive(Debug, Clone, Args)]
pub struct TrainOpts {
    /// JSON config file (overrides defaults; flags override it).
    #[arg(long, env = CONFIG_ENV)]
    pub config: Option<PathBuf>,
    /// gcn, gat, ckgcn or ckgat (default ckgcn).
    #[arg(long, value_parser = parse_model)]
    pub model: Option<ModelKind>,
    #[arg(long, value_enum)]
    pub split: Option<SplitKind>,
    #[arg(long)]
    pub train_per_class: Option<usize>,
    #[arg(long)]
    pub val_size: Option<usize>,
    #[arg(long)]
    pub test_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Weight of the kernel loss (reconstruction minus MMD).
    #[arg(long)]
    pub lambda1: Option<f64>,
    /// Weight of the kernel-spread regulariser.
    #[arg(long)]
    pub lambda2: Option<f64>,
    /// Weight of the MMD term inside the kernel loss.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Latent width of the kernel encoder (clamped to the feature dim).
    #[arg(long)]
    pub latent_z: Option<usize>,
    /// Hidden width per aggregation branch (per head for attention models).
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub output_heads: Option<usize>,
    /// Affine layers per side of the kernel autoencoder.
    #[arg(long)]
    pub kernel_layers: Option<usize>,
    /// Apply dropout to learned kernel values as well.
    #[arg(long)]
    pub kernel_dropout: bool,
    /// Epochs of kernel-only training before joint training.
    #[arg(long)]
    pub warmup_epochs: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Epochs without validation improvement before stopping (capped at
    /// --epochs when only that is given).
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Choose the latent width from {8, 16} by validation accuracy.
    #[arg(long)]
    pub select_latent: bool,
}

fn parse_model(s: &str) -> Result<ModelKind, String> {
    s.parse().map_err(|e: ckgnn::Error| e.to_string())
}

pub fn load_file(path: &Path) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
}

impl TrainOpts {
    /// Defaults, then the config file, then flags; validated.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match self.config.as_deref() {
            Some(p) if !p.as_os_str().is_empty() => load_file(p)?,
            _ => RunConfig::default(),
        };
        let t = &mut cfg.train;
        macro_rules! set {
            ($($src:ident => $dst:expr),* $(,)?) => {
                $(if let Some(v) = self.$src { $dst = v; })*
            };
        }
        set!(
            model => t.model,
            lr => t.lr,
            weight_decay => t.weight_decay,
            dropout => t.dropout,
            lambda1 => t.lambda1,
            lambda2 => t.lambda2,
            beta => t.beta,
            latent_z => t.latent_z,
            heads => t.heads,
            output_heads => t.output_heads,
            kernel_layers => t.kernel_layers,
            warmup_epochs => t.warmup_epochs,
            epochs => t.epochs,
            patience => t.patience,
            seed => t.seed,
            split => cfg.split.kind,
            train_per_class => cfg.split.train_per_class,
            val_size => cfg.split.val,
            test_size => cfg.split.test,
        );
        // A shorter run than the default patience would otherwise be rejected.
        if self.epochs.is_some() && self.patience.is_none() && t.patience > t.epochs {
            t.patience = t.epochs;
        }
        if self.hidden.is_some() {
            t.hidden = self.hidden;
        }
        if self.kernel_dropout {
            t.kernel_dropout = true;
        }
        if self.select_latent {
            cfg.select_latent = true;
        }
        cfg.train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }
}
