//! Subcommand implementations. Machine-readable results go to stdout as
//! JSON lines; human summaries go to stderr.

use std::fs;
use std::io::{self, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::thread;
use std::time::Instant;

use ckgnn::data::{export_kernel_comparison, gen_sbm, DatasetBundle, SbmConfig};
use ckgnn::kernel::{composite_kernel, SparseKernel};
use ckgnn::models::{predict, ModelParams};
use ckgnn::params::ParamStore;
use ckgnn::train::{
    evaluate_accuracy, train_selecting_latent, train_with, EpochMetrics, SplitMasks, Subset,
    TrainOutcome, LATENT_CANDIDATES,
};
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, TrainOpts};
use crate::{verify as checks, CliError, GenArgs};

/// Everything needed to reload a trained model.
#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    /// The resolved configuration, with the latent width actually used.
    pub config: RunConfig,
    pub model: ModelParams,
    pub store: ParamStore,
    pub masks: SplitMasks,
}

/// Final line of `train`, one line per seed in `sweep`.
#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    #[serde(rename = "type")]
    pub kind: &'static str,
    pub config: RunConfig,
    pub data: String,
    pub seed: u64,
    pub latent_z: usize,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub test_acc: f64,
    pub stopped_early: bool,
    pub wall_seconds: f64,
}

#[derive(Serialize)]
struct EpochLine<'a> {
    #[serde(rename = "type")]
    kind: &'static str,
    #[serde(flatten)]
    metrics: &'a EpochMetrics,
}

#[derive(Debug, Serialize)]
pub struct SweepSummary {
    #[serde(rename = "type")]
    pub kind: &'static str,
    pub runs: usize,
    pub test_acc_mean: f64,
    /// Sample standard deviation (zero for a single run).
    pub test_acc_std: f64,
    pub val_acc_mean: f64,
}

fn load_bundle(path: &Path) -> Result<DatasetBundle, CliError> {
    DatasetBundle::load(path).map_err(|e| match e {
        ckgnn::Error::Io(io) => CliError::Usage(format!("cannot read {}: {io}", path.display())),
        other => CliError::Usage(format!("{}: {other}", path.display())),
    })
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    let ck: Checkpoint = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("invalid checkpoint {}: {e}", path.display())))?;
    ck.model
        .check_store(&ck.store)
        .map_err(|e| CliError::Usage(format!("inconsistent checkpoint {}: {e}", path.display())))?;
    Ok(ck)
}

fn check_fits(ck: &Checkpoint, bundle: &DatasetBundle) -> Result<(), CliError> {
    let spec = &ck.model.spec;
    if spec.input_dim != bundle.dim() || spec.num_classes != bundle.num_classes() || ck.masks.n() != bundle.n() {
        return Err(CliError::Usage(format!(
            "checkpoint expects d={} c={} n={}, dataset has d={} c={} n={}",
            spec.input_dim,
            spec.num_classes,
            ck.masks.n(),
            bundle.dim(),
            bundle.num_classes(),
            bundle.n()
        )));
    }
    Ok(())
}

fn print_json(value: &impl Serialize) -> Result<(), CliError> {
    let line = serde_json::to_string(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut out = io::stdout().lock();
    writeln!(out, "{line}").map_err(|e| CliError::Runtime(e.to_string()))
}

pub fn gen_synthetic(args: &GenArgs) -> Result<(), CliError> {
    let bundle = gen_sbm(&SbmConfig {
        n: args.n,
        classes: args.classes,
        p_in: args.p_in,
        p_out: args.p_out,
        dim: args.dim,
        signal: args.signal,
        seed: args.seed,
    })?;
    bundle.save(&args.out)?;
    eprintln!(
        "wrote {}: n={} d={} c={} edges={}",
        args.out.display(),
        bundle.n(),
        bundle.dim(),
        bundle.num_classes(),
        bundle.graph().num_edges()
    );
    Ok(())
}

/// One training run; `on_epoch` sees the epochs of the run that is kept.
fn run_once(
    bundle: &DatasetBundle,
    cfg: &RunConfig,
    data: &Path,
    on_epoch: &mut dyn FnMut(&EpochMetrics),
) -> Result<(RunRecord, TrainOutcome, SplitMasks), CliError> {
    let seed = cfg.train.seed;
    let masks = cfg.split.masks(bundle, seed)?;
    let start = Instant::now();
    let (latent_z, outcome) = if cfg.select_latent {
        let (z, out) = train_selecting_latent(bundle, &masks, &cfg.train, &LATENT_CANDIDATES)?;
        out.metrics.epochs.iter().for_each(&mut *on_epoch);
        (z, out)
    } else {
        let out = train_with(bundle, &masks, &cfg.train, on_epoch)?;
        (out.model.spec.latent_dim, out)
    };
    let m = &outcome.metrics;
    let mut config = cfg.clone();
    if config.train.model.uses_kernel() {
        config.train.latent_z = latent_z;
    }
    let record = RunRecord {
        kind: "run",
        config,
        data: data.display().to_string(),
        seed,
        latent_z,
        epochs: m.epochs.len(),
        best_epoch: m.best_epoch,
        best_val_acc: m.best_val_acc,
        test_acc: m.test_acc,
        stopped_early: m.stopped_early,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((record, outcome, masks))
}

pub fn train(data: &Path, opts: &TrainOpts, save: Option<&Path>) -> Result<(), CliError> {
    let cfg = opts.resolve()?;
    let bundle = load_bundle(data)?;
    let mut write_err = None;
    let (record, outcome, masks) = run_once(&bundle, &cfg, data, &mut |m| {
        if let Err(e) = print_json(&EpochLine { kind: "epoch", metrics: m }) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    print_json(&record)?;
    eprintln!(
        "{} seed {}: best epoch {} val {:.4} test {:.4}",
        cfg.train.model, record.seed, record.best_epoch, record.best_val_acc, record.test_acc
    );
    if let Some(path) = save {
        let ck = Checkpoint {
            config: record.config,
            model: outcome.model,
            store: outcome.store,
            masks,
        };
        let text = serde_json::to_string(&ck).map_err(|e| CliError::Runtime(e.to_string()))?;
        fs::write(path, text).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    #[serde(rename = "type")]
    kind: &'static str,
    model: ckgnn::models::ModelKind,
    train_acc: f64,
    val_acc: f64,
    test_acc: f64,
}

pub fn eval(params: &Path, data: &Path) -> Result<(), CliError> {
    let ck = load_checkpoint(params)?;
    let bundle = load_bundle(data)?;
    check_fits(&ck, &bundle)?;
    let probs = predict(&ck.model, &ck.store, &bundle.graph_input()?)?;
    let acc = |s: Subset| evaluate_accuracy(&probs, bundle.labels(), ck.masks.get(s));
    print_json(&EvalReport {
        kind: "eval",
        model: ck.model.kind(),
        train_acc: acc(Subset::Train)?,
        val_acc: acc(Subset::Val)?,
        test_acc: acc(Subset::Test)?,
    })
}

pub fn verify(data: &Path, seed: u64) -> Result<(), CliError> {
    let bundle = load_bundle(data)?;
    let report = checks::run(&bundle, seed)?;
    print_json(&report)?;
    if report.passed {
        Ok(())
    } else {
        let mut failed = Vec::new();
        if !report.psd.passed {
            failed.push("psd".to_string());
        }
        failed.extend(
            report
                .grad_check
                .iter()
                .filter(|g| !g.passed)
                .map(|g| format!("grad_check[{}]", g.model)),
        );
        if !report.mmd.passed {
            failed.push("mmd".to_string());
        }
        Err(CliError::Verification(failed.join(", ")))
    }
}

pub fn inspect_kernel(data: &Path, params: &Path, out: &Path) -> Result<(), CliError> {
    let ck = load_checkpoint(params)?;
    let bundle = load_bundle(data)?;
    check_fits(&ck, &bundle)?;
    let km = ck
        .model
        .kernel
        .as_ref()
        .ok_or_else(|| CliError::Usage(format!("model {} has no learned kernel", ck.model.kind())))?;
    let input = bundle.graph_input()?;
    let k = SparseKernel::evaluate(km, &ck.store, &input.features, input.pattern())?;
    let k_hat = composite_kernel(&k, &input.a_hat)?;
    let s = export_kernel_comparison(&k_hat, &input.a_hat, out)?;
    eprintln!(
        "wrote {}: nnz={} mean |K_hat - A_hat| = {:.6}, max = {:.6}",
        out.display(),
        s.nnz,
        s.mean_abs_diff,
        s.max_abs_diff
    );
    Ok(())
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn sweep(data: &Path, seeds: u64, threads: Option<usize>, opts: &TrainOpts) -> Result<(), CliError> {
    if seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    if threads == Some(0) {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    let base = opts.resolve()?;
    let bundle = load_bundle(data)?;
    let workers = threads
        .unwrap_or_else(|| thread::available_parallelism().map_or(1, |p| p.get()))
        .min(seeds as usize);
    let next = AtomicU64::new(0);
    let mut results: Vec<(u64, Result<RunRecord, CliError>)> = thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                scope.spawn(|| {
                    let mut done = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        if i >= seeds {
                            break done;
                        }
                        let mut cfg = base.clone();
                        cfg.train.seed = base.train.seed + i;
                        let r = run_once(&bundle, &cfg, data, &mut |_| {}).map(|(rec, _, _)| rec);
                        done.push((i, r));
                    }
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("sweep worker panicked"))
            .collect()
    });
    results.sort_by_key(|(i, _)| *i);
    let mut records = Vec::with_capacity(results.len());
    for (_, r) in results {
        let rec = r?;
        print_json(&rec)?;
        records.push(rec);
    }
    let tests: Vec<f64> = records.iter().map(|r| r.test_acc).collect();
    let vals: Vec<f64> = records.iter().map(|r| r.best_val_acc).collect();
    let (mean, std) = mean_std(&tests);
    print_json(&SweepSummary {
        kind: "summary",
        runs: records.len(),
        test_acc_mean: mean,
        test_acc_std: std,
        val_acc_mean: mean_std(&vals).0,
    })?;
    eprintln!(
        "{}: Test accuracy (%) {:.2} ± {:.2} over {} seeds",
        base.train.model,
        100.0 * mean,
        100.0 * std,
        records.len()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_matches_hand_values() {
        let (m, s) = mean_std(&[0.8, 0.9, 1.0]);
        assert!((m - 0.9).abs() < 1e-15);
        assert!((s - 0.1).abs() < 1e-15);
        assert_eq!(mean_std(&[0.5]), (0.5, 0.0));
    }
}
