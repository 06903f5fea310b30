use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::eval::{abr_normalized_mse, angle_sweep, sampled_sweep_mape, sweep_mape, MetricsReport, SchemeMetrics};
use super::model::{train_model, ModelSpec, Network, TrainedModel};
use crate::autodiff::{load_checkpoint, resume, save_checkpoint, write_loss_csv, Checkpoint, TrainConfig, TrainError};
use crate::counterfactual::{answer, CounterfactualQuery};
use crate::diagnostics::{
    conditional_independence_test, independence_test, monotonicity_check, IndependenceReport, MonotonicityReport,
};
use crate::error::{Error, Result};
use crate::scm::{scm_by_name, shuffle_x, Dataset};
use crate::structured::StructureKind;

/// Epochs between checkpoint writes during `train`.
pub const CHECKPOINT_EVERY: usize = 10;

/// Rows per z-bin targeted by the conditional independence checks.
const ROWS_PER_BIN: usize = 400;

const SHUFFLE_STREAM: u64 = 0x5eed_5eed;

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Invalid(#[from] Error),
    #[error("training diverged during epoch {epoch}; last good state written to {}", checkpoint.display())]
    Diverged { epoch: usize, checkpoint: PathBuf },
    #[error("hard diagnostic checks failed: {}", failed.join(", "))]
    Diagnostic { failed: Vec<String> },
}

impl RunError {
    /// Process exit code: 2 invalid input, 3 divergence, 4 diagnostic failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Invalid(_) => 2,
            RunError::Diverged { .. } => 3,
            RunError::Diagnostic { .. } => 4,
        }
    }
}

impl From<std::io::Error> for RunError {
    fn from(e: std::io::Error) -> Self {
        RunError::Invalid(e.into())
    }
}

pub type RunResult<T> = std::result::Result<T, RunError>;

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn prepare(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    cfg.save(&out.join("config.json"))
}

/// Samples the configured dataset; shuffling uses its own stream of the seed.
pub fn generate(cfg: &ExperimentConfig) -> Result<Dataset> {
    let scm = scm_by_name(&cfg.scm)?;
    let ds = scm.sample(cfg.n, cfg.seed)?;
    if cfg.shuffle_x {
        shuffle_x(scm.as_ref(), &ds, cfg.seed ^ SHUFFLE_STREAM)
    } else {
        Ok(ds)
    }
}

/// The dataset at `cfg.data`, or a fresh sample.
pub fn load_or_generate(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.data {
        Some(path) => Dataset::read(path),
        None => generate(cfg),
    }
}

/// Training rows and the last `n_heldout` rows.
pub fn split_heldout(ds: &Dataset, n_heldout: usize) -> Result<(Dataset, Dataset)> {
    if n_heldout >= ds.n() {
        return Err(Error::InvalidArgument(format!(
            "{n_heldout} held-out rows leave nothing to train on ({} rows)",
            ds.n()
        )));
    }
    Ok(ds.split(ds.n() - n_heldout))
}

pub fn cmd_generate(cfg: &ExperimentConfig, out: &Path) -> RunResult<PathBuf> {
    prepare(cfg, out)?;
    let path = out.join("data.csv");
    generate(cfg)?.write(&path)?;
    Ok(path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub model: String,
    pub epochs: usize,
    pub converged: bool,
    pub final_nll: Option<f64>,
    pub train_rows: usize,
    pub wall_time_s: f64,
}

/// Trains `spec`, checkpointing to `dir/checkpoint.json` every
/// [`CHECKPOINT_EVERY`] epochs. With `resume_ok` an existing checkpoint in
/// `dir` is continued; the result is bit-identical to an uninterrupted run.
fn train_checkpointed(
    spec: ModelSpec,
    ds: &Dataset,
    cfg: &ExperimentConfig,
    dir: &Path,
    resume_ok: bool,
) -> RunResult<Checkpoint<f64, Network>> {
    let train_cfg = &cfg.train;
    let ck_path = dir.join("checkpoint.json");
    let mut ck = if resume_ok && ck_path.exists() {
        load_checkpoint::<f64, Network>(&ck_path)?
    } else {
        let fresh = TrainConfig {
            max_epochs: 0,
            ..train_cfg.clone()
        };
        train_model(spec, ds, &cfg.flow, &fresh).map_err(Error::from)?
    };
    let records = spec.records(ds)?;
    while ck.epoch < train_cfg.max_epochs && !ck.converged {
        let stage = TrainConfig {
            max_epochs: (ck.epoch + CHECKPOINT_EVERY).min(train_cfg.max_epochs),
            ..train_cfg.clone()
        };
        ck = match resume(ck, &records, &stage) {
            Ok(next) => next,
            Err(TrainError::Diverged { epoch, last_good }) => {
                save_checkpoint(&ck_path, &last_good)?;
                return Err(RunError::Diverged {
                    epoch,
                    checkpoint: ck_path,
                });
            }
            Err(TrainError::Other(e)) => return Err(e.into()),
        };
        save_checkpoint(&ck_path, &ck)?;
    }
    Ok(ck)
}

/// Trains the configured model on the training rows and writes `config.json`,
/// `model.json`, `bgm.json`, `loss.csv`, `checkpoint.json` and
/// `train_report.json` into `out`. A checkpoint left in `out` by a run with
/// the same config is resumed.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> RunResult<(TrainedModel, TrainReport)> {
    let start = Instant::now();
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    let spec = ModelSpec::parse(&cfg.structure)?;
    let same_run = ExperimentConfig::load(&out.join("config.json")).is_ok_and(|c| c == *cfg);
    cfg.save(&out.join("config.json"))?;
    let (train_rows, _) = split_heldout(&load_or_generate(cfg)?, cfg.eval.n_heldout)?;
    let ck = train_checkpointed(spec, &train_rows, cfg, out, same_run)?;
    let model = TrainedModel::new(spec, ck.net.clone());
    model.save(&out.join("model.json"))?;
    std::fs::write(out.join("bgm.json"), model.network.bgm.to_json()?)?;
    write_loss_csv(&out.join("loss.csv"), &ck.history)?;
    let report = TrainReport {
        model: spec.name().into(),
        epochs: ck.epoch,
        converged: ck.converged,
        final_nll: ck.history.last().copied(),
        train_rows: train_rows.n(),
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    write_json(&out.join("train_report.json"), &report)?;
    Ok((model, report))
}

/// `cfg.model` when set, otherwise a model trained into `out`.
fn obtain_model(cfg: &ExperimentConfig, out: &Path) -> RunResult<TrainedModel> {
    match &cfg.model {
        Some(path) => Ok(TrainedModel::load(path)?),
        None => Ok(cmd_train(cfg, out)?.0),
    }
}

fn require_model(cfg: &ExperimentConfig, out: &Path) -> Result<TrainedModel> {
    let path = cfg.model.clone().unwrap_or_else(|| out.join("model.json"));
    if !path.exists() {
        return Err(Error::InvalidArgument(format!(
            "no model at `{}`; run `train` first or set `model`",
            path.display()
        )));
    }
    TrainedModel::load(&path)
}

/// Answers `cfg.query` with the model's mechanism; writes
/// `counterfactual.csv` and `counterfactual.json`. Conditions of the
/// `baseline-xz` mechanism are `[x, z]`.
pub fn cmd_counterfactual(cfg: &ExperimentConfig, out: &Path) -> RunResult<PathBuf> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    let model = require_model(cfg, out)?;
    let path = cfg
        .query
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("`query` must name a query JSON file".into()))?;
    let query: CounterfactualQuery = serde_json::from_str(&std::fs::read_to_string(path)?)
        .map_err(|e| Error::InvalidArgument(format!("query `{}`: {e}", path.display())))?;
    let ds = match query {
        CounterfactualQuery::Ett { .. } => Some(load_or_generate(cfg)?),
        _ => None,
    };
    let ans = answer(&model.network.bgm, &query, ds.as_ref())?;
    let csv = out.join("counterfactual.csv");
    ans.write_csv(&csv)?;
    write_json(&out.join("counterfactual.json"), &ans)?;
    Ok(csv)
}

fn scheme_mape(
    model: &TrainedModel,
    scm: &dyn crate::scm::GroundTruthScm,
    heldout: &Dataset,
    grid: &[f64],
    seed: u64,
) -> Result<f64> {
    match model.spec()? {
        ModelSpec::Structured(_) => sweep_mape(model, scm, heldout, grid),
        _ => sampled_sweep_mape(model, scm, heldout, grid, seed),
    }
}

/// Sweeps every held-out row over `sweep_k` angles. The configured model
/// answers by abduction; the `baseline-x` and `baseline-xz` references,
/// trained with the same settings into `out/<name>`, by sampling their
/// conditional at the new angle.
pub fn cmd_eval_ellipse(cfg: &ExperimentConfig, out: &Path) -> RunResult<MetricsReport> {
    let start = Instant::now();
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    let scm = scm_by_name(&cfg.scm)?;
    if scm.x_dim() != 1 {
        return Err(Error::InvalidArgument(format!("`{}` does not have a scalar angle treatment", cfg.scm)).into());
    }
    let ds = load_or_generate(cfg)?;
    let (_, heldout) = split_heldout(&ds, cfg.eval.n_heldout)?;
    heldout.hidden_u()?;
    let grid = angle_sweep(cfg.eval.sweep_k);
    let main = obtain_model(cfg, out)?;
    let mut schemes = vec![SchemeMetrics {
        scheme: main.model.clone(),
        mape: Some(scheme_mape(&main, scm.as_ref(), &heldout, &grid, cfg.seed)?),
        ..SchemeMetrics::default()
    }];
    for name in ["baseline-x", "baseline-xz"] {
        if name == main.model {
            continue;
        }
        let sub = ExperimentConfig {
            structure: name.into(),
            model: None,
            ..cfg.clone()
        };
        let dir = out.join(name);
        std::fs::create_dir_all(&dir)?;
        let model = obtain_model(&sub, &dir)?;
        schemes.push(SchemeMetrics {
            scheme: name.into(),
            mape: Some(scheme_mape(&model, scm.as_ref(), &heldout, &grid, cfg.seed)?),
            ..SchemeMetrics::default()
        });
    }
    let report = MetricsReport {
        mape: schemes[0].mape,
        normalized_mse: None,
        wall_time_s: start.elapsed().as_secs_f64(),
        seed: cfg.seed,
        schemes,
    };
    cfg.save(&out.join("config.json"))?;
    write_json(&out.join("metrics.json"), &report)?;
    Ok(report)
}

/// Normalized MSE of the configured model's throughput counterfactuals on the
/// held-out rows, next to the replay baseline (100% by definition).
pub fn cmd_eval_abr(cfg: &ExperimentConfig, out: &Path) -> RunResult<MetricsReport> {
    let start = Instant::now();
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    let scm = scm_by_name(&cfg.scm)?;
    if !scm.name().starts_with("abr") {
        return Err(Error::InvalidArgument(format!("`{}` is not a streaming dataset", cfg.scm)).into());
    }
    let ds = load_or_generate(cfg)?;
    if !ds.scm.starts_with("abr") {
        return Err(Error::InvalidArgument(format!("dataset `{}` is not a streaming dataset", ds.scm)).into());
    }
    let (_, heldout) = split_heldout(&ds, cfg.eval.n_heldout)?;
    let model = obtain_model(cfg, out)?;
    let (nmse, mse, replay_mse) = abr_normalized_mse(&model, scm.as_ref(), &heldout, &cfg.eval.abr_target, cfg.seed)?;
    let report = MetricsReport {
        mape: None,
        normalized_mse: Some(nmse),
        wall_time_s: start.elapsed().as_secs_f64(),
        seed: cfg.seed,
        schemes: vec![
            SchemeMetrics {
                scheme: model.model.clone(),
                mape: None,
                normalized_mse: Some(nmse),
                mse: Some(mse),
            },
            SchemeMetrics {
                scheme: "replay".into(),
                mape: None,
                normalized_mse: Some(100.0),
                mse: Some(replay_mse),
            },
        ],
    };
    cfg.save(&out.join("config.json"))?;
    write_json(&out.join("metrics.json"), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedIndependence {
    /// e.g. `u_hat _||_ x | z`.
    pub check: String,
    pub pass: bool,
    pub report: IndependenceReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticReport {
    pub model: String,
    pub rows: usize,
    pub monotonicity: MonotonicityReport,
    pub independence: Vec<NamedIndependence>,
    /// Limits of what the passing checks establish.
    pub warnings: Vec<String>,
    pub pass: bool,
}

/// Warning attached to Markovian models of multi-dimensional outcomes.
pub const MARKOVIAN_MULTI_D_WARNING: &str = "Markovian model of a multi-dimensional outcome: independence and \
     monotonicity do not identify the mechanism when d > 1, so counterfactuals can be wrong even when every \
     check passes";

/// Condition rows spread over the data: the rows at `k` evenly spaced ranks of
/// the first condition column.
fn condition_grid(cond: &Array2<f64>, k: usize) -> Vec<Vec<f64>> {
    let mut idx: Vec<usize> = (0..cond.nrows()).collect();
    idx.sort_by(|a, b| cond[[*a, 0]].total_cmp(&cond[[*b, 0]]));
    let k = k.min(idx.len()).max(1);
    (0..k)
        .map(|j| cond.row(idx[(j * (idx.len() - 1)) / (k - 1).max(1)]).to_vec())
        .collect()
}

/// Runs the structure-appropriate checks on the held-out rows: monotonicity of
/// the mechanism in its noise and independence of the abducted noise from the
/// treatment or instrument (given the backdoor values where the structure has
/// them). Writes `diagnostics.json`; any failed hard check is an error.
pub fn cmd_diagnose(cfg: &ExperimentConfig, out: &Path) -> RunResult<DiagnosticReport> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    let model = require_model(cfg, out)?;
    let spec = model.spec()?;
    let ds = load_or_generate(cfg)?;
    let (_, heldout) = split_heldout(&ds, cfg.eval.n_heldout)?;
    let rows: Vec<usize> = (0..heldout.n().min(cfg.eval.max_test_rows)).collect();
    let heldout = heldout.select(&rows);
    let cond = spec.condition(heldout.x.view(), heldout.z.as_ref().map(|z| z.view()))?;
    let u_hat = model.abduct(&heldout)?;

    let u_grid: Vec<f64> = (0..=24).map(|k| -3.0 + 0.25 * k as f64).collect();
    let monotonicity = monotonicity_check(&model.network.bgm, &condition_grid(&cond, 9), &u_grid)?;

    let kind = spec.kind();
    let column = |c: &Option<Array2<f64>>, what: &str| {
        c.clone()
            .ok_or_else(|| Error::Schema(format!("structure `{}` needs `{what}` columns", spec.name())))
    };
    let n_bins = (rows.len() / ROWS_PER_BIN).max(1);
    let (n_perm, alpha, seed) = (cfg.eval.n_perm, cfg.eval.alpha, cfg.seed);
    let abduction_finite = u_hat.iter().all(|t| t.is_finite());
    let mut independence = Vec::new();
    if abduction_finite {
        let (check, report) = match kind {
            StructureKind::Markovian => ("u_hat _||_ condition", independence_test(&u_hat, &cond, n_perm, seed)?),
            StructureKind::Iv => {
                let i = column(&heldout.i, "i")?;
                ("u_hat _||_ i", independence_test(&u_hat, &i, n_perm, seed)?)
            }
            StructureKind::Bc { .. } => {
                let z = column(&heldout.z, "z")?;
                ("u_hat _||_ x | z", conditional_independence_test(&u_hat, &heldout.x, &z, n_bins, n_perm, seed)?)
            }
            StructureKind::Ivbc => {
                let (i, z) = (column(&heldout.i, "i")?, column(&heldout.z, "z")?);
                ("u_hat _||_ i | z", conditional_independence_test(&u_hat, &i, &z, n_bins, n_perm, seed)?)
            }
        };
        independence.push(NamedIndependence {
            check: check.into(),
            pass: report.passes(alpha),
            report,
        });
    }

    let mut warnings = Vec::new();
    if kind == StructureKind::Markovian && heldout.v.len_of(Axis(1)) > 1 {
        warnings.push(MARKOVIAN_MULTI_D_WARNING.to_string());
    }
    let mut failed = Vec::new();
    if !abduction_finite {
        failed.push("finite abduction".to_string());
    }
    if !monotonicity.pass {
        failed.push("monotonicity".to_string());
    }
    failed.extend(independence.iter().filter(|c| !c.pass).map(|c| c.check.clone()));
    let report = DiagnosticReport {
        model: model.model.clone(),
        rows: rows.len(),
        monotonicity,
        independence,
        warnings,
        pass: failed.is_empty(),
    };
    write_json(&out.join("diagnostics.json"), &report)?;
    if failed.is_empty() {
        Ok(report)
    } else {
        Err(RunError::Diagnostic { failed })
    }
}
