use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::autodiff::TrainConfig;
use crate::error::{Error, Result};
use crate::flow::FlowConfig;
use crate::scm::scm_by_name;

use super::model::ModelSpec;

/// Counterfactual treatment used by the streaming evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AbrTarget {
    /// Every query gets a bitrate drawn uniformly from the ladder.
    Uniform,
    /// Every query asks for the same bitrate.
    Fixed { bitrate: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Rows at the end of the dataset kept out of training.
    pub n_heldout: usize,
    /// Counterfactual treatments per held-out row in the ellipse sweep.
    pub sweep_k: usize,
    pub abr_target: AbrTarget,
    /// Permutations per independence test in `diagnose`.
    pub n_perm: usize,
    /// Significance level of the hard independence checks.
    pub alpha: f64,
    /// Rows used by the independence checks (the tests are quadratic).
    pub max_test_rows: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_heldout: 1000,
            sweep_k: 64,
            abr_target: AbrTarget::Uniform,
            n_perm: 200,
            alpha: 0.01,
            max_test_rows: 2000,
        }
    }
}

/// Everything that determines a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scm: String,
    /// Rows generated, held-out rows included.
    pub n: usize,
    pub seed: u64,
    /// Permute `x` across rows (and recompute `v`) after sampling.
    pub shuffle_x: bool,
    /// `markovian`, `iv`, `bc`, `bc-a`, `bc-b`, `bc-c`, `ivbc`, `baseline-x` or `baseline-xz`.
    pub structure: String,
    pub flow: FlowConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Dataset CSV written by `generate`; sampled from `scm` when absent.
    pub data: Option<PathBuf>,
    /// Trained `model.json`; commands that need a model train one when absent.
    pub model: Option<PathBuf>,
    /// Counterfactual query JSON.
    pub query: Option<PathBuf>,
    /// Result directory.
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scm: "ellipse".into(),
            n: 101_000,
            seed: 0,
            shuffle_x: false,
            structure: "bc".into(),
            flow: FlowConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            data: None,
            model: None,
            query: None,
            out: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidArgument(format!("config `{}`: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Applies `key.path=value`. The value is parsed as JSON when possible and
    /// taken as a string otherwise; the result must still be a valid config.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (key, raw) = spec
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("override `{spec}` is not key=value")))?;
        let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut doc = serde_json::to_value(&*self)?;
        let mut slot = &mut doc;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| Error::InvalidArgument(format!("unknown config key `{key}`")))?;
        }
        *slot = value;
        *self = serde_json::from_value(doc)
            .map_err(|e| Error::InvalidArgument(format!("override `{spec}`: {e}")))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let scm = scm_by_name(&self.scm)?;
        ModelSpec::parse(&self.structure)?;
        self.train.validate()?;
        if self.n == 0 {
            return Err(Error::InvalidArgument("n must be positive".into()));
        }
        if self.eval.n_heldout >= self.n {
            return Err(Error::InvalidArgument(format!(
                "held-out rows ({}) must be fewer than n ({})",
                self.eval.n_heldout, self.n
            )));
        }
        if self.flow.bins < 2 || !(self.flow.bound > 0.0) || self.flow.hidden.contains(&0) {
            return Err(Error::InvalidArgument(format!("invalid flow config {:?}", self.flow)));
        }
        if self.eval.sweep_k == 0 || !(self.eval.alpha > 0.0 && self.eval.alpha < 1.0) {
            return Err(Error::InvalidArgument("sweep_k must be positive and alpha in (0, 1)".into()));
        }
        if let AbrTarget::Fixed { bitrate } = self.eval.abr_target {
            if !scm.name().starts_with("abr") || !scm.x_in_domain(&[bitrate]) {
                return Err(Error::InvalidArgument(format!("bitrate {bitrate} is not on the ladder")));
            }
        }
        Ok(())
    }
}
