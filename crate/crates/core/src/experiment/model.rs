use std::path::Path;

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{train, Checkpoint, Records, TrainConfig, TrainError};
use crate::error::{Error, Result};
use crate::flow::FlowConfig;
use crate::scm::Dataset;
use crate::structured::{Dims, StructureKind, StructuredGenerativeNetwork};

pub const MODEL_FORMAT: &str = "bgm-model";
pub const MODEL_VERSION: u32 = 1;

pub type Network = StructuredGenerativeNetwork<f64>;

/// What gets trained: a structured network, or one of the two single-flow
/// references that ignore the confounding (`v | x` and `v | x, z`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelSpec {
    Structured(StructureKind),
    BaselineX,
    BaselineXz,
}

impl ModelSpec {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "baseline-x" => Ok(Self::BaselineX),
            "baseline-xz" => Ok(Self::BaselineXz),
            _ => StructureKind::parse(name).map(Self::Structured).map_err(|_| Error::Unknown {
                kind: "structure",
                name: name.into(),
                valid: "markovian, iv, bc, bc-a, bc-b, bc-c, ivbc, baseline-x, baseline-xz".into(),
            }),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Structured(k) => k.name(),
            Self::BaselineX => "baseline-x",
            Self::BaselineXz => "baseline-xz",
        }
    }

    pub fn kind(&self) -> StructureKind {
        match self {
            Self::Structured(k) => *k,
            _ => StructureKind::Markovian,
        }
    }

    /// The mechanism reads `z` next to `x`.
    pub fn conditions_on_z(&self) -> bool {
        *self == Self::BaselineXz
    }

    /// Mechanism condition: `x`, or `[x, z]` for the `v | x, z` reference.
    pub fn condition(&self, x: ArrayView2<f64>, z: Option<ArrayView2<f64>>) -> Result<Array2<f64>> {
        if !self.conditions_on_z() {
            return Ok(x.to_owned());
        }
        let z = z.ok_or_else(|| Error::Schema(format!("`{}` needs the z columns", self.name())))?;
        Ok(concatenate(Axis(1), &[x, z])?)
    }

    /// The columns this model observes during training.
    pub fn records(&self, ds: &Dataset) -> Result<Records<f64>> {
        let kind = self.kind();
        let need = |c: &Option<Array2<f64>>, what: &str| {
            c.clone()
                .ok_or_else(|| Error::Schema(format!("structure `{}` needs `{what}` columns in `{}`", self.name(), ds.scm)))
        };
        Ok(Records {
            i: if kind.uses_instrument() { Some(need(&ds.i, "i")?) } else { None },
            z: if kind.uses_backdoor() { Some(need(&ds.z, "z")?) } else { None },
            x: self.condition(ds.x.view(), ds.z.as_ref().map(|z| z.view()))?,
            v: ds.v.clone(),
        })
    }

    /// Network dimensions for this model on `ds`.
    pub fn dims(&self, ds: &Dataset) -> Result<Dims> {
        let mut dims = Dims::from_dataset(ds);
        if self.conditions_on_z() {
            dims.x_dim += ds.z.as_ref().map_or(0, |z| z.ncols());
        }
        if !self.kind().uses_backdoor() {
            dims.z_dim = 0;
        }
        Ok(dims)
    }
}

/// A trained network together with how its mechanism is conditioned.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub format: String,
    pub version: u32,
    pub model: String,
    pub network: Network,
}

impl TrainedModel {
    pub fn new(spec: ModelSpec, network: Network) -> Self {
        Self {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            model: spec.name().into(),
            network,
        }
    }

    pub fn spec(&self) -> Result<ModelSpec> {
        ModelSpec::parse(&self.model)
    }

    /// Abducted exogenous values for every row of `ds`.
    pub fn abduct(&self, ds: &Dataset) -> Result<Array2<f64>> {
        let cond = self.spec()?.condition(ds.x.view(), ds.z.as_ref().map(|z| z.view()))?;
        Ok(self.network.bgm.inverse_batch(cond.view(), ds.v.view())?.0)
    }

    /// Row-wise counterfactual outcome under treatment `x_prime` (one row per
    /// dataset row); any backdoor columns keep their observed values.
    pub fn counterfactual(&self, ds: &Dataset, x_prime: ArrayView2<f64>) -> Result<Array2<f64>> {
        let spec = self.spec()?;
        let u = self.abduct(ds)?;
        let cond = spec.condition(x_prime, ds.z.as_ref().map(|z| z.view()))?;
        Ok(self.network.bgm.forward_batch(cond.view(), u.view())?.0)
    }

    /// One draw per row from the learned conditional at `x_prime` (and the
    /// row's `z` when the mechanism reads it); the evidence outcome is unused.
    pub fn sample_conditional(&self, ds: &Dataset, x_prime: ArrayView2<f64>, seed: u64) -> Result<Array2<f64>> {
        let cond = self.spec()?.condition(x_prime, ds.z.as_ref().map(|z| z.view()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = Array2::from_shape_simple_fn((cond.nrows(), self.network.dims.var_dim), || {
            rng.sample::<f64, _>(StandardNormal)
        });
        Ok(self.network.bgm.forward_batch(cond.view(), u.view())?.0)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if m.format != MODEL_FORMAT {
            return Err(Error::Schema(format!("`{}` is not a model file", path.display())));
        }
        if m.version != MODEL_VERSION {
            return Err(Error::Version {
                found: m.version,
                expected: MODEL_VERSION,
            });
        }
        m.spec()?;
        m.network.bgm.validate_structure()?;
        Ok(m)
    }
}

/// Builds, calibrates and trains a model on `ds`.
pub fn train_model(
    spec: ModelSpec,
    ds: &Dataset,
    flow: &FlowConfig,
    cfg: &TrainConfig,
) -> std::result::Result<Checkpoint<f64, Network>, TrainError<f64, Network>> {
    let records = spec.records(ds)?;
    let mut net = Network::build(spec.kind(), spec.dims(ds)?, flow, cfg.seed)?;
    net.calibrate(&records)?;
    train(net, &records, cfg)
}
