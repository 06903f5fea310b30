//! Structured generative networks: conditional flows wired so that the
//! independence each identification argument needs holds by construction.
//!
//! Every network contains the mechanism `v = f(x, u)`; the auxiliary flows
//! model how the exogenous variable (or the treatment) relates to the
//! observed roots. Components whose variables are all observed drop out of
//! the likelihood and are not built.

use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::autodiff::{flow_inverse_on_tape, std_normal_log_pdf_on_tape, Records, Tape, Trainable, Var};
use crate::error::{Error, Result};
use crate::flow::{ConditionalBijection, FlowConfig};
use crate::scalar::{log_normal_interval, std_normal_log_pdf, Real};
use crate::scm::Dataset;

pub const NETWORK_FORMAT: &str = "bgm-structured-network";
pub const NETWORK_VERSION: u32 = 1;

/// Stand-in for an unbounded cell edge of the treatment grid.
const OPEN_EDGE: f64 = 1e6;
/// Proposals per row when sampling the exogenous variable by importance resampling.
const SIR_CANDIDATES: usize = 64;

/// Orientation of the backdoor graph within its equivalence class; all three
/// encode `U ⟂ X | Z`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DgmVariant {
    /// `Z -> U`, `Z -> X`.
    #[default]
    A,
    /// `U -> Z -> X`.
    B,
    /// `X -> Z -> U`.
    C,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "structure", rename_all = "lowercase")]
pub enum StructureKind {
    Markovian,
    Iv,
    Bc {
        #[serde(default)]
        variant: DgmVariant,
    },
    Ivbc,
}

impl StructureKind {
    pub const NAMES: [&'static str; 4] = ["markovian", "iv", "bc", "ivbc"];

    /// Parses `markovian`, `iv`, `bc` (variant `a`), `bc-a`, `bc-b`, `bc-c` or `ivbc`.
    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name.to_ascii_lowercase().as_str() {
            "markovian" => Self::Markovian,
            "iv" => Self::Iv,
            "bc" | "bc-a" => Self::Bc { variant: DgmVariant::A },
            "bc-b" => Self::Bc { variant: DgmVariant::B },
            "bc-c" => Self::Bc { variant: DgmVariant::C },
            "ivbc" => Self::Ivbc,
            _ => {
                return Err(Error::Unknown {
                    kind: "structure",
                    name: name.into(),
                    valid: "markovian, iv, bc, bc-a, bc-b, bc-c, ivbc".into(),
                })
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Markovian => "markovian",
            Self::Iv => "iv",
            Self::Bc { variant: DgmVariant::A } => "bc-a",
            Self::Bc { variant: DgmVariant::B } => "bc-b",
            Self::Bc { variant: DgmVariant::C } => "bc-c",
            Self::Ivbc => "ivbc",
        }
    }

    pub fn uses_instrument(&self) -> bool {
        matches!(self, Self::Iv | Self::Ivbc)
    }

    pub fn uses_backdoor(&self) -> bool {
        matches!(self, Self::Bc { .. } | Self::Ivbc)
    }
}

/// Sizes of the observed blocks. `i_values` and `x_values` are the finite
/// instrument and treatment alphabets (needed by the instrumental structure).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Dims {
    pub x_dim: usize,
    pub var_dim: usize,
    #[serde(default)]
    pub z_dim: usize,
    #[serde(default)]
    pub i_values: Vec<f64>,
    #[serde(default)]
    pub x_values: Vec<f64>,
}

impl Dims {
    /// Dimensions read off a dataset; alphabets are the sorted distinct values.
    pub fn from_dataset(ds: &Dataset) -> Self {
        let distinct = |a: &Array2<f64>| {
            let mut v: Vec<f64> = a.iter().copied().collect();
            v.sort_by(f64::total_cmp);
            v.dedup();
            v
        };
        Self {
            x_dim: ds.x.ncols(),
            var_dim: ds.v.ncols(),
            z_dim: ds.z.as_ref().map_or(0, |z| z.ncols()),
            i_values: ds.i.as_ref().map(distinct).unwrap_or_default(),
            x_values: if ds.x.ncols() == 1 { distinct(&ds.x) } else { Vec::new() },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: DeserializeOwned"))]
pub struct StructuredGenerativeNetwork<T> {
    pub kind: StructureKind,
    pub dims: Dims,
    /// The mechanism `v = f(x, u)`.
    pub bgm: ConditionalBijection<T>,
    /// `U | Z` (variants a, c and the combined structure) or `Z | U` (variant b).
    pub aux_u: Option<ConditionalBijection<T>>,
    /// Latent treatment index given `(one-hot I, U)`; the observed treatment is
    /// the grid cell the latent value falls in.
    pub aux_x: Option<ConditionalBijection<T>>,
}

#[derive(Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: DeserializeOwned"))]
struct Document<T> {
    format: String,
    version: u32,
    network: StructuredGenerativeNetwork<T>,
}

/// Summary of how a network is wired.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkDescription {
    pub kind: StructureKind,
    pub components: Vec<ComponentDescription>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentDescription {
    pub role: String,
    pub condition: String,
    pub models: String,
    pub cond_dim: usize,
    pub var_dim: usize,
    pub parameters: usize,
}

impl<T: Real> StructuredGenerativeNetwork<T> {
    /// Builds the components the structure needs, all starting at the identity.
    pub fn build(kind: StructureKind, dims: Dims, cfg: &FlowConfig, seed: u64) -> Result<Self> {
        let d = dims.var_dim;
        if d == 0 || dims.x_dim == 0 {
            return Err(Error::Shape("networks need at least one treatment and one outcome column".into()));
        }
        if kind.uses_backdoor() && dims.z_dim == 0 {
            return Err(Error::Shape(format!("structure `{}` needs backdoor columns", kind.name())));
        }
        if kind == StructureKind::Iv {
            if dims.x_dim != 1 || dims.x_values.len() < 2 {
                return Err(Error::Shape("the instrumental structure needs a scalar treatment with a finite grid".into()));
            }
            if dims.i_values.is_empty() {
                return Err(Error::Shape("the instrumental structure needs instrument values".into()));
            }
            if !dims.x_values.windows(2).all(|w| w[0] < w[1]) {
                return Err(Error::InvalidArgument("treatment grid must be strictly increasing".into()));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bgm = ConditionalBijection::new(dims.x_dim, d, cfg, &mut rng);
        let aux_u = match kind {
            StructureKind::Bc { variant: DgmVariant::B } => Some(ConditionalBijection::new(d, dims.z_dim, cfg, &mut rng)),
            StructureKind::Bc { .. } | StructureKind::Ivbc => Some(ConditionalBijection::new(dims.z_dim, d, cfg, &mut rng)),
            _ => None,
        };
        let aux_x = (kind == StructureKind::Iv)
            .then(|| ConditionalBijection::new(dims.i_values.len() + d, 1, cfg, &mut rng));
        Ok(Self {
            kind,
            dims,
            bgm,
            aux_u,
            aux_x,
        })
    }

    pub fn flow_count(&self) -> usize {
        1 + self.aux_u.is_some() as usize + self.aux_x.is_some() as usize
    }

    /// The learned mechanism, detached from the network.
    pub fn extract_bgm(&self) -> ConditionalBijection<T> {
        self.bgm.clone()
    }

    pub fn description(&self) -> NetworkDescription {
        let describe = |role: &str, condition: &str, models: &str, f: &ConditionalBijection<T>| ComponentDescription {
            role: role.into(),
            condition: condition.into(),
            models: models.into(),
            cond_dim: f.cond_dim,
            var_dim: f.var_dim,
            parameters: f.params().iter().map(|p| p.len()).sum(),
        };
        let mut components = vec![describe("bgm", "x", "v", &self.bgm)];
        if let Some(a) = &self.aux_u {
            components.push(match self.kind {
                StructureKind::Bc { variant: DgmVariant::B } => describe("aux_z", "u", "z", a),
                _ => describe("aux_u", "z", "u", a),
            });
        }
        if let Some(a) = &self.aux_x {
            components.push(describe("aux_x", "i, u", "x", a));
        }
        NetworkDescription {
            kind: self.kind,
            components,
        }
    }

    /// Checks that the batch carries the columns this structure observes.
    pub fn check_batch(&self, batch: &Records<T>) -> Result<()> {
        batch.validate()?;
        let name = self.kind.name();
        if batch.x.ncols() != self.dims.x_dim || batch.v.ncols() != self.dims.var_dim {
            return Err(Error::Schema(format!(
                "network `{name}` expects {} x and {} v columns, got {} and {}",
                self.dims.x_dim,
                self.dims.var_dim,
                batch.x.ncols(),
                batch.v.ncols()
            )));
        }
        if self.kind.uses_backdoor() && batch.z.as_ref().map(|z| z.ncols()) != Some(self.dims.z_dim) {
            return Err(Error::Schema(format!("network `{name}` needs {} z columns", self.dims.z_dim)));
        }
        if self.kind == StructureKind::Iv && batch.i.as_ref().map(|i| i.ncols()) != Some(1) {
            return Err(Error::Schema(format!("network `{name}` needs one instrument column")));
        }
        Ok(())
    }

    /// One-hot instrument block and the lower and upper latent edges of each
    /// row's treatment cell (grid index space, cells of width one).
    fn instrument_inputs(&self, batch: &Records<T>) -> Result<(Array2<T>, Array2<T>, Array2<T>)> {
        let i = batch.i.as_ref().expect("checked");
        let n = batch.len();
        let levels = &self.dims.i_values;
        let grid = &self.dims.x_values;
        let mut onehot = Array2::zeros((n, levels.len()));
        let mut lo = Array2::zeros((n, 1));
        let mut hi = Array2::zeros((n, 1));
        for r in 0..n {
            let iv = i[[r, 0]].val();
            let k = levels
                .iter()
                .position(|l| *l == iv)
                .ok_or_else(|| Error::Schema(format!("instrument value {iv} is not among {levels:?}")))?;
            onehot[[r, k]] = T::one();
            let xv = batch.x[[r, 0]].val();
            let j = grid
                .iter()
                .position(|g| *g == xv)
                .ok_or_else(|| Error::Schema(format!("treatment {xv} is not on the grid {grid:?}")))?;
            lo[[r, 0]] = T::lit(if j == 0 { -OPEN_EDGE } else { j as f64 - 0.5 });
            hi[[r, 0]] = T::lit(if j + 1 == grid.len() { OPEN_EDGE } else { j as f64 + 0.5 });
        }
        Ok((onehot, lo, hi))
    }

    /// Fits the input standardisation and output calibration of every
    /// component to `data`: the mechanism first, then the auxiliaries on the
    /// exogenous values it abducts.
    pub fn calibrate(&mut self, data: &Records<T>) -> Result<()> {
        self.check_batch(data)?;
        self.bgm.calibrate(data.x.view(), data.v.view());
        let (u, _) = self.bgm.inverse_batch(data.x.view(), data.v.view())?;
        match self.kind {
            StructureKind::Bc { variant: DgmVariant::B } => {
                let z = data.z.as_ref().expect("checked");
                self.aux_u.as_mut().expect("built").calibrate(u.view(), z.view());
            }
            StructureKind::Bc { .. } | StructureKind::Ivbc => {
                let z = data.z.as_ref().expect("checked");
                self.aux_u.as_mut().expect("built").calibrate(z.view(), u.view());
            }
            StructureKind::Iv => {
                let (onehot, lo, hi) = self.instrument_inputs(data)?;
                let cond = concatenate(Axis(1), &[onehot.view(), u.view()])?;
                let n = self.dims.x_values.len() as f64;
                let mid = Array2::from_shape_fn(lo.dim(), |(r, _)| {
                    let (a, b) = (lo[[r, 0]].val(), hi[[r, 0]].val());
                    T::lit(if a < 0.0 { 0.0 } else if b > n { n - 1.0 } else { 0.5 * (a + b) })
                });
                self.aux_x.as_mut().expect("built").calibrate(cond.view(), mid.view());
            }
            StructureKind::Markovian => {}
        }
        Ok(())
    }

    /// Per-row joint negative log-likelihood of the observed columns.
    pub fn joint_nll(&self, batch: &Records<T>) -> Result<Array1<T>> {
        self.check_batch(batch)?;
        let (u, logdet) = self.bgm.inverse_batch(batch.x.view(), batch.v.view())?;
        let base = |u: &Array2<T>| {
            Array1::from_iter(u.rows().into_iter().map(|r| r.iter().fold(T::zero(), |a, t| a + std_normal_log_pdf(*t))))
        };
        let ll = match self.kind {
            StructureKind::Markovian => base(&u) + &logdet,
            StructureKind::Iv => {
                let (onehot, lo, hi) = self.instrument_inputs(batch)?;
                let cond = concatenate(Axis(1), &[onehot.view(), u.view()])?;
                let aux = self.aux_x.as_ref().expect("built");
                let (e_lo, _) = aux.inverse_batch(cond.view(), lo.view())?;
                let (e_hi, _) = aux.inverse_batch(cond.view(), hi.view())?;
                let cell = Array1::from_iter(
                    (0..batch.len()).map(|r| T::lit(log_normal_interval(e_lo[[r, 0]].val(), e_hi[[r, 0]].val()))),
                );
                base(&u) + &cell + &logdet
            }
            StructureKind::Bc { variant: DgmVariant::B } => {
                let z = batch.z.as_ref().expect("checked");
                let aux = self.aux_u.as_ref().expect("built").log_density_batch(u.view(), z.view())?;
                base(&u) + &aux + &logdet
            }
            StructureKind::Bc { .. } | StructureKind::Ivbc => {
                let z = batch.z.as_ref().expect("checked");
                self.aux_u.as_ref().expect("built").log_density_batch(z.view(), u.view())? + &logdet
            }
        };
        Ok(ll.mapv(|l| -l))
    }

    pub fn to_json(&self) -> Result<String>
    where
        T: Serialize,
    {
        Ok(serde_json::to_string(&Document {
            format: NETWORK_FORMAT.into(),
            version: NETWORK_VERSION,
            network: self.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self>
    where
        T: DeserializeOwned,
    {
        let doc: Document<T> = serde_json::from_str(text)?;
        if doc.format != NETWORK_FORMAT {
            return Err(Error::Schema(format!("expected a `{NETWORK_FORMAT}` document, found `{}`", doc.format)));
        }
        if doc.version != NETWORK_VERSION {
            return Err(Error::Version {
                found: doc.version,
                expected: NETWORK_VERSION,
            });
        }
        doc.network.bgm.validate_structure()?;
        Ok(doc.network)
    }
}

impl<T: Real> Trainable<T> for StructuredGenerativeNetwork<T> {
    fn params(&self) -> Vec<&Array2<T>> {
        let mut p = self.bgm.params();
        p.extend(self.aux_u.iter().flat_map(|a| a.params()));
        p.extend(self.aux_x.iter().flat_map(|a| a.params()));
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Array2<T>> {
        let mut p = self.bgm.params_mut();
        p.extend(self.aux_u.iter_mut().flat_map(|a| a.params_mut()));
        p.extend(self.aux_x.iter_mut().flat_map(|a| a.params_mut()));
        p
    }

    fn tape_nll_rows(&self, tape: &Tape<T>, params: &[Var], batch: &Records<T>) -> Result<Var> {
        self.check_batch(batch)?;
        let nb = self.bgm.params().len();
        let (p_bgm, p_aux) = params.split_at(nb);
        let x = tape.constant(batch.x.clone());
        let v = tape.constant(batch.v.clone());
        let (u, logdet) = flow_inverse_on_tape(&self.bgm, tape, p_bgm, x, v)?;
        let ll = match self.kind {
            StructureKind::Markovian => tape.add(std_normal_log_pdf_on_tape(tape, u)?, logdet)?,
            StructureKind::Iv => {
                let (onehot, lo, hi) = self.instrument_inputs(batch)?;
                let cond = tape.concat(&[tape.constant(onehot), u])?;
                let aux = self.aux_x.as_ref().expect("built");
                let (e_lo, _) = flow_inverse_on_tape(aux, tape, p_aux, cond, tape.constant(lo))?;
                let (e_hi, _) = flow_inverse_on_tape(aux, tape, p_aux, cond, tape.constant(hi))?;
                let cell = tape.log_normal_interval(e_lo, e_hi)?;
                tape.add(tape.add(std_normal_log_pdf_on_tape(tape, u)?, cell)?, logdet)?
            }
            StructureKind::Bc { variant: DgmVariant::B } => {
                let z = tape.constant(batch.z.clone().expect("checked"));
                let aux = self.aux_u.as_ref().expect("built");
                let (e, aux_logdet) = flow_inverse_on_tape(aux, tape, p_aux, u, z)?;
                let aux_ll = tape.add(std_normal_log_pdf_on_tape(tape, e)?, aux_logdet)?;
                tape.add(tape.add(std_normal_log_pdf_on_tape(tape, u)?, aux_ll)?, logdet)?
            }
            StructureKind::Bc { .. } | StructureKind::Ivbc => {
                let z = tape.constant(batch.z.clone().expect("checked"));
                let aux = self.aux_u.as_ref().expect("built");
                let (e, aux_logdet) = flow_inverse_on_tape(aux, tape, p_aux, z, u)?;
                tape.add(tape.add(std_normal_log_pdf_on_tape(tape, e)?, aux_logdet)?, logdet)?
            }
        };
        tape.neg(ll)
    }

    fn nll_rows(&self, batch: &Records<T>) -> Result<Array1<T>> {
        self.joint_nll(batch)
    }
}

impl StructuredGenerativeNetwork<f64> {
    /// Draws `n` synthetic rows. Observed roots (`i`, `z` and, where the
    /// treatment model was dropped, `x` together with its `z`) are resampled
    /// row-wise from `roots`; every noise variable is standard normal. The
    /// returned dataset stores the sampled exogenous values as `u_hidden`.
    pub fn sample(&self, roots: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
        let d = self.dims.var_dim;
        let empty = |w: usize| Array2::zeros((0, w));
        if n == 0 {
            return Ok(Dataset {
                scm: format!("network-{}", self.kind.name()),
                seed,
                i: self.kind.uses_instrument().then(|| empty(1)),
                z: self.kind.uses_backdoor().then(|| empty(self.dims.z_dim)),
                x: empty(self.dims.x_dim),
                v: empty(d),
                u_hidden: Some(empty(d)),
            });
        }
        if roots.n() == 0 {
            return Err(Error::InvalidArgument("sampling needs at least one row of roots".into()));
        }
        if self.kind.uses_instrument() && roots.i.is_none() {
            return Err(Error::Schema("sampling this structure needs instrument roots".into()));
        }
        if self.kind.uses_backdoor() && roots.z.is_none() {
            return Err(Error::Schema("sampling this structure needs backdoor roots".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..roots.n())).collect();
        let picked = roots.select(&rows);
        let mut normal = |r: usize, c: usize| Array2::from_shape_simple_fn((r, c), || rng.sample::<f64, _>(StandardNormal));
        let (x, u) = match self.kind {
            StructureKind::Markovian => (picked.x.clone(), normal(n, d)),
            StructureKind::Iv => {
                let u = normal(n, d);
                let eps = normal(n, 1);
                let levels = &self.dims.i_values;
                let i = picked.i.as_ref().expect("checked");
                let mut onehot = Array2::zeros((n, levels.len()));
                for r in 0..n {
                    let k = levels
                        .iter()
                        .position(|l| *l == i[[r, 0]])
                        .ok_or_else(|| Error::Schema(format!("instrument value {} is unknown", i[[r, 0]])))?;
                    onehot[[r, k]] = 1.0;
                }
                let cond = concatenate(Axis(1), &[onehot.view(), u.view()])?;
                let (latent, _) = self.aux_x.as_ref().expect("built").forward_batch(cond.view(), eps.view())?;
                let grid = &self.dims.x_values;
                let top = (grid.len() - 1) as f64;
                let x = latent.mapv(|t| grid[t.round().clamp(0.0, top) as usize]);
                (x, u)
            }
            StructureKind::Bc { variant: DgmVariant::B } => {
                let z = picked.z.as_ref().expect("checked");
                (picked.x.clone(), self.resample_u_given_z(z.view(), &mut rng)?)
            }
            StructureKind::Bc { .. } | StructureKind::Ivbc => {
                let z = picked.z.as_ref().expect("checked");
                let eps = normal(n, d);
                let (u, _) = self.aux_u.as_ref().expect("built").forward_batch(z.view(), eps.view())?;
                (picked.x.clone(), u)
            }
        };
        let (v, _) = self.bgm.forward_batch(x.view(), u.view())?;
        Ok(Dataset {
            scm: format!("network-{}", self.kind.name()),
            seed,
            i: picked.i.filter(|_| self.kind.uses_instrument()),
            z: picked.z.filter(|_| self.kind.uses_backdoor()),
            x,
            v,
            u_hidden: Some(u),
        })
    }

    /// Sampling-importance-resampling from `p(u | z) ∝ N(u) p(z | u)`.
    fn resample_u_given_z(&self, z: ArrayView2<f64>, rng: &mut ChaCha8Rng) -> Result<Array2<f64>> {
        let d = self.dims.var_dim;
        let n = z.nrows();
        let aux = self.aux_u.as_ref().expect("built");
        let mut out = Array2::zeros((n, d));
        for r in 0..n {
            let cand = Array2::from_shape_simple_fn((SIR_CANDIDATES, d), || rng.sample::<f64, _>(StandardNormal));
            let zr = z.row(r).insert_axis(Axis(0)).broadcast((SIR_CANDIDATES, z.ncols())).expect("row").to_owned();
            let logw = aux.log_density_batch(cand.view(), zr.view())?;
            let top = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logw.iter().map(|l| (l - top).exp()).collect();
            let total: f64 = w.iter().sum();
            let mut t = rng.random::<f64>() * total;
            let mut pick = SIR_CANDIDATES - 1;
            for (k, wk) in w.iter().enumerate() {
                if t < *wk {
                    pick = k;
                    break;
                }
                t -= wk;
            }
            out.row_mut(r).assign(&cand.row(pick));
        }
        Ok(out)
    }
}
