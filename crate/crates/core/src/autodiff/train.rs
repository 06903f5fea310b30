//! Maximum-likelihood training with Adam over shuffled mini-batches.

use std::fmt;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use super::adam::{adam_step, AdamState};
use super::flow_tape::flow_log_density_on_tape;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::flow::ConditionalBijection;
use crate::scalar::Real;

/// Observed columns handed to a model. `i` holds instrument ids, one per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Records<T> {
    pub i: Option<Array2<T>>,
    pub z: Option<Array2<T>>,
    pub x: Array2<T>,
    pub v: Array2<T>,
}

impl<T: Real> Records<T> {
    /// Records with only `x` and `v`.
    pub fn xv(x: Array2<T>, v: Array2<T>) -> Self {
        Self { i: None, z: None, x, v }
    }

    pub fn len(&self) -> usize {
        self.v.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let columns = [Some(&self.x), self.i.as_ref(), self.z.as_ref()];
        if columns.iter().flatten().any(|c| c.nrows() != n) {
            return Err(Error::Schema("record columns have different lengths".into()));
        }
        Ok(())
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        let pick = |a: &Array2<T>| a.select(Axis(0), rows);
        Self {
            i: self.i.as_ref().map(pick),
            z: self.z.as_ref().map(pick),
            x: pick(&self.x),
            v: pick(&self.v),
        }
    }
}

/// A model trained by minimising the mean negative log-likelihood of
/// [`Records`].
pub trait Trainable<T: Real>: Clone {
    fn params(&self) -> Vec<&Array2<T>>;

    fn params_mut(&mut self) -> Vec<&mut Array2<T>>;

    /// Per-row negative log-likelihood (`n x 1`) recorded on `tape`, with the
    /// parameters already recorded as `params` in [`Trainable::params`] order.
    fn tape_nll_rows(&self, tape: &Tape<T>, params: &[Var], batch: &Records<T>) -> Result<Var>;

    /// Per-row negative log-likelihood without recording.
    fn nll_rows(&self, batch: &Records<T>) -> Result<Array1<T>>;
}

impl<T: Real> Trainable<T> for ConditionalBijection<T> {
    fn params(&self) -> Vec<&Array2<T>> {
        ConditionalBijection::params(self)
    }

    fn params_mut(&mut self) -> Vec<&mut Array2<T>> {
        ConditionalBijection::params_mut(self)
    }

    fn tape_nll_rows(&self, tape: &Tape<T>, params: &[Var], batch: &Records<T>) -> Result<Var> {
        let x = tape.constant(batch.x.clone());
        let v = tape.constant(batch.v.clone());
        tape.neg(flow_log_density_on_tape(self, tape, params, x, v)?)
    }

    fn nll_rows(&self, batch: &Records<T>) -> Result<Array1<T>> {
        Ok(self.log_density_batch(batch.x.view(), batch.v.view())?.mapv(|l| -l))
    }
}

/// Mean negative log-likelihood of `batch`.
pub fn nll_loss<T: Real, N: Trainable<T>>(net: &N, batch: &Records<T>) -> Result<T> {
    batch.validate()?;
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let rows = net.nll_rows(batch)?;
    Ok(rows.sum() / T::from_usize(rows.len()).unwrap())
}

/// Mean negative log-likelihood and its gradient for every parameter.
pub fn nll_and_grad<T: Real, N: Trainable<T>>(net: &N, batch: &Records<T>) -> Result<(T, Vec<Array2<T>>)> {
    batch.validate()?;
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let tape = Tape::new();
    let params: Vec<Var> = net.params().into_iter().map(|p| tape.leaf(p.clone())).collect();
    let rows = net.tape_nll_rows(&tape, &params, batch)?;
    let loss = tape.mean(rows)?;
    let grads = tape.backward(loss)?;
    let value = tape.scalar_value(loss)?;
    let g = params
        .iter()
        .map(|p| grads.wrt(*p).cloned().unwrap_or_else(|| Array2::zeros(tape.shape(*p).unwrap())))
        .collect();
    Ok((value, g))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub lr: f64,
    /// Epochs per moving-average window of the convergence test.
    pub window: usize,
    /// Training stops once the relative improvement between consecutive
    /// windows falls below this.
    pub tolerance: f64,
    pub seed: u64,
    pub schedule: LrSchedule,
}

/// Learning rate as a function of the epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from `lr` down to `final_lr` over `epochs`, then flat.
    Cosine { final_lr: f64, epochs: usize },
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4096,
            max_epochs: 200,
            lr: 1e-3,
            window: 20,
            tolerance: 1e-4,
            seed: 0,
            schedule: LrSchedule::Constant,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.window == 0 || !(self.lr > 0.0) || !(self.tolerance >= 0.0) {
            return Err(Error::InvalidArgument(format!("invalid training config {self:?}")));
        }
        if let LrSchedule::Cosine { final_lr, epochs } = self.schedule {
            if !(final_lr > 0.0) || epochs == 0 {
                return Err(Error::InvalidArgument(format!("invalid learning-rate schedule {:?}", self.schedule)));
            }
        }
        Ok(())
    }

    /// Learning rate used throughout `epoch` (counted from 0).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine { final_lr, epochs } => {
                let t = (epoch as f64 / epochs as f64).min(1.0);
                final_lr + 0.5 * (self.lr - final_lr) * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// Everything needed to continue training bit-for-bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize, N: Serialize", deserialize = "T: DeserializeOwned, N: DeserializeOwned"))]
pub struct Checkpoint<T, N> {
    pub net: N,
    pub adam: AdamState<T>,
    /// Number of completed epochs.
    pub epoch: usize,
    /// Mean training NLL of every completed epoch.
    pub history: Vec<f64>,
    pub converged: bool,
}

impl<T: Real, N: Trainable<T>> Checkpoint<T, N> {
    pub fn fresh(net: N, cfg: &TrainConfig) -> Self {
        let adam = AdamState::new(&net.params(), cfg.lr);
        Self {
            net,
            adam,
            epoch: 0,
            history: Vec::new(),
            converged: false,
        }
    }
}

pub enum TrainError<T, N> {
    /// A non-finite loss or gradient appeared during `epoch`; `last_good` is
    /// the state at the start of that epoch.
    Diverged { epoch: usize, last_good: Box<Checkpoint<T, N>> },
    Other(Error),
}

impl<T, N> fmt::Debug for TrainError<T, N> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl<T, N> fmt::Display for TrainError<T, N> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Diverged { epoch, .. } => write!(f, "training diverged during epoch {epoch}"),
            TrainError::Other(e) => write!(f, "{e}"),
        }
    }
}

impl<T, N> std::error::Error for TrainError<T, N> {}

impl<T, N> From<Error> for TrainError<T, N> {
    fn from(e: Error) -> Self {
        TrainError::Other(e)
    }
}

impl<T, N> From<TrainError<T, N>> for Error {
    fn from(e: TrainError<T, N>) -> Self {
        match e {
            TrainError::Diverged { epoch, .. } => Error::Diverged { epoch },
            TrainError::Other(e) => e,
        }
    }
}

fn has_converged(history: &[f64], window: usize, tolerance: f64) -> bool {
    if history.len() < 2 * window {
        return false;
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let n = history.len();
    let now = mean(&history[n - window..]);
    let before = mean(&history[n - 2 * window..n - window]);
    (before - now) / before.abs().max(1.0) < tolerance
}

/// Row order of `epoch`; depends only on `(seed, epoch)`.
pub fn epoch_permutation(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    perm
}

/// Trains a fresh model.
pub fn train<T: Real, N: Trainable<T>>(
    net: N,
    data: &Records<T>,
    cfg: &TrainConfig,
) -> std::result::Result<Checkpoint<T, N>, TrainError<T, N>> {
    resume(Checkpoint::fresh(net, cfg), data, cfg)
}

/// Continues training from `checkpoint` until convergence or `cfg.max_epochs`
/// completed epochs.
pub fn resume<T: Real, N: Trainable<T>>(
    mut checkpoint: Checkpoint<T, N>,
    data: &Records<T>,
    cfg: &TrainConfig,
) -> std::result::Result<Checkpoint<T, N>, TrainError<T, N>> {
    cfg.validate()?;
    data.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("cannot train on an empty dataset".into()).into());
    }
    let n = data.len();
    while checkpoint.epoch < cfg.max_epochs && !checkpoint.converged {
        let start = checkpoint.clone();
        let epoch = checkpoint.epoch;
        checkpoint.adam.lr = cfg.lr_at(epoch);
        let mut total = 0.0;
        for rows in epoch_permutation(n, cfg.seed, epoch).chunks(cfg.batch_size) {
            let batch = data.select(rows);
            let (loss, grads) = nll_and_grad(&checkpoint.net, &batch)?;
            let finite = loss.is_finite() && grads.iter().all(|g| g.iter().all(|t| t.is_finite()));
            if !finite {
                return Err(TrainError::Diverged {
                    epoch,
                    last_good: Box::new(start),
                });
            }
            let mut params = checkpoint.net.params_mut();
            adam_step(&mut params, &grads, &mut checkpoint.adam)?;
            total += loss.val() * rows.len() as f64;
        }
        checkpoint.history.push(total / n as f64);
        checkpoint.epoch += 1;
        checkpoint.converged = has_converged(&checkpoint.history, cfg.window, cfg.tolerance);
    }
    Ok(checkpoint)
}

/// Writes `epoch,nll` rows, epochs counted from 1.
pub fn write_loss_csv(path: &Path, history: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "nll"])?;
    for (e, nll) in history.iter().enumerate() {
        w.write_record([(e + 1).to_string(), format!("{nll:?}")])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a file written by [`write_loss_csv`].
pub fn read_loss_csv(path: &Path) -> Result<Vec<f64>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let nll = rec
            .get(1)
            .and_then(|s| s.parse::<f64>().ok())
            .ok_or_else(|| Error::Schema("loss file rows must be `epoch,nll`".into()))?;
        out.push(nll);
    }
    Ok(out)
}

/// Serialises a checkpoint as JSON.
pub fn save_checkpoint<T: Serialize, N: Serialize>(path: &Path, ck: &Checkpoint<T, N>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(serde_json::to_string(ck)?.as_bytes())?;
    Ok(())
}

pub fn load_checkpoint<T: DeserializeOwned, N: DeserializeOwned>(path: &Path) -> Result<Checkpoint<T, N>> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{AffineCalibration, FlowConfig};
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn small_cfg(layers: usize) -> FlowConfig {
        FlowConfig {
            bins: 6,
            bound: 3.0,
            hidden: vec![8, 8],
            spline_layers: layers,
        }
    }

    fn perturb(flow: &mut ConditionalBijection<f64>, rng: &mut ChaCha8Rng, scale: f64) {
        for p in flow.params_mut() {
            p.mapv_inplace(|t| t + rng.random_range(-scale..scale));
        }
    }

    fn normal(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Array2<f64> {
        Array2::from_shape_simple_fn(shape, || StandardNormal.sample(rng))
    }

    /// Every parameter gradient against central differences of the eval path.
    fn check_gradients(flow: &ConditionalBijection<f64>, batch: &Records<f64>) {
        let (loss, grads) = nll_and_grad(flow, batch).unwrap();
        assert!((loss - nll_loss(flow, batch).unwrap()).abs() < 1e-12);
        let h = 1e-6;
        let mut worst = 0.0f64;
        for (k, g) in grads.iter().enumerate() {
            for idx in 0..g.len() {
                let (r, c) = (idx / g.ncols(), idx % g.ncols());
                let mut up = flow.clone();
                up.params_mut()[k][[r, c]] += h;
                let mut dn = flow.clone();
                dn.params_mut()[k][[r, c]] -= h;
                let fd = (nll_loss(&up, batch).unwrap() - nll_loss(&dn, batch).unwrap()) / (2.0 * h);
                let err = (g[[r, c]] - fd).abs() / fd.abs().max(1e-3);
                worst = worst.max(err);
            }
        }
        assert!(worst <= 1e-4, "worst relative gradient error {worst}");
    }

    #[test]
    fn flow_nll_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut flow = ConditionalBijection::<f64>::new(1, 1, &small_cfg(2), &mut rng);
        perturb(&mut flow, &mut rng, 0.3);
        let batch = Records::xv(normal(&mut rng, (40, 1)), normal(&mut rng, (40, 1)));
        flow.calibrate(batch.x.view(), batch.v.view());
        check_gradients(&flow, &batch);
    }

    #[test]
    fn coupling_flow_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut flow = ConditionalBijection::<f64>::new(2, 2, &small_cfg(3), &mut rng);
        perturb(&mut flow, &mut rng, 0.3);
        let batch = Records::xv(normal(&mut rng, (30, 2)), normal(&mut rng, (30, 2)).mapv(|t| 1.5 * t));
        check_gradients(&flow, &batch);
    }

    #[test]
    fn identity_flow_nll_is_gaussian_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let flow = ConditionalBijection::<f64>::new(0, 1, &small_cfg(1), &mut rng);
        let n = 200_000;
        let batch = Records::xv(Array2::zeros((n, 0)), normal(&mut rng, (n, 1)));
        let entropy = 0.5 * (1.0 + (2.0 * std::f64::consts::PI).ln());
        assert!((nll_loss(&flow, &batch).unwrap() - entropy).abs() < 0.01);
    }

    #[test]
    fn duplicated_rows_leave_the_loss_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut flow = ConditionalBijection::<f64>::new(1, 1, &small_cfg(2), &mut rng);
        perturb(&mut flow, &mut rng, 0.2);
        let batch = Records::xv(normal(&mut rng, (50, 1)), normal(&mut rng, (50, 1)));
        let rows: Vec<usize> = (0..50).chain(0..50).collect();
        let a = nll_loss(&flow, &batch).unwrap();
        let b = nll_loss(&flow, &batch.select(&rows)).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn shift_with_matching_affine_layer_leaves_the_loss_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut flow = ConditionalBijection::<f64>::new(1, 1, &small_cfg(2), &mut rng);
        perturb(&mut flow, &mut rng, 0.2);
        let batch = Records::xv(normal(&mut rng, (50, 1)), normal(&mut rng, (50, 1)));
        let c = 3.25;
        let mut shifted_flow = flow.clone();
        shifted_flow.layers.push(crate::flow::Layer::Affine(AffineCalibration::new(&[1.0], &[c])));
        let shifted = Records::xv(batch.x.clone(), batch.v.mapv(|t| t + c));
        let a = nll_loss(&flow, &batch).unwrap();
        let b = nll_loss(&shifted_flow, &shifted).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    fn gaussian_fit_data(seed: u64) -> Records<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 4000;
        Records::xv(Array2::zeros((n, 0)), normal(&mut rng, (n, 1)).mapv(|t| t + 2.0))
    }

    #[test]
    fn fits_a_shifted_gaussian() {
        let data = gaussian_fit_data(16);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let flow = ConditionalBijection::<f64>::new(0, 1, &small_cfg(2), &mut rng);
        let cfg = TrainConfig {
            batch_size: 256,
            max_epochs: 60,
            lr: 5e-3,
            ..TrainConfig::default()
        };
        let ck = train(flow, &data, &cfg).unwrap();
        let ld = ck.net.log_density(&[], &[2.0]).unwrap();
        assert!((ld + 0.918_938_533_204_672_8).abs() < 0.05, "log density {ld}");
        assert!(ck.history.last().unwrap() < &ck.history[0]);
    }

    #[test]
    fn zero_epochs_returns_the_initial_net() {
        let data = gaussian_fit_data(18);
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let flow = ConditionalBijection::<f64>::new(0, 1, &small_cfg(1), &mut rng);
        let cfg = TrainConfig {
            max_epochs: 0,
            ..TrainConfig::default()
        };
        let ck = train(flow.clone(), &data, &cfg).unwrap();
        assert_eq!(ck.net, flow);
        assert!(ck.history.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let data = gaussian_fit_data(20);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let flow = ConditionalBijection::<f64>::new(0, 1, &small_cfg(1), &mut rng);
        let cfg = TrainConfig {
            batch_size: 500,
            max_epochs: 6,
            seed: 4,
            ..TrainConfig::default()
        };
        let a = train(flow.clone(), &data, &cfg).unwrap();
        let b = train(flow.clone(), &data, &cfg).unwrap();
        let bits = |h: &[f64]| h.iter().map(|t| t.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.history), bits(&b.history));
        assert_eq!(a.net, b.net);

        // interrupt after 2 epochs, persist, reload, finish
        let partial = train(flow, &data, &TrainConfig { max_epochs: 2, ..cfg.clone() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        save_checkpoint(&path, &partial).unwrap();
        let loaded: Checkpoint<f64, ConditionalBijection<f64>> = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, partial);
        let resumed = resume(loaded, &data, &cfg).unwrap();
        assert_eq!(bits(&resumed.history), bits(&a.history));
        assert_eq!(resumed.net, a.net);
    }

    #[test]
    fn divergence_reports_the_last_finite_state() {
        let data = gaussian_fit_data(22);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let flow = ConditionalBijection::<f64>::new(0, 1, &small_cfg(1), &mut rng);
        let cfg = TrainConfig {
            batch_size: 100,
            max_epochs: 50,
            lr: 1e3,
            ..TrainConfig::default()
        };
        match train(flow, &data, &cfg) {
            Err(TrainError::Diverged { epoch, last_good }) => {
                assert_eq!(last_good.epoch, epoch);
                assert!(last_good.net.params().iter().all(|p| p.iter().all(|t| t.is_finite())));
                assert!(matches!(Error::from(TrainError::<f64, ConditionalBijection<f64>>::Diverged { epoch, last_good }), Error::Diverged { .. }));
            }
            Err(other) => panic!("unexpected error {other}"),
            Ok(ck) => panic!("no divergence, final nll {:?}", ck.history.last()),
        }
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let cfg = TrainConfig {
            lr: 1e-2,
            schedule: LrSchedule::Cosine { final_lr: 1e-4, epochs: 10 },
            ..TrainConfig::default()
        };
        assert_eq!(cfg.lr_at(0), 1e-2);
        assert!((cfg.lr_at(5) - 0.5 * (1e-2 + 1e-4)).abs() < 1e-15);
        assert_eq!(cfg.lr_at(10), 1e-4);
        assert_eq!(cfg.lr_at(50), 1e-4);
        assert!((1..10).all(|e| cfg.lr_at(e) < cfg.lr_at(e - 1)));
        assert_eq!(TrainConfig::default().lr_at(7), 1e-3);
    }

    #[test]
    fn convergence_window() {
        let flat = vec![1.0; 40];
        assert!(has_converged(&flat, 20, 1e-4));
        let falling: Vec<f64> = (0..40).map(|e| 2.0 - 0.01 * e as f64).collect();
        assert!(!has_converged(&falling, 20, 1e-4));
        assert!(!has_converged(&flat[..39], 20, 1e-4));
    }

    #[test]
    fn loss_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        let history = vec![1.5, 1.25, 0.1 + 0.2];
        write_loss_csv(&path, &history).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("epoch,nll\n1,1.5\n"));
        assert_eq!(read_loss_csv(&path).unwrap(), history);
    }
}
