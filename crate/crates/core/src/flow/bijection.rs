use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use super::affine::AffineCalibration;
use super::conditioner::ConditionerNet;
use super::spline::{self, raw_len, SplineParams, DEFAULT_BINS, DEFAULT_BOUND};
use crate::error::{Error, Result};
use crate::scalar::{std_normal_log_pdf, Real};

pub const FLOW_FORMAT: &str = "bgm-conditional-bijection";
pub const FLOW_VERSION: u32 = 1;

/// Architecture of a conditional flow.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    pub bins: usize,
    pub bound: f64,
    pub hidden: Vec<usize>,
    pub spline_layers: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            bins: DEFAULT_BINS,
            bound: DEFAULT_BOUND,
            hidden: vec![64, 64],
            spline_layers: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: DeserializeOwned"))]
pub enum Layer<T> {
    Affine(AffineCalibration<T>),
    /// Conditional spline on the `transformed` coordinates. The conditioner
    /// sees the flow condition followed by the `passthrough` coordinates, so a
    /// non-empty `passthrough` makes this a coupling layer.
    Spline {
        transformed: Vec<usize>,
        passthrough: Vec<usize>,
        conditioner: ConditionerNet<T>,
    },
    /// Unconditional spline with explicit parameters applied to every
    /// coordinate. Not trained.
    FixedSpline { params: SplineParams<T> },
}

/// A learnable mechanism `v = f(x, u)`, bijective in `u` for every `x`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: DeserializeOwned"))]
pub struct ConditionalBijection<T> {
    pub cond_dim: usize,
    pub var_dim: usize,
    pub bins: usize,
    pub bound: T,
    /// Applied in order by `forward`, in reverse by `inverse`.
    pub layers: Vec<Layer<T>>,
}

#[derive(Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: DeserializeOwned"))]
struct Document<T> {
    format: String,
    version: u32,
    flow: ConditionalBijection<T>,
}

impl<T: Real> ConditionalBijection<T> {
    /// Builds `affine-in, spline x spline_layers, affine-out`, starting at the
    /// identity map. For `var_dim > 1` the spline layers are couplings that
    /// alternate which coordinates are transformed.
    pub fn new<R: Rng + ?Sized>(cond_dim: usize, var_dim: usize, cfg: &FlowConfig, rng: &mut R) -> Self {
        assert!(var_dim > 0, "flows need at least one variable");
        let mut layers = vec![Layer::Affine(AffineCalibration::identity(var_dim))];
        for l in 0..cfg.spline_layers {
            let (transformed, passthrough): (Vec<usize>, Vec<usize>) = if var_dim == 1 {
                (vec![0], vec![])
            } else {
                (0..var_dim).partition(|i| (i + l) % 2 == 1)
            };
            let conditioner = ConditionerNet::new(
                cond_dim + passthrough.len(),
                &cfg.hidden,
                transformed.len() * raw_len(cfg.bins),
                rng,
            );
            layers.push(Layer::Spline {
                transformed,
                passthrough,
                conditioner,
            });
        }
        layers.push(Layer::Affine(AffineCalibration::identity(var_dim)));
        Self {
            cond_dim,
            var_dim,
            bins: cfg.bins,
            bound: T::lit(cfg.bound),
            layers,
        }
    }

    /// A flow made of a single affine layer.
    pub fn affine(cond_dim: usize, calibration: AffineCalibration<T>) -> Self {
        Self {
            cond_dim,
            var_dim: calibration.dim(),
            bins: DEFAULT_BINS,
            bound: T::lit(DEFAULT_BOUND),
            layers: vec![Layer::Affine(calibration)],
        }
    }

    /// Fits the output affine layer to the mean and spread of `v` and the
    /// conditioner input standardisation to `cond`.
    pub fn calibrate(&mut self, cond: ArrayView2<T>, v: ArrayView2<T>) {
        let var_dim = self.var_dim;
        for layer in self.layers.iter_mut() {
            if let Layer::Spline { conditioner, .. } = layer {
                conditioner.standardize_inputs(cond);
            }
        }
        if let Some(Layer::Affine(out)) = self.layers.last_mut() {
            let n = T::from_usize(v.nrows().max(1)).unwrap();
            for j in 0..var_dim {
                let col = v.column(j);
                let mean = col.iter().fold(T::zero(), |a, b| a + *b) / n;
                let var = col.iter().fold(T::zero(), |a, b| a + (*b - mean) * (*b - mean)) / n;
                out.shift[[0, j]] = mean;
                out.log_scale[[0, j]] = if var > T::lit(1e-24) { T::lit(0.5) * var.ln() } else { T::zero() };
            }
        }
    }

    /// Prepends a fixed monotone warp `u -> params(u)` applied coordinate-wise
    /// before every other layer.
    pub fn with_input_warp(mut self, params: SplineParams<T>) -> Self {
        self.layers.insert(0, Layer::FixedSpline { params });
        self
    }

    fn check(&self, x: &ArrayView2<T>, w: &ArrayView2<T>) -> Result<()> {
        if x.ncols() != self.cond_dim || w.ncols() != self.var_dim || x.nrows() != w.nrows() {
            return Err(Error::Shape(format!(
                "flow expects ({} cond, {} var) columns, got ({} x {}, {} x {})",
                self.cond_dim,
                self.var_dim,
                x.nrows(),
                x.ncols(),
                w.nrows(),
                w.ncols()
            )));
        }
        if !x.iter().chain(w.iter()).all(|t| t.is_finite()) {
            return Err(Error::NonFinite("flow input".into()));
        }
        Ok(())
    }

    /// `v = f(x, u)` for a batch; returns `v` and `ln |det dv/du|` per row.
    pub fn forward_batch(&self, x: ArrayView2<T>, u: ArrayView2<T>) -> Result<(Array2<T>, Array1<T>)> {
        self.check(&x, &u)?;
        let mut cur = u.to_owned();
        let mut logdet = Array1::zeros(cur.nrows());
        for layer in &self.layers {
            self.apply(layer, &x, &mut cur, &mut logdet, false)?;
        }
        Ok((cur, logdet))
    }

    /// `u = f^-1(x, v)` for a batch; returns `u` and `ln |det du/dv|` per row.
    pub fn inverse_batch(&self, x: ArrayView2<T>, v: ArrayView2<T>) -> Result<(Array2<T>, Array1<T>)> {
        self.check(&x, &v)?;
        let mut cur = v.to_owned();
        let mut logdet = Array1::zeros(cur.nrows());
        for layer in self.layers.iter().rev() {
            self.apply(layer, &x, &mut cur, &mut logdet, true)?;
        }
        Ok((cur, logdet))
    }

    fn apply(
        &self,
        layer: &Layer<T>,
        x: &ArrayView2<T>,
        cur: &mut Array2<T>,
        logdet: &mut Array1<T>,
        inverse: bool,
    ) -> Result<()> {
        match layer {
            Layer::Affine(a) => {
                let ld = a.log_det();
                for mut row in cur.rows_mut() {
                    for (j, t) in row.iter_mut().enumerate() {
                        *t = if inverse { a.inverse(*t, j) } else { a.forward(*t, j) };
                    }
                }
                let ld = if inverse { -ld } else { ld };
                logdet.mapv_inplace(|l| l + ld);
            }
            Layer::Spline {
                transformed,
                passthrough,
                conditioner,
            } => {
                let pass = cur.select(Axis(1), passthrough);
                let cond = concatenate(Axis(1), &[x.view(), pass.view()]).map_err(|e| Error::Shape(e.to_string()))?;
                let raw = conditioner.eval_batch(cond.view())?;
                let r = raw_len(self.bins);
                for (row, (mut vals, ld)) in cur.rows_mut().into_iter().zip(logdet.iter_mut()).enumerate() {
                    for (k, &j) in transformed.iter().enumerate() {
                        let params = raw.slice(s![row, k * r..(k + 1) * r]);
                        let params = params.as_slice().expect("row-major conditioner output");
                        let (out, l) = spline::eval_raw(params, self.bound, self.bins, vals[j], inverse);
                        vals[j] = out;
                        *ld = *ld + l;
                    }
                }
            }
            Layer::FixedSpline { params } => {
                for (mut vals, ld) in cur.rows_mut().into_iter().zip(logdet.iter_mut()) {
                    for t in vals.iter_mut() {
                        let (out, l) = if inverse {
                            spline::spline_inverse(params, *t)?
                        } else {
                            spline::spline_forward(params, *t)?
                        };
                        *t = out;
                        *ld = *ld + l;
                    }
                }
            }
        }
        Ok(())
    }

    fn row_views<'a>(&self, x: &'a [T], w: &'a [T]) -> Result<(ArrayView2<'a, T>, ArrayView2<'a, T>)> {
        let xv = ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::Shape(e.to_string()))?;
        let wv = ArrayView2::from_shape((1, w.len()), w).map_err(|e| Error::Shape(e.to_string()))?;
        Ok((xv, wv))
    }

    pub fn forward(&self, x: &[T], u: &[T]) -> Result<(Vec<T>, T)> {
        let (xv, uv) = self.row_views(x, u)?;
        let (v, ld) = self.forward_batch(xv, uv)?;
        Ok((v.into_raw_vec_and_offset().0, ld[0]))
    }

    pub fn inverse(&self, x: &[T], v: &[T]) -> Result<(Vec<T>, T)> {
        let (xv, vv) = self.row_views(x, v)?;
        let (u, ld) = self.inverse_batch(xv, vv)?;
        Ok((u.into_raw_vec_and_offset().0, ld[0]))
    }

    /// Log density of `v` given `x` under a standard normal base.
    pub fn log_density_batch(&self, x: ArrayView2<T>, v: ArrayView2<T>) -> Result<Array1<T>> {
        let (u, ld) = self.inverse_batch(x, v)?;
        Ok(Array1::from_iter(
            u.rows()
                .into_iter()
                .zip(ld.iter())
                .map(|(row, l)| row.iter().fold(*l, |acc, t| acc + std_normal_log_pdf(*t))),
        ))
    }

    pub fn log_density(&self, x: &[T], v: &[T]) -> Result<T> {
        let (xv, vv) = self.row_views(x, v)?;
        Ok(self.log_density_batch(xv, vv)?[0])
    }

    pub fn params(&self) -> Vec<&Array2<T>> {
        self.layers
            .iter()
            .flat_map(|l| match l {
                Layer::Affine(a) => vec![&a.log_scale, &a.shift],
                Layer::Spline { conditioner, .. } => conditioner.params(),
                Layer::FixedSpline { .. } => vec![],
            })
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| match l {
                Layer::Affine(a) => vec![&mut a.log_scale, &mut a.shift],
                Layer::Spline { conditioner, .. } => conditioner.params_mut(),
                Layer::FixedSpline { .. } => vec![],
            })
            .collect()
    }

    /// Structural consistency of the layer list with the declared dimensions.
    pub fn validate_structure(&self) -> Result<()> {
        let shape = |msg: String| Err(Error::Shape(msg));
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Affine(a) => {
                    if a.dim() != self.var_dim || a.log_scale.dim() != (1, self.var_dim) {
                        return shape(format!("layer {i}: affine of dim {} in a {}-d flow", a.dim(), self.var_dim));
                    }
                }
                Layer::Spline {
                    transformed,
                    passthrough,
                    conditioner,
                } => {
                    let mut all: Vec<usize> = transformed.iter().chain(passthrough).copied().collect();
                    all.sort_unstable();
                    if transformed.is_empty() || all != (0..self.var_dim).collect::<Vec<_>>() {
                        return shape(format!("layer {i}: coordinate partition does not cover 0..{}", self.var_dim));
                    }
                    if conditioner.in_dim() != self.cond_dim + passthrough.len()
                        || conditioner.out_dim() != transformed.len() * raw_len(self.bins)
                        || conditioner.input_shift.len() != conditioner.in_dim()
                        || conditioner.input_scale.len() != conditioner.in_dim()
                    {
                        return shape(format!("layer {i}: conditioner dims {:?}", conditioner.layer_dims()));
                    }
                    for pair in conditioner.layers.windows(2) {
                        if pair[0].weight.ncols() != pair[1].weight.nrows() {
                            return shape(format!("layer {i}: conditioner layers do not chain"));
                        }
                    }
                    if conditioner.layers.iter().any(|d| d.bias.dim() != (1, d.weight.ncols())) {
                        return shape(format!("layer {i}: conditioner bias shape"));
                    }
                }
                Layer::FixedSpline { params } => {
                    if params.knot_x.len() < 2
                        || params.knot_y.len() != params.knot_x.len()
                        || params.derivs.len() != params.knot_x.len()
                    {
                        return shape(format!("layer {i}: fixed spline knot vectors disagree"));
                    }
                }
            }
        }
        Ok(())
    }
}

impl<T: Real + Serialize + DeserializeOwned> ConditionalBijection<T> {
    pub fn to_json(&self) -> Result<String> {
        let doc = Document {
            format: FLOW_FORMAT.to_string(),
            version: FLOW_VERSION,
            flow: self.clone(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: Document<T> = serde_json::from_str(text)?;
        if doc.format != FLOW_FORMAT {
            return Err(Error::Schema(format!("expected a `{FLOW_FORMAT}` document, found `{}`", doc.format)));
        }
        if doc.version != FLOW_VERSION {
            return Err(Error::Version {
                found: doc.version,
                expected: FLOW_VERSION,
            });
        }
        doc.flow.validate_structure()?;
        Ok(doc.flow)
    }
}
