//! Abduction-action-prediction over a mechanism bijective in its noise.

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::ConditionalBijection;
use crate::scm::{Dataset, GroundTruthScm};

/// A mechanism `v = f(x, u)` with an explicit inverse in `u`.
pub trait Mechanism {
    fn x_dim(&self) -> usize;

    fn var_dim(&self) -> usize;

    fn forward(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>>;

    fn inverse(&self, x: &[f64], v: &[f64]) -> Result<Vec<f64>>;

    fn forward_batch(&self, x: ArrayView2<f64>, u: ArrayView2<f64>) -> Result<Array2<f64>> {
        map_rows(self.var_dim(), x, u, |a, b| self.forward(a, b))
    }

    fn inverse_batch(&self, x: ArrayView2<f64>, v: ArrayView2<f64>) -> Result<Array2<f64>> {
        map_rows(self.var_dim(), x, v, |a, b| self.inverse(a, b))
    }
}

fn map_rows(
    width: usize,
    x: ArrayView2<f64>,
    w: ArrayView2<f64>,
    f: impl Fn(&[f64], &[f64]) -> Result<Vec<f64>>,
) -> Result<Array2<f64>> {
    if x.nrows() != w.nrows() {
        return Err(Error::Shape(format!("{} conditions for {} rows", x.nrows(), w.nrows())));
    }
    let mut out = Array2::zeros((w.nrows(), width));
    for (k, mut row) in out.rows_mut().into_iter().enumerate() {
        let r = f(&x.row(k).to_vec(), &w.row(k).to_vec())?;
        row.assign(&ndarray::ArrayView1::from(&r));
    }
    Ok(out)
}

impl Mechanism for ConditionalBijection<f64> {
    fn x_dim(&self) -> usize {
        self.cond_dim
    }

    fn var_dim(&self) -> usize {
        self.var_dim
    }

    fn forward(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        Ok(ConditionalBijection::forward(self, x, u)?.0)
    }

    fn inverse(&self, x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        Ok(ConditionalBijection::inverse(self, x, v)?.0)
    }

    fn forward_batch(&self, x: ArrayView2<f64>, u: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(ConditionalBijection::forward_batch(self, x, u)?.0)
    }

    fn inverse_batch(&self, x: ArrayView2<f64>, v: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(ConditionalBijection::inverse_batch(self, x, v)?.0)
    }
}

/// The generating mechanism of a synthetic SCM.
pub struct TrueBgm<'a>(pub &'a dyn GroundTruthScm);

impl Mechanism for TrueBgm<'_> {
    fn x_dim(&self) -> usize {
        self.0.x_dim()
    }

    fn var_dim(&self) -> usize {
        self.0.var_dim()
    }

    fn forward(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        Ok(self.0.true_forward(x, u))
    }

    fn inverse(&self, x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        Ok(self.0.true_inverse(x, v))
    }
}

fn check(m: &dyn Mechanism, x: &[f64], v: &[f64]) -> Result<()> {
    if x.len() != m.x_dim() || v.len() != m.var_dim() {
        return Err(Error::Shape(format!(
            "mechanism takes ({}, {}) values, got ({}, {})",
            m.x_dim(),
            m.var_dim(),
            x.len(),
            v.len()
        )));
    }
    if !x.iter().chain(v).all(|t| t.is_finite()) {
        return Err(Error::NonFinite("counterfactual evidence".into()));
    }
    Ok(())
}

/// `u = f^-1(x, v)`.
pub fn abduct(m: &dyn Mechanism, x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    check(m, x, v)?;
    m.inverse(x, v)
}

/// `f(x', f^-1(x, v))`.
pub fn point_counterfactual(m: &dyn Mechanism, x: &[f64], v: &[f64], x_prime: &[f64]) -> Result<Vec<f64>> {
    check(m, x_prime, v)?;
    let u = abduct(m, x, v)?;
    m.forward(x_prime, &u)
}

/// Abducted noise and the counterfactual at every grid point.
pub fn sweep(m: &dyn Mechanism, x: &[f64], v: &[f64], grid: &[Vec<f64>]) -> Result<(Vec<f64>, Array2<f64>)> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("a sweep needs at least one intervention".into()));
    }
    let u = abduct(m, x, v)?;
    let xs = Array2::from_shape_fn((grid.len(), m.x_dim()), |(k, j)| grid[k].get(j).copied().unwrap_or(f64::NAN));
    if grid.iter().any(|g| g.len() != m.x_dim()) {
        return Err(Error::Shape(format!("sweep points must have {} values", m.x_dim())));
    }
    let us = Array2::from_shape_fn((grid.len(), u.len()), |(_, j)| u[j]);
    Ok((u, m.forward_batch(xs.view(), us.view())?))
}

/// Samples of `V_{x2} | X = x1`: every row with `x` within `tol` (max-norm)
/// of `x1` is abducted under `x1` and pushed through `x2`.
pub fn ett_samples(m: &dyn Mechanism, ds: &Dataset, x1: &[f64], x2: &[f64], tol: f64) -> Result<Array2<f64>> {
    let rows: Vec<usize> = (0..ds.n())
        .filter(|k| ds.x.row(*k).iter().zip(x1).all(|(a, b)| (a - b).abs() <= tol))
        .collect();
    if rows.is_empty() {
        return Err(Error::EmptyEvidence(format!("no rows with x within {tol} of {x1:?}")));
    }
    let v = ds.v.select(ndarray::Axis(0), &rows);
    let n = rows.len();
    let x1s = Array2::from_shape_fn((n, x1.len()), |(_, j)| x1[j]);
    let x2s = Array2::from_shape_fn((n, x2.len()), |(_, j)| x2[j]);
    let u = m.inverse_batch(x1s.view(), v.view())?;
    m.forward_batch(x2s.view(), u.view())
}

fn nearest_rows(x: &ArrayView2<f64>, target: &[f64], k: usize) -> Vec<usize> {
    let mut d: Vec<(f64, usize)> = (0..x.nrows())
        .map(|r| (x.row(r).iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), r))
        .collect();
    d.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    d[..k].iter().map(|p| p.1).collect()
}

/// Model-free counterfactual for a scalar increasing mechanism with `U ⟂ X`:
/// `F^-1(x', F(x, v))`, with both conditional distributions estimated from
/// the `k` rows nearest to `x` and to `x'` (default `max(50, n / 100)`).
pub fn quantile_oracle(
    x: ArrayView2<f64>,
    v: ArrayView2<f64>,
    x_query: &[f64],
    v_query: f64,
    x_prime: &[f64],
    k: Option<usize>,
) -> Result<f64> {
    if v.ncols() != 1 || x.nrows() != v.nrows() || x.ncols() != x_query.len() || x.ncols() != x_prime.len() {
        return Err(Error::Shape("the quantile oracle needs scalar v and matching x".into()));
    }
    let n = x.nrows();
    let k = k.unwrap_or((n / 100).max(50));
    if k < 50 || n < k {
        return Err(Error::InsufficientSupport(format!(
            "quantile windows need at least 50 rows; have {n} rows and window {k}"
        )));
    }
    let here = nearest_rows(&x, x_query, k);
    let there = nearest_rows(&x, x_prime, k);
    let below = here.iter().filter(|r| v[[**r, 0]] < v_query).count() as f64;
    let ties = here.iter().filter(|r| v[[**r, 0]] == v_query).count() as f64;
    let level = (below + 0.5 * ties) / k as f64;
    let mut target: Vec<f64> = there.iter().map(|r| v[[*r, 0]]).collect();
    target.sort_by(f64::total_cmp);
    // Hazen plotting positions: the i-th order statistic sits at (i + 1/2) / k
    let pos = (level * k as f64 - 0.5).clamp(0.0, (k - 1) as f64);
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(k - 1);
    Ok(target[lo] + (pos - lo as f64) * (target[hi] - target[lo]))
}

/// Query file contents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum CounterfactualQuery {
    Point {
        evidence_x: Vec<f64>,
        evidence_v: Vec<f64>,
        intervention_x: Vec<f64>,
    },
    Sweep {
        evidence_x: Vec<f64>,
        evidence_v: Vec<f64>,
        grid: Vec<Vec<f64>>,
    },
    Ett {
        x1: Vec<f64>,
        x2: Vec<f64>,
        tol: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnswerRow {
    pub x_prime: Vec<f64>,
    pub v_prime: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualAnswer {
    /// Abducted noise for point and sweep queries.
    pub abducted_u: Option<Vec<f64>>,
    pub rows: Vec<AnswerRow>,
}

/// Answers a query; `ett` queries read evidence rows from `ds`.
pub fn answer(m: &dyn Mechanism, query: &CounterfactualQuery, ds: Option<&Dataset>) -> Result<CounterfactualAnswer> {
    match query {
        CounterfactualQuery::Point {
            evidence_x,
            evidence_v,
            intervention_x,
        } => {
            let u = abduct(m, evidence_x, evidence_v)?;
            let v_prime = point_counterfactual(m, evidence_x, evidence_v, intervention_x)?;
            Ok(CounterfactualAnswer {
                abducted_u: Some(u),
                rows: vec![AnswerRow {
                    x_prime: intervention_x.clone(),
                    v_prime,
                }],
            })
        }
        CounterfactualQuery::Sweep {
            evidence_x,
            evidence_v,
            grid,
        } => {
            let (u, vs) = sweep(m, evidence_x, evidence_v, grid)?;
            Ok(CounterfactualAnswer {
                abducted_u: Some(u),
                rows: grid
                    .iter()
                    .zip(vs.rows())
                    .map(|(x, v)| AnswerRow {
                        x_prime: x.clone(),
                        v_prime: v.to_vec(),
                    })
                    .collect(),
            })
        }
        CounterfactualQuery::Ett { x1, x2, tol } => {
            let ds = ds.ok_or_else(|| Error::InvalidArgument("ett queries need a dataset".into()))?;
            let vs = ett_samples(m, ds, x1, x2, *tol)?;
            Ok(CounterfactualAnswer {
                abducted_u: None,
                rows: vs
                    .rows()
                    .into_iter()
                    .map(|v| AnswerRow {
                        x_prime: x2.clone(),
                        v_prime: v.to_vec(),
                    })
                    .collect(),
            })
        }
    }
}

fn names(prefix: &str, width: usize) -> Vec<String> {
    if width == 1 {
        vec![prefix.to_string()]
    } else {
        (0..width).map(|k| format!("{prefix}{k}")).collect()
    }
}

impl CounterfactualAnswer {
    /// Writes `x_prime..., v_prime...` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let (dx, dv) = self
            .rows
            .first()
            .map(|r| (r.x_prime.len(), r.v_prime.len()))
            .unwrap_or((1, 1));
        let mut header = names("x_prime", dx);
        header.extend(names("v_prime", dv));
        w.write_record(&header)?;
        for r in &self.rows {
            w.write_record(r.x_prime.iter().chain(&r.v_prime).map(|t| format!("{t:?}")))?;
        }
        w.flush()?;
        Ok(())
    }
}
