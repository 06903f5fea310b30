//! Grid scan for strict monotonicity of a mechanism in its exogenous input.

use serde::{Deserialize, Serialize};

use super::stats::determinant;
use crate::counterfactual::Mechanism;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub x: Vec<f64>,
    /// Left end of the offending step (scalar) or the scan point (multi-d).
    pub u: Vec<f64>,
    /// Scanned coordinate.
    pub coordinate: usize,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityReport {
    pub pass: bool,
    /// Number of grid comparisons made.
    pub checked: usize,
    pub violations: Vec<Violation>,
}

/// Scans `forward(x, .)` on `u_grid` (sorted internally) for every `x` in
/// `x_grid`.
///
/// Scalar mechanisms must be strictly increasing between consecutive grid
/// points. For `d > 1` coordinate `j` is swept over the grid while every other
/// coordinate holds a common base value taken from the grid; at each point the
/// map must keep coordinate `j` of the output increasing along the sweep or, for
/// coupled mechanisms where that coordinate is not separable, preserve
/// orientation (finite-difference Jacobian determinant `> 0`). Non-finite
/// outputs and evaluation errors count as violations.
pub fn monotonicity_check(m: &dyn Mechanism, x_grid: &[Vec<f64>], u_grid: &[f64]) -> Result<MonotonicityReport> {
    let d = m.var_dim();
    if x_grid.iter().any(|x| x.len() != m.x_dim()) {
        return Err(Error::Shape(format!("x grid points must have {} coordinates", m.x_dim())));
    }
    let mut grid = u_grid.to_vec();
    grid.retain(|u| u.is_finite());
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    if grid.len() < 2 {
        return Err(Error::InvalidArgument("monotonicity scan needs at least two grid values".into()));
    }
    let mut report = MonotonicityReport {
        pass: true,
        checked: 0,
        violations: Vec::new(),
    };
    let bases: Vec<f64> = if d == 1 { vec![0.0] } else { grid.clone() };
    for x in x_grid {
        for j in 0..d {
            for &base in &bases {
                let point = |t: f64| {
                    let mut u = vec![base; d];
                    u[j] = t;
                    u
                };
                let mut prev: Option<(Vec<f64>, f64)> = None;
                for &t in &grid {
                    let u = point(t);
                    report.checked += 1;
                    let out = match m.forward(x, &u) {
                        Ok(v) if v.iter().all(|t| t.is_finite()) => v[j],
                        Ok(_) => {
                            report.violations.push(Violation {
                                x: x.clone(),
                                u,
                                coordinate: j,
                                detail: "non-finite output".into(),
                            });
                            prev = None;
                            continue;
                        }
                        Err(e) => {
                            report.violations.push(Violation {
                                x: x.clone(),
                                u,
                                coordinate: j,
                                detail: e.to_string(),
                            });
                            prev = None;
                            continue;
                        }
                    };
                    if let Some((pu, pv)) = prev.take() {
                        if out <= pv && !(d > 1 && orientation_preserved(m, x, &u, j)) {
                            report.violations.push(Violation {
                                x: x.clone(),
                                u: pu,
                                coordinate: j,
                                detail: format!("output {j} went from {pv} to {out} at u{j} = {t}"),
                            });
                        }
                    }
                    prev = Some((u, out));
                }
            }
        }
    }
    report.pass = report.violations.is_empty();
    Ok(report)
}

/// Central-difference Jacobian determinant at `u` is positive; steps are
/// relative to `|u|` with a floor.
fn orientation_preserved(m: &dyn Mechanism, x: &[f64], u: &[f64], _j: usize) -> bool {
    let d = u.len();
    let mut jac = ndarray::Array2::zeros((d, d));
    for c in 0..d {
        let h = 1e-5 * u[c].abs().max(1.0);
        let mut up = u.to_vec();
        let mut dn = u.to_vec();
        up[c] += h;
        dn[c] -= h;
        let (Ok(a), Ok(b)) = (m.forward(x, &up), m.forward(x, &dn)) else {
            return false;
        };
        for r in 0..d {
            jac[[r, c]] = (a[r] - b[r]) / (2.0 * h);
        }
    }
    determinant(&jac).is_ok_and(|det| det > 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::counterfactual::TrueBgm;
    use crate::flow::{ConditionalBijection, FlowConfig, Layer, SplineParams};
    use crate::scm::{Ellipse, Monotone};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
        (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
    }

    fn random_flow(seed: u64, d: usize) -> ConditionalBijection<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = FlowConfig {
            hidden: vec![8],
            spline_layers: 2,
            bins: 8,
            ..FlowConfig::default()
        };
        let mut f = ConditionalBijection::new(1, d, &cfg, &mut rng);
        // large output weights make the splines far from the identity
        for p in f.params_mut() {
            p.mapv_inplace(|w| 3.0 * w + 0.5);
        }
        f
    }

    #[test]
    fn built_flows_pass() {
        let xs: Vec<Vec<f64>> = grid(-2.0, 2.0, 5).into_iter().map(|x| vec![x]).collect();
        for seed in 0..3 {
            let r = monotonicity_check(&random_flow(seed, 1), &xs, &grid(-4.0, 4.0, 400)).unwrap();
            assert!(r.pass, "{:?}", &r.violations[..r.violations.len().min(3)]);
            let r = monotonicity_check(&random_flow(seed, 2), &xs, &grid(-4.0, 4.0, 40)).unwrap();
            assert!(r.pass, "{:?}", &r.violations[..r.violations.len().min(3)]);
        }
    }

    #[test]
    fn true_mechanisms_pass() {
        let xs: Vec<Vec<f64>> = grid(0.0, 6.2, 8).into_iter().map(|x| vec![x]).collect();
        let r = monotonicity_check(&TrueBgm(&Ellipse), &xs, &grid(0.5, 6.0, 30)).unwrap();
        assert!(r.pass && r.checked == 8 * 2 * 30 * 30);
        let xs: Vec<Vec<f64>> = grid(0.0, 2.0, 5).into_iter().map(|x| vec![x]).collect();
        assert!(monotonicity_check(&TrueBgm(&Monotone), &xs, &grid(-5.0, 5.0, 200)).unwrap().pass);
    }

    fn corrupted(mutate: impl FnOnce(&mut SplineParams<f64>)) -> ConditionalBijection<f64> {
        let mut p = SplineParams::identity(4, 3.0);
        mutate(&mut p);
        let mut f = ConditionalBijection::new(1, 1, &FlowConfig::default(), &mut ChaCha8Rng::seed_from_u64(0));
        f.layers = vec![Layer::FixedSpline { params: p }];
        f
    }

    #[test]
    fn negative_derivative_is_located() {
        let f = corrupted(|p| p.derivs[2] = -5.0);
        let r = monotonicity_check(&f, &[vec![0.0]], &grid(-3.0, 3.0, 601)).unwrap();
        assert!(!r.pass);
        // the damage is confined to the two bins around the corrupted knot at 0
        for v in &r.violations {
            assert!(v.u[0] > -1.6 && v.u[0] < 1.5, "{v:?}");
        }
    }

    #[test]
    fn swapped_knots_fail() {
        let f = corrupted(|p| p.knot_y.swap(1, 3));
        let r = monotonicity_check(&f, &[vec![0.0]], &grid(-3.0, 3.0, 301)).unwrap();
        assert!(!r.pass);
    }

    #[test]
    fn decreasing_mechanism_fails_everywhere() {
        let mut f = ConditionalBijection::affine(1, crate::flow::AffineCalibration::new(&[1.0], &[0.0]));
        if let Layer::Affine(a) = &mut f.layers[0] {
            a.log_scale[[0, 0]] = 0.0;
        }
        let neg = corrupted(|p| {
            for d in p.derivs.iter_mut() {
                *d = -1.0;
            }
            p.knot_y.reverse();
        });
        let r = monotonicity_check(&neg, &[vec![0.0]], &grid(-2.0, 2.0, 11)).unwrap();
        assert!(!r.pass);
        assert!(monotonicity_check(&f, &[vec![0.0]], &grid(-2.0, 2.0, 11)).unwrap().pass);
    }

    #[test]
    fn bad_grids_are_rejected() {
        let f = random_flow(0, 1);
        assert!(monotonicity_check(&f, &[vec![0.0]], &[1.0]).is_err());
        assert!(monotonicity_check(&f, &[vec![0.0, 1.0]], &[0.0, 1.0]).is_err());
    }
}
