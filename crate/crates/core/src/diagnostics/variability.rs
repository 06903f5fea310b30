//! Variability matrices: does the instrument (or the backdoor set) move the
//! system enough for the noise to be identified?

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use super::stats::{determinant, silverman_bandwidth};
use crate::error::{Error, Result};
use crate::scm::Dataset;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariabilityReport {
    /// Evaluation points of the exogenous variable.
    pub u_star_grid: Vec<Vec<f64>>,
    /// Matrix at every grid point.
    pub matrices: Vec<Vec<Vec<f64>>>,
    /// `|det M|` at every grid point.
    pub dets: Vec<f64>,
    /// Minimum of `dets`.
    pub abs_det: f64,
    pub threshold: f64,
    /// Per grid point: whether the determinant clears its threshold.
    pub point_pass: Vec<bool>,
    pub pass: bool,
    /// Instrument values (IV) or the chosen backdoor values per grid point (BC).
    pub conditions: Vec<Vec<f64>>,
    /// Bootstrap standard error of each determinant (BC only).
    pub bootstrap_se: Vec<f64>,
}

fn to_rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn gaussian(t: f64) -> f64 {
    (-0.5 * t * t).exp()
}

/// `M[j][k] = P(x_j | u*, i_k)` by Gaussian-kernel weighting of the rows of
/// instrument `i_k` around `u*` (Silverman bandwidth of the first hidden
/// coordinate). Passes when `min |det M| >= c` over the grid.
pub fn variability_iv(
    ds: &Dataset,
    u_grid: &[f64],
    i_values: &[f64],
    x_values: &[f64],
    c: f64,
) -> Result<VariabilityReport> {
    let u = ds.hidden_u()?.column(0).to_vec();
    let inst = ds
        .i
        .as_ref()
        .ok_or_else(|| Error::Schema("variability_iv needs an instrument column".into()))?
        .column(0)
        .to_vec();
    let n = i_values.len();
    if n == 0 || x_values.len() != n {
        return Err(Error::Shape(format!(
            "need as many x values as instrument values, got {} and {}",
            x_values.len(),
            n
        )));
    }
    let x = ds.x.column(0).to_vec();
    let h = silverman_bandwidth(&u);
    let mut matrices = Vec::new();
    let mut dets = Vec::new();
    let mut empty = Vec::new();
    for &us in u_grid {
        let mut m = Array2::zeros((n, n));
        for (k, &ik) in i_values.iter().enumerate() {
            let mut total = 0.0;
            let mut near = 0;
            for r in 0..u.len() {
                if inst[r] != ik {
                    continue;
                }
                let t = (u[r] - us) / h;
                if t.abs() <= 3.0 {
                    near += 1;
                }
                let w = gaussian(t);
                total += w;
                if let Some(j) = x_values.iter().position(|xv| *xv == x[r]) {
                    m[[j, k]] += w;
                }
            }
            if near < 5 || total <= 0.0 {
                empty.push(format!("(i = {ik}, u* = {us})"));
                continue;
            }
            for j in 0..n {
                m[[j, k]] /= total;
            }
        }
        dets.push(determinant(&m)?.abs());
        matrices.push(to_rows(&m));
    }
    if !empty.is_empty() {
        return Err(Error::InsufficientSupport(format!("no rows near {}", empty.join(", "))));
    }
    let abs_det = dets.iter().copied().fold(f64::INFINITY, f64::min);
    let point_pass: Vec<bool> = dets.iter().map(|d| *d >= c).collect();
    Ok(VariabilityReport {
        u_star_grid: u_grid.iter().map(|u| vec![*u]).collect(),
        matrices,
        pass: point_pass.iter().all(|p| *p) && !u_grid.is_empty(),
        point_pass,
        dets,
        abs_det,
        threshold: c,
        conditions: vec![i_values.to_vec()],
        bootstrap_se: Vec::new(),
    })
}

/// Kernel estimate of `p(u* | z)` and its gradient from weighted rows.
struct ConditionalKde<'a> {
    u: &'a Array2<f64>,
    z: &'a [f64],
    hu: Vec<f64>,
    hz: f64,
}

impl ConditionalKde<'_> {
    /// `[p, dp/du_1, ..., dp/du_d]` at `(u*, z)` with row weights `boot`;
    /// gradients by central differences with step `hu / 2`.
    fn row(&self, us: &[f64], z: f64, boot: Option<&[f64]>) -> (Vec<f64>, usize) {
        let d = us.len();
        let mut points = vec![us.to_vec()];
        for j in 0..d {
            for s in [0.5, -0.5] {
                let mut p = us.to_vec();
                p[j] += s * self.hu[j];
                points.push(p);
            }
        }
        let norm: f64 = self.hu.iter().map(|h| h * (2.0 * std::f64::consts::PI).sqrt()).product();
        let mut dens = vec![0.0; points.len()];
        let mut total = 0.0;
        let mut near = 0;
        for r in 0..self.z.len() {
            let tz = (self.z[r] - z) / self.hz;
            if tz.abs() > 6.0 {
                continue;
            }
            if tz.abs() <= 3.0 {
                near += 1;
            }
            let w = gaussian(tz) * boot.map_or(1.0, |b| b[r]);
            total += w;
            for (p, out) in points.iter().zip(dens.iter_mut()) {
                let mut k = 1.0;
                for j in 0..d {
                    k *= gaussian((self.u[[r, j]] - p[j]) / self.hu[j]);
                }
                *out += w * k;
            }
        }
        if total <= 0.0 {
            return (vec![0.0; d + 1], near);
        }
        for v in dens.iter_mut() {
            *v /= total * norm;
        }
        let mut out = vec![dens[0]];
        for j in 0..d {
            out.push((dens[1 + 2 * j] - dens[2 + 2 * j]) / self.hu[j]);
        }
        (out, near)
    }
}

/// Silverman's normal-reference rule for one coordinate of a `d`-dimensional
/// product kernel, with the robust spread of the one-dimensional rule.
fn product_bandwidth(xs: &[f64], d: usize) -> f64 {
    if d == 1 {
        return silverman_bandwidth(xs);
    }
    let n = xs.len() as f64;
    let h1 = silverman_bandwidth(xs) / (0.9 * n.powf(-0.2));
    let d = d as f64;
    h1 * (4.0 / (d + 2.0)).powf(1.0 / (d + 4.0)) * n.powf(-1.0 / (d + 4.0))
}

fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, &mut Vec::new(), &mut out);
    out
}

/// Backdoor variability: rows `[p(u*|z_i), grad p(u*|z_i)]` for `d + 1`
/// backdoor values. At each grid point the subset of `z_candidates` with the
/// largest `|det|` is chosen; the point passes when that determinant exceeds
/// three bootstrap standard errors (`n_boot` Poisson-weighted replicates).
pub fn variability_bc(
    ds: &Dataset,
    u_grid: &[Vec<f64>],
    z_candidates: &[f64],
    n_boot: usize,
    seed: u64,
) -> Result<VariabilityReport> {
    let u = ds.hidden_u()?;
    let d = u.ncols();
    let z = ds
        .z
        .as_ref()
        .ok_or_else(|| Error::Schema("variability_bc needs a backdoor column".into()))?
        .column(0)
        .to_vec();
    if z_candidates.len() < d + 1 {
        return Err(Error::InvalidArgument(format!(
            "need at least {} backdoor values, got {}",
            d + 1,
            z_candidates.len()
        )));
    }
    if u_grid.iter().any(|p| p.len() != d) {
        return Err(Error::Shape(format!("grid points must have {d} coordinates")));
    }
    let kde = ConditionalKde {
        u,
        z: &z,
        hu: (0..d).map(|j| product_bandwidth(&u.column(j).to_vec(), d)).collect(),
        hz: silverman_bandwidth(&z),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let poisson = Poisson::new(1.0).expect("valid");
    let boots: Vec<Vec<f64>> = (0..n_boot)
        .map(|_| (0..z.len()).map(|_| poisson.sample(&mut rng)).collect())
        .collect();
    let combos = subsets(z_candidates.len(), d + 1);
    let build = |rows: &[Vec<f64>], pick: &[usize]| Array2::from_shape_fn((d + 1, d + 1), |(a, b)| rows[pick[a]][b]);

    let mut report = VariabilityReport {
        u_star_grid: u_grid.to_vec(),
        matrices: Vec::new(),
        dets: Vec::new(),
        abs_det: f64::INFINITY,
        threshold: 0.0,
        point_pass: Vec::new(),
        pass: !u_grid.is_empty(),
        conditions: Vec::new(),
        bootstrap_se: Vec::new(),
    };
    for us in u_grid {
        let mut rows = Vec::with_capacity(z_candidates.len());
        for &zc in z_candidates {
            let (row, near) = kde.row(us, zc, None);
            if near < 10 {
                return Err(Error::InsufficientSupport(format!("fewer than 10 rows near z = {zc}")));
            }
            rows.push(row);
        }
        let mut best = (0.0, &combos[0]);
        for pick in &combos {
            let det = determinant(&build(&rows, pick))?.abs();
            if det > best.0 {
                best = (det, pick);
            }
        }
        let (det, pick) = best;
        let reps: Vec<f64> = boots
            .iter()
            .map(|w| {
                let rows: Vec<Vec<f64>> = pick.iter().map(|i| kde.row(us, z_candidates[*i], Some(w)).0).collect();
                let idx: Vec<usize> = (0..=d).collect();
                determinant(&build(&rows, &idx)).map(f64::abs)
            })
            .collect::<Result<_>>()?;
        let se = if reps.len() > 1 {
            let m = reps.iter().sum::<f64>() / reps.len() as f64;
            (reps.iter().map(|r| (r - m) * (r - m)).sum::<f64>() / (reps.len() - 1) as f64).sqrt()
        } else {
            0.0
        };
        let ok = det > 3.0 * se && det > 0.0 && n_boot > 1;
        report.pass &= ok;
        report.point_pass.push(ok);
        report.matrices.push(to_rows(&build(&rows, pick)));
        report.dets.push(det);
        report.abs_det = report.abs_det.min(det);
        report.threshold = report.threshold.max(3.0 * se);
        report.conditions.push(pick.iter().map(|i| z_candidates[*i]).collect());
        report.bootstrap_se.push(se);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scm::{AbrLike, AbrStructure, Ellipse, GroundTruthScm};
    use rand::seq::SliceRandom;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn single_cell_matrix() {
        let ds = AbrLike(AbrStructure::Iv).sample(5000, 1).unwrap();
        // one x value, one instrument: M = [P(x | u, i)]; restrict to rows with that x
        let rows: Vec<usize> = (0..ds.n()).filter(|k| ds.x[[*k, 0]] == 1.2 && ds.i.as_ref().unwrap()[[*k, 0]] == 3.0).collect();
        let sub = ds.select(&rows);
        let r = variability_iv(&sub, &[1.0], &[3.0], &[1.2], 1e-4).unwrap();
        assert!((r.abs_det - 1.0).abs() < 1e-12 && r.pass);
    }

    #[test]
    fn iv_policies_move_the_bitrate() {
        let ds = AbrLike(AbrStructure::Iv).sample(100_000, 2).unwrap();
        let grid = [0.8, 1.0, 1.25, 1.6];
        let r = variability_iv(&ds, &grid, &[1.0, 4.0, 6.0, 8.0, 10.0], &crate::scm::BITRATES, 1e-4).unwrap();
        assert!(r.pass, "{:?}", r.dets);
        // relabelling changes the sign of det only
        let r2 = variability_iv(&ds, &grid, &[4.0, 1.0, 6.0, 8.0, 10.0], &crate::scm::BITRATES, 1e-4).unwrap();
        for (a, b) in r.dets.iter().zip(&r2.dets) {
            assert!((a - b).abs() <= 1e-12 * a.max(1e-300));
        }
    }

    #[test]
    fn disconnected_instrument_fails() {
        let mut ds = AbrLike(AbrStructure::Iv).sample(100_000, 3).unwrap();
        // policies applied to shuffled rows: the instrument no longer reaches x
        let mut ids = ds.i.as_ref().unwrap().column(0).to_vec();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(4));
        ds.i.as_mut().unwrap().column_mut(0).assign(&ndarray::Array1::from(ids));
        let r = variability_iv(&ds, &[0.8, 1.0, 1.25, 1.6], &[1.0, 4.0, 6.0, 8.0, 10.0], &crate::scm::BITRATES, 1e-4).unwrap();
        assert!(!r.pass, "{:?}", r.dets);
    }

    const ELLIPSE_Z: [f64; 7] = [-0.45, -0.3, -0.15, 0.0, 0.15, 0.3, 0.45];

    /// Points near the mode of the hidden `u`.
    fn ellipse_grid() -> Vec<Vec<f64>> {
        vec![vec![1.2, 1.5], vec![1.2, 2.0], vec![1.4, 2.0]]
    }

    #[test]
    fn ellipse_backdoor_has_variability() {
        let ds = Ellipse.sample(100_000, 5).unwrap();
        let r = variability_bc(&ds, &ellipse_grid(), &ELLIPSE_Z, 30, 6).unwrap();
        assert!(r.pass, "{:?} {:?}", r.dets, r.bootstrap_se);
    }

    #[test]
    fn independent_backdoor_fails() {
        let mut ds = Ellipse.sample(100_000, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        ds.z.as_mut().unwrap().mapv_inplace(|_| rng.random_range(-0.5..0.5));
        let r = variability_bc(&ds, &ellipse_grid(), &ELLIPSE_Z, 30, 9).unwrap();
        assert!(!r.pass, "{:?} {:?}", r.dets, r.bootstrap_se);
    }

    #[test]
    fn scalar_backdoor_with_two_distinct_conditionals() {
        // z in {0, 1}; u | z ~ N(z, 1)
        let n = 20_000;
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let z = Array2::from_shape_fn((n, 1), |(k, _)| (k % 2) as f64);
        let u = Array2::from_shape_fn((n, 1), |(k, _)| z[[k, 0]] + rng.sample::<f64, _>(StandardNormal));
        let ds = Dataset {
            scm: "two-normals".into(),
            seed: 0,
            i: None,
            z: Some(z),
            x: Array2::zeros((n, 1)),
            v: u.clone(),
            u_hidden: Some(u),
        };
        // det [[p0, p0'], [p1, p1']] = p0 p1 (s1 - s0) with log-slopes s = z - u, never zero
        let r = variability_bc(&ds, &[vec![0.5], vec![-1.0]], &[0.0, 1.0], 30, 11).unwrap();
        assert!(r.pass, "{:?} {:?}", r.dets, r.bootstrap_se);
    }
}
