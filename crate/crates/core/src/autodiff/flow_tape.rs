//! Recording flow evaluations on a [`Tape`].
//!
//! Parameter variables are consumed in the order of
//! [`ConditionalBijection::params`].

use ndarray::Array2;

use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::flow::{ConditionalBijection, ConditionerNet, Layer};
use crate::scalar::{Real, LOG_INV_SQRT_2PI};

fn conditioner_on_tape<T: Real>(net: &ConditionerNet<T>, tape: &Tape<T>, params: &[Var], cond: Var) -> Result<Var> {
    let d = net.in_dim();
    let shift = tape.constant(Array2::from_shape_fn((1, d), |(_, j)| net.input_shift[j]));
    let inv_scale = tape.constant(Array2::from_shape_fn((1, d), |(_, j)| T::one() / net.input_scale[j]));
    let mut h = tape.mul(tape.sub(cond, shift)?, inv_scale)?;
    let last = net.layers.len() - 1;
    for l in 0..net.layers.len() {
        h = tape.add(tape.matmul(h, params[2 * l])?, params[2 * l + 1])?;
        if l < last {
            h = tape.relu(h)?;
        }
    }
    Ok(h)
}

/// Records `u = f^-1(x, v)`; returns `u` (`n x d`) and the per-row inverse
/// log-determinant (`n x 1`).
pub fn flow_inverse_on_tape<T: Real>(
    flow: &ConditionalBijection<T>,
    tape: &Tape<T>,
    params: &[Var],
    x: Var,
    v: Var,
) -> Result<(Var, Var)> {
    let n_params = flow.params().len();
    if params.len() != n_params {
        return Err(Error::Shape(format!("flow has {n_params} parameters, got {}", params.len())));
    }
    let (rows, d) = tape.shape(v)?;
    if d != flow.var_dim || tape.shape(x)? != (rows, flow.cond_dim) {
        return Err(Error::Shape(format!(
            "flow expects ({} cond, {} var) columns, got {:?} and {:?}",
            flow.cond_dim,
            flow.var_dim,
            tape.shape(x)?,
            (rows, d)
        )));
    }
    // parameter offset of every layer
    let mut offsets = Vec::with_capacity(flow.layers.len());
    let mut at = 0;
    for layer in &flow.layers {
        offsets.push(at);
        at += match layer {
            Layer::Affine(_) => 2,
            Layer::Spline { conditioner, .. } => 2 * conditioner.layers.len(),
            Layer::FixedSpline { .. } => 0,
        };
    }
    let r = crate::flow::spline::raw_len(flow.bins);
    let mut cur = v;
    let mut logdet = tape.constant(Array2::zeros((rows, 1)));
    for (layer, &off) in flow.layers.iter().zip(&offsets).rev() {
        match layer {
            Layer::Affine(_) => {
                let (log_scale, shift) = (params[off], params[off + 1]);
                let inv = tape.exp(tape.neg(log_scale)?)?;
                cur = tape.mul(tape.sub(cur, shift)?, inv)?;
                logdet = tape.sub(logdet, tape.sum(log_scale)?)?;
            }
            Layer::Spline {
                transformed,
                passthrough,
                conditioner,
            } => {
                let pass = tape.cols(cur, passthrough)?;
                let cond = tape.concat(&[x, pass])?;
                let raw = conditioner_on_tape(conditioner, tape, &params[off..], cond)?;
                let mut columns: Vec<Var> = (0..d).map(|j| tape.col(cur, j)).collect::<Result<_>>()?;
                for (k, &j) in transformed.iter().enumerate() {
                    let raw_k = tape.cols(raw, &(k * r..(k + 1) * r).collect::<Vec<_>>())?;
                    let out = tape.spline(raw_k, columns[j], flow.bins, flow.bound, true)?;
                    columns[j] = tape.col(out, 0)?;
                    logdet = tape.add(logdet, tape.col(out, 1)?)?;
                }
                cur = if d == 1 { columns[0] } else { tape.concat(&columns)? };
            }
            Layer::FixedSpline { .. } => {
                return Err(Error::InvalidArgument(
                    "flows with a fixed input warp cannot be trained".into(),
                ))
            }
        }
    }
    Ok((cur, logdet))
}

/// Records the per-row standard-normal log density of `v` given `x` (`n x 1`).
pub fn flow_log_density_on_tape<T: Real>(
    flow: &ConditionalBijection<T>,
    tape: &Tape<T>,
    params: &[Var],
    x: Var,
    v: Var,
) -> Result<Var> {
    let (u, logdet) = flow_inverse_on_tape(flow, tape, params, x, v)?;
    let base = std_normal_log_pdf_on_tape(tape, u)?;
    tape.add(base, logdet)
}

/// Row sums of the standard normal log density of every entry of `u`.
pub fn std_normal_log_pdf_on_tape<T: Real>(tape: &Tape<T>, u: Var) -> Result<Var> {
    let (_, d) = tape.shape(u)?;
    let quad = tape.sum_cols(tape.square(u)?)?;
    tape.add_const(tape.scale(quad, T::lit(-0.5))?, T::lit(LOG_INV_SQRT_2PI * d as f64))
}
