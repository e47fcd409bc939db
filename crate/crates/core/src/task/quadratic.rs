//! Least squares `F(x) = ½‖Ax − b‖²`, one row `(a_k, b_k)` per example.
//!
//! The per-example loss is scaled by the shard size `m` so that the shard average
//! equals the un-normalized sum and stochastic minibatches stay unbiased.

use super::Example;
use crate::param::ParamVector;

fn residual(ex: &Example, x: &ParamVector) -> f64 {
    ex.features.iter().zip(x.as_slice()).map(|(a, v)| a * v).sum::<f64>() - ex.target
}

pub(super) fn loss(ex: &Example, x: &ParamVector, m: usize) -> f64 {
    let r = residual(ex, x);
    0.5 * m as f64 * r * r
}

pub(super) fn accumulate_gradient(ex: &Example, x: &ParamVector, m: usize, w: f64, g: &mut ParamVector) {
    let coef = w * m as f64 * residual(ex, x);
    for (gk, a) in g.as_mut_slice().iter_mut().zip(&ex.features) {
        *gk += coef * a;
    }
}

/// `g += Aᵀ(Ax − b)`
pub(super) fn accumulate_normal(rows: &[Example], x: &ParamVector, g: &mut ParamVector) {
    for ex in rows {
        let r = residual(ex, x);
        for (gk, a) in g.as_mut_slice().iter_mut().zip(&ex.features) {
            *gk += r * a;
        }
    }
}
