//! One-hidden-layer tanh network with a scalar linear output and squared loss.
//!
//! Parameter layout: `W1` (hidden × input, row-major), `b1` (hidden), `w2` (hidden), `b2`.

use super::Example;
use crate::param::ParamVector;

pub(super) fn param_count(input: usize, hidden: usize) -> usize {
    hidden * input + 2 * hidden + 1
}

struct Forward {
    hidden: Vec<f64>,
    output: f64,
}

fn forward(ex: &Example, x: &ParamVector, hidden: usize) -> Forward {
    let p = ex.features.len();
    let params = x.as_slice();
    let (w1, rest) = params.split_at(hidden * p);
    let (b1, rest) = rest.split_at(hidden);
    let (w2, b2) = rest.split_at(hidden);
    let h: Vec<f64> = (0..hidden)
        .map(|u| {
            let pre: f64 = w1[u * p..(u + 1) * p]
                .iter()
                .zip(&ex.features)
                .map(|(w, a)| w * a)
                .sum::<f64>()
                + b1[u];
            pre.tanh()
        })
        .collect();
    let output = h.iter().zip(w2).map(|(a, b)| a * b).sum::<f64>() + b2[0];
    Forward { hidden: h, output }
}

pub(super) fn loss(ex: &Example, x: &ParamVector, hidden: usize) -> f64 {
    let r = forward(ex, x, hidden).output - ex.target;
    0.5 * r * r
}

pub(super) fn accumulate_gradient(ex: &Example, x: &ParamVector, hidden: usize, w: f64, g: &mut ParamVector) {
    let p = ex.features.len();
    let fw = forward(ex, x, hidden);
    let delta = w * (fw.output - ex.target);
    let w2_off = hidden * p + hidden;
    let params = x.as_slice();
    let grad = g.as_mut_slice();
    for u in 0..hidden {
        let h = fw.hidden[u];
        grad[w2_off + u] += delta * h;
        let dpre = delta * params[w2_off + u] * (1.0 - h * h);
        for (k, a) in ex.features.iter().enumerate() {
            grad[u * p + k] += dpre * a;
        }
        grad[hidden * p + u] += dpre;
    }
    grad[w2_off + hidden] += delta;
}
