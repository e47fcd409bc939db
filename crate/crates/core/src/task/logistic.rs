use super::Example;
use crate::param::ParamVector;

fn logit(ex: &Example, x: &ParamVector) -> f64 {
    ex.features.iter().zip(x.as_slice()).map(|(a, v)| a * v).sum()
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

pub(super) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub(super) fn loss(ex: &Example, x: &ParamVector) -> f64 {
    let z = logit(ex, x);
    softplus(z) - ex.target * z
}

pub(super) fn accumulate_gradient(ex: &Example, x: &ParamVector, w: f64, g: &mut ParamVector) {
    let coef = w * (sigmoid(logit(ex, x)) - ex.target);
    for (gk, a) in g.as_mut_slice().iter_mut().zip(&ex.features) {
        *gk += coef * a;
    }
}
