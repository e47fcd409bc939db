use super::DrawIndex;
use crate::error::{Error, Result};
use crate::param::{self, ParamVector};
use crate::task::{NoiseModel, Task};

/// Models whose norm exceeds this are treated as diverged.
pub const DIVERGENCE_NORM: f64 = 1e12;

/// One corrected SGD step: `x ← x − γ(g + z + y)`, skipping absent corrections.
///
/// `corrections` are added to the gradient in the order given.
pub fn local_update(
    model: &mut ParamVector,
    corrections: &[&ParamVector],
    task: &Task,
    noise: &NoiseModel,
    gamma: f64,
    draw: DrawIndex,
    client: usize,
) -> Result<()> {
    let g = task.stochastic_gradient(model, noise, draw)?;
    step(model, &g, corrections, gamma);
    if !model.is_finite() || model.norm() > DIVERGENCE_NORM {
        return Err(Error::Diverged { at: draw, client });
    }
    Ok(())
}

pub(crate) fn step(model: &mut ParamVector, grad: &ParamVector, corrections: &[&ParamVector], gamma: f64) {
    let x = model.as_mut_slice();
    for k in 0..x.len() {
        let mut d = grad[k];
        for c in corrections {
            d += c[k];
        }
        x[k] -= gamma * d;
    }
}

/// Mean of client models in the given (ascending id) order.
pub fn group_aggregate<'a>(models: impl IntoIterator<Item = &'a ParamVector>) -> ParamVector {
    param::mean(models)
}

/// `ν ← ν + (pre − agg)/(P·γ)`, the displacement rule shared by client-group,
/// group-global and every level of a deeper hierarchy.
pub fn apply_displacement(
    correction: &mut ParamVector,
    pre: &ParamVector,
    agg: &ParamVector,
    period: usize,
    gamma: f64,
) {
    let denom = period as f64 * gamma;
    let c = correction.as_mut_slice();
    for k in 0..c.len() {
        c[k] += (pre[k] - agg[k]) / denom;
    }
}

/// `‖Σ v‖ / (1 + max ‖v‖)` over a sibling set of corrections.
pub fn zero_sum_violation<'a>(items: impl IntoIterator<Item = &'a ParamVector>) -> f64 {
    let mut sum: Option<ParamVector> = None;
    let mut max_norm = 0.0f64;
    for v in items {
        max_norm = max_norm.max(v.norm());
        match &mut sum {
            Some(s) => s.add_assign(v),
            None => sum = Some(v.clone()),
        }
    }
    sum.map_or(0.0, |s| s.norm() / (1.0 + max_norm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::{DataShard, Example, NoiseSource, TaskKind};

    fn half_square() -> Task {
        // F(x) = ½x², ∇F(x) = x
        let shard = DataShard::new(0, vec![Example::new(vec![1.0], 0.0)]).unwrap();
        Task::full_batch(TaskKind::Quadratic, shard).unwrap()
    }

    fn v(x: f64) -> ParamVector {
        ParamVector::from_vec(vec![x])
    }

    const NOISE: NoiseModel = NoiseModel::seeded(NoiseSource::Minibatch, 0, 0);
    const D: DrawIndex = DrawIndex::new(0, 0, 0);

    #[test]
    fn plain_step() {
        let mut x = v(1.0);
        local_update(&mut x, &[&v(0.0), &v(0.0)], &half_square(), &NOISE, 0.1, D, 0).unwrap();
        assert_eq!(x[0], 0.9);
    }

    #[test]
    fn correction_cancels_gradient() {
        let mut x = v(1.0);
        local_update(&mut x, &[&v(-1.0), &v(0.0)], &half_square(), &NOISE, 0.1, D, 0).unwrap();
        assert_eq!(x[0], 1.0);
    }

    #[test]
    fn zero_step_size() {
        let mut x = v(1.0);
        local_update(&mut x, &[], &half_square(), &NOISE, 0.0, D, 0).unwrap();
        assert_eq!(x[0], 1.0);
    }

    #[test]
    fn divergence_is_reported_with_position() {
        let mut x = v(1e11);
        let err = local_update(&mut x, &[], &half_square(), &NOISE, -100.0, DrawIndex::new(2, 1, 3), 5).unwrap_err();
        assert!(matches!(err, Error::Diverged { at, client: 5 } if at == DrawIndex::new(2, 1, 3)));
    }

    #[test]
    fn aggregate_examples() {
        assert_eq!(group_aggregate([&v(0.9), &v(1.1)])[0], 1.0);
        assert_eq!(group_aggregate([&v(0.25)])[0], 0.25);
        assert_eq!(group_aggregate([&v(1.0), &v(2.0), &v(4.0)])[0], 7.0 / 3.0);
    }

    #[test]
    fn client_correction_examples() {
        let mut z = v(0.3);
        apply_displacement(&mut z, &v(1.0), &v(1.0), 1, 0.1);
        assert_eq!(z[0], 0.3);
        // H = 1, γ = 0.1: (0.9 − 1.0)/0.1
        let mut z = v(0.0);
        apply_displacement(&mut z, &v(0.9), &v(1.0), 1, 0.1);
        assert!((z[0] + 1.0).abs() < 1e-15);
        let (mut z1, mut z2) = (v(0.0), v(0.0));
        apply_displacement(&mut z1, &v(1.5), &v(1.0), 3, 0.2);
        apply_displacement(&mut z2, &v(0.5), &v(1.0), 3, 0.2);
        assert_eq!(z1[0], -z2[0]);
    }

    #[test]
    fn group_correction_example() {
        // E = H = 1, γ = 0.1: (1.2 − 1.0)/0.1
        let mut y = v(0.0);
        apply_displacement(&mut y, &v(1.2), &v(1.0), 1, 0.1);
        assert!((y[0] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn violation_of_balanced_set_is_zero() {
        assert_eq!(zero_sum_violation([&v(1.0), &v(-1.0)]), 0.0);
        assert!((zero_sum_violation([&v(1.0), &v(1.0)]) - 1.0).abs() < 1e-15);
    }
}
