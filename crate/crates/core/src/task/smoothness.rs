use nalgebra::{DMatrix, SymmetricEigen};

use super::{Task, TaskKind};
use crate::error::{Error, Result};
use crate::param::ParamVector;

const POWER_MAX_ITERS: usize = 2000;
const POWER_TOL: f64 = 1e-10;
const HVP_STEP: f64 = 1e-5;

pub(super) fn normal_matrix(task: &Task) -> DMatrix<f64> {
    let d = task.dim();
    let mut ata = DMatrix::<f64>::zeros(d, d);
    for ex in &task.shard.examples {
        for (r, ar) in ex.features.iter().enumerate() {
            for (c, ac) in ex.features.iter().enumerate() {
                ata[(r, c)] += ar * ac;
            }
        }
    }
    ata
}

/// Smoothness constant `L` of a task's objective.
///
/// Exact `λ_max(AᵀA)` for quadratics; otherwise a power-iteration estimate of the
/// largest Hessian eigenvalue magnitude at `x = 0`, using central differences of the
/// full gradient for Hessian-vector products.
pub fn lipschitz_constant(task: &Task) -> Result<f64> {
    match task.kind {
        TaskKind::Quadratic => {
            let eig = SymmetricEigen::new(normal_matrix(task));
            Ok(eig.eigenvalues.iter().copied().fold(0.0, f64::max))
        }
        TaskKind::Logistic | TaskKind::Mlp { .. } => power_iteration(task),
    }
}

/// Largest smoothness constant over a set of client tasks.
pub fn max_lipschitz(tasks: &[Task]) -> Result<f64> {
    tasks
        .iter()
        .map(lipschitz_constant)
        .try_fold(0.0f64, |acc, l| l.map(|l| acc.max(l)))
}

fn hessian_vector(task: &Task, at: &ParamVector, v: &ParamVector) -> Result<ParamVector> {
    let mut plus = at.clone();
    plus.axpy(HVP_STEP, v);
    let mut minus = at.clone();
    minus.axpy(-HVP_STEP, v);
    let mut hv = task.full_gradient(&plus)?;
    hv.sub_assign(&task.full_gradient(&minus)?);
    hv.scale(0.5 / HVP_STEP);
    Ok(hv)
}

fn power_iteration(task: &Task) -> Result<f64> {
    let d = task.dim();
    let origin = ParamVector::zeros(d);
    // fixed, non-symmetric start so no eigenvector is orthogonal by construction
    let mut v = ParamVector::from_vec((0..d).map(|k| 1.0 + 0.01 * k as f64).collect());
    v.scale(1.0 / v.norm());
    let mut trace = Vec::new();
    let mut previous = f64::NAN;
    for _ in 0..POWER_MAX_ITERS {
        let hv = hessian_vector(task, &origin, &v)?;
        let estimate = hv.norm();
        trace.push(estimate);
        if estimate == 0.0 {
            return Ok(0.0);
        }
        if (estimate - previous).abs() <= POWER_TOL * estimate {
            return Ok(estimate);
        }
        previous = estimate;
        v = hv;
        v.scale(1.0 / estimate);
    }
    Err(Error::EstimateFailed { trace })
}
