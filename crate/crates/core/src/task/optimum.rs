use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::smoothness::normal_matrix;
use super::{Task, TaskKind};
use crate::error::{Error, Result};
use crate::param::ParamVector;

/// Relative eigenvalue floor below which the pooled system is treated as singular.
const SINGULAR_RTOL: f64 = 1e-12;

/// Unique minimizer of `Σ_i w_i F_i(x)` for quadratic tasks.
pub fn closed_form_optimum(tasks: &[Task], weights: &[f64]) -> Result<ParamVector> {
    if tasks.is_empty() || tasks.len() != weights.len() {
        return Err(Error::Config("need one weight per task".into()));
    }
    if let Some(t) = tasks.iter().find(|t| t.kind != TaskKind::Quadratic) {
        return Err(Error::Config(format!(
            "closed-form optimum needs quadratic tasks, client {} is {:?}",
            t.shard.owner, t.kind
        )));
    }
    let d = tasks[0].dim();
    let mut h = DMatrix::<f64>::zeros(d, d);
    let mut rhs = DVector::<f64>::zeros(d);
    for (task, &w) in tasks.iter().zip(weights) {
        if task.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: task.dim(),
            });
        }
        h += normal_matrix(task) * w;
        for ex in &task.shard.examples {
            for (k, a) in ex.features.iter().enumerate() {
                rhs[k] += w * a * ex.target;
            }
        }
    }
    let eig = SymmetricEigen::new(h.clone());
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if max <= 0.0 || min <= SINGULAR_RTOL * max {
        return Err(Error::Degenerate(format!(
            "pooled normal matrix is singular (eigenvalues in [{min:e}, {max:e}])"
        )));
    }
    let chol = h
        .cholesky()
        .ok_or_else(|| Error::Degenerate("pooled normal matrix is not positive definite".into()))?;
    let mut x = chol.solve(&rhs);
    // one step of iterative refinement
    let r = &rhs - &chol.l() * (chol.l().transpose() * &x);
    x += chol.solve(&r);
    Ok(ParamVector::from_vec(x.iter().copied().collect()))
}
