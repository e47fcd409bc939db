//! Measured quantities: virtual iterates, stationarity, gradient dissimilarity,
//! model drift, step-size bounds and a flat-topology control-variate reference.

mod drift;
mod scaffold;
mod trace;

use serde::{Deserialize, Serialize};

pub use drift::{measure_drift, DriftRecord};
pub use scaffold::{scaffold_reference, ScaffoldTrajectory};
pub use trace::{MetricOptions, MetricRecord, MetricRecorder, MetricTrace, ThresholdMetric, METRIC_CSV_HEADER};

use crate::engine::RunState;
use crate::error::{Error, Result};
use crate::param::{self, ParamVector};
use crate::task::Task;
use crate::topology::Topology;

/// `x̂^{t,e} = (1/N) Σ_j x̄_j^{t,e}`
pub fn virtual_global_iterate(state: &RunState) -> ParamVector {
    state.virtual_global()
}

/// `∇f_j(x)` for every group.
pub fn group_gradients(tasks: &[Task], topology: &Topology, x: &ParamVector) -> Result<Vec<ParamVector>> {
    let per_client = tasks.iter().map(|t| t.full_gradient(x)).collect::<Result<Vec<_>>>()?;
    Ok(topology
        .groups()
        .iter()
        .map(|members| param::mean(members.iter().map(|&i| &per_client[i])))
        .collect())
}

/// `∇f(x) = (1/N) Σ_j (1/n_j) Σ_{i∈C_j} ∇F_i(x)`
pub fn global_gradient(tasks: &[Task], topology: &Topology, x: &ParamVector) -> Result<ParamVector> {
    Ok(param::mean(&group_gradients(tasks, topology, x)?))
}

/// `f(x)` with the same group-then-global weighting as [`global_gradient`].
pub fn global_loss(tasks: &[Task], topology: &Topology, x: &ParamVector) -> Result<f64> {
    let mut total = 0.0;
    for members in topology.groups() {
        let mut group = 0.0;
        for &i in members {
            group += tasks[i].loss(x)?;
        }
        total += group / members.len() as f64;
    }
    Ok(total / topology.n_groups() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DissimilarityReport {
    /// `(1/N) Σ_j ‖∇f_j(x) − ∇f(x)‖²`
    pub delta1_sq: f64,
    /// `(1/n_j) Σ_{i∈C_j} ‖∇F_i(x) − ∇f_j(x)‖²` per group.
    pub delta2_sq_per_group: Vec<f64>,
    pub delta2_sq_max: f64,
}

/// Group- and client-level gradient dissimilarity at a probe point.
pub fn gradient_dissimilarity(tasks: &[Task], topology: &Topology, x: &ParamVector) -> Result<DissimilarityReport> {
    let per_client = tasks.iter().map(|t| t.full_gradient(x)).collect::<Result<Vec<_>>>()?;
    let mut group_grads = Vec::with_capacity(topology.n_groups());
    let mut delta2 = Vec::with_capacity(topology.n_groups());
    for members in topology.groups() {
        let gj = param::mean(members.iter().map(|&i| &per_client[i]));
        let spread: f64 = members.iter().map(|&i| per_client[i].dist_sq(&gj)).sum();
        delta2.push(spread / members.len() as f64);
        group_grads.push(gj);
    }
    let g = param::mean(&group_grads);
    let delta1_sq = group_grads.iter().map(|gj| gj.dist_sq(&g)).sum::<f64>() / group_grads.len() as f64;
    let delta2_sq_max = delta2.iter().copied().fold(0.0, f64::max);
    Ok(DissimilarityReport {
        delta1_sq,
        delta2_sq_per_group: delta2,
        delta2_sq_max,
    })
}

/// Largest step size covered by the convergence guarantee: `1/(40·E·H·L)`.
pub fn stepsize_bound(l: f64, group_rounds: usize, local_steps: usize) -> Result<f64> {
    if !(l > 0.0 && l.is_finite()) {
        return Err(Error::Config(format!("smoothness constant must be positive, got {l}")));
    }
    if group_rounds == 0 || local_steps == 0 {
        return Err(Error::Config("E and H must be at least 1".into()));
    }
    Ok(1.0 / (40.0 * group_rounds as f64 * local_steps as f64 * l))
}

/// `Ñ = ((1/N²) Σ_j 1/n_j)⁻¹`
pub fn effective_client_count(topology: &Topology) -> f64 {
    let n = topology.n_groups() as f64;
    let s: f64 = topology.group_sizes().iter().map(|&nj| 1.0 / nj as f64).sum();
    n * n / s
}

/// First index whose value is at or below `threshold`.
pub fn first_crossing(values: &[f64], threshold: f64) -> Option<usize> {
    values.iter().position(|&v| v <= threshold)
}

/// Smallest global round `t` whose recorded metric at `x̂^{t,0}` is at or below
/// `threshold`.
pub fn rounds_to_threshold(trace: &MetricTrace, threshold: f64, metric: ThresholdMetric) -> Option<usize> {
    trace
        .round_series(metric)
        .into_iter()
        .find(|&(_, v)| v <= threshold)
        .map(|(t, _)| t)
}
