use serde::{Deserialize, Serialize};

use crate::engine::RoundSnapshots;
use crate::error::{Error, Result};
use crate::param;
use crate::topology::Topology;

/// Realized (single-trajectory) drift of one global round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftRecord {
    pub t: usize,
    /// Client drift `Q_t = Σ_e (1/NH) Σ_j (1/n_j) Σ_{i∈C_j} Σ_h ‖x̄_j^{t,e} − x_{i,h}^{t,e}‖²`.
    pub client_drift: f64,
    /// Group drift `D_t = Σ_e (1/N) Σ_j ‖x̂^{t,e} − x̄_j^{t,e}‖²`.
    pub group_drift: f64,
}

pub fn measure_drift(snapshots: Option<&RoundSnapshots>, topology: &Topology) -> Result<DriftRecord> {
    let snaps = snapshots.ok_or(Error::UnavailableMetric(
        "drift needs per-iteration snapshots; enable drift recording",
    ))?;
    let n = topology.n_groups() as f64;
    let mut q = 0.0;
    let mut d = 0.0;
    for (groups, clients) in snaps.group_models.iter().zip(&snaps.client_iterates) {
        let x_hat = param::mean(groups);
        d += groups.iter().map(|g| x_hat.dist_sq(g)).sum::<f64>() / n;
        let mut q_e = 0.0;
        for (j, members) in topology.groups().iter().enumerate() {
            let mut q_j = 0.0;
            let mut h_count = 0;
            for &i in members {
                h_count = clients[i].len();
                q_j += clients[i].iter().map(|x| groups[j].dist_sq(x)).sum::<f64>();
            }
            if h_count > 0 {
                q_e += q_j / (members.len() as f64 * h_count as f64);
            }
        }
        q += q_e / n;
    }
    Ok(DriftRecord {
        t: snaps.t,
        client_drift: q,
        group_drift: d,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::ParamVector;

    fn v(x: f64) -> ParamVector {
        ParamVector::from_vec(vec![x])
    }

    #[test]
    fn missing_snapshots_are_an_error() {
        let topo = Topology::uniform(1, 1).unwrap();
        assert!(matches!(measure_drift(None, &topo), Err(Error::UnavailableMetric(_))));
    }

    #[test]
    fn two_step_hand_expansion() {
        // one group, two clients, H = 2, γ = 0.1; after the first step the clients sit
        // at x̄ ∓ γ (first steps differ by 2γ): Q = (1/(1·2))·(1/2)·(0 + 0 + γ² + γ²) = γ²/2
        let gamma = 0.1;
        let topo = Topology::uniform(1, 2).unwrap();
        let snaps = RoundSnapshots {
            t: 0,
            group_models: vec![vec![v(1.0)]],
            client_iterates: vec![vec![vec![v(1.0), v(1.0 - gamma)], vec![v(1.0), v(1.0 + gamma)]]],
        };
        let r = measure_drift(Some(&snaps), &topo).unwrap();
        assert!((r.client_drift - gamma * gamma / 2.0).abs() < 1e-15);
        assert_eq!(r.group_drift, 0.0);
    }

    #[test]
    fn single_step_phase_has_no_client_drift() {
        // H = 1: only x_{i,0} = x̄_j enters the sum
        let topo = Topology::uniform(2, 1).unwrap();
        let snaps = RoundSnapshots {
            t: 3,
            group_models: vec![vec![v(0.0), v(2.0)]],
            client_iterates: vec![vec![vec![v(0.0)], vec![v(2.0)]]],
        };
        let r = measure_drift(Some(&snaps), &topo).unwrap();
        assert_eq!(r.client_drift, 0.0);
        // x̂ = 1, each group at distance 1
        assert_eq!(r.group_drift, 1.0);
        assert_eq!(r.t, 3);
    }
}
