//! Flat-topology control-variate reference, coded independently of the engine.

use crate::engine::{CorrectionInit, DrawIndex, Federation, TrainConfig};
use crate::error::{Error, Result};
use crate::param::ParamVector;

#[derive(Debug, Clone, PartialEq)]
pub struct ScaffoldTrajectory {
    /// Server model at the start of every round, plus the final model (`T + 1` entries).
    pub global_models: Vec<ParamVector>,
    /// `‖Σ_i (c_i − c)‖` after every round.
    pub control_balance: Vec<f64>,
    /// Client control variates `c_i` after the last round.
    pub client_controls: Vec<ParamVector>,
    /// Server control variate `c` after the last round.
    pub server_control: ParamVector,
}

/// Runs the control-variate method on a single-group federation with local steps
/// `x ← x − γ(g_i − c_i + c)` and refresh
/// `c_i ← c_i − c + (x̄ − x_{i,H})/(Hγ)`, `c ← mean(c_i)`.
///
/// Gradient draws use the engine's keys `(t, 0, h)`, so a shared seed gives shared noise.
pub fn scaffold_reference(
    federation: &Federation,
    config: &TrainConfig,
    seed: u64,
    x0: &ParamVector,
) -> Result<ScaffoldTrajectory> {
    if federation.topology.n_groups() != 1 {
        return Err(Error::Config(format!(
            "reference needs a single group, got {}",
            federation.topology.n_groups()
        )));
    }
    if config.group_rounds != 1 {
        return Err(Error::Config("reference needs E = 1".into()));
    }
    config.validate()?;
    x0.check_dim(federation.dim())?;

    let n = federation.tasks.len();
    let d = x0.dim();
    let h_steps = config.local_steps;
    let gamma = config.gamma;

    let mut c_i = vec![ParamVector::zeros(d); n];
    if config.z_init == CorrectionInit::BatchGradient {
        for (i, task) in federation.tasks.iter().enumerate() {
            c_i[i] = task.stochastic_gradient(x0, &federation.noise_for(seed, i), DrawIndex::new(0, 0, 0))?;
        }
    }
    let mut c = average(&c_i, d);

    let mut x = x0.clone();
    let mut global_models = vec![x.clone()];
    let mut control_balance = Vec::with_capacity(config.rounds);
    for t in 0..config.rounds {
        let mut finals = Vec::with_capacity(n);
        for (i, task) in federation.tasks.iter().enumerate() {
            let noise = federation.noise_for(seed, i);
            let mut xi = x.clone();
            for h in 0..h_steps {
                let g = task.stochastic_gradient(&xi, &noise, DrawIndex::new(t, 0, h))?;
                for k in 0..d {
                    xi[k] -= gamma * (g[k] - c_i[i][k] + c[k]);
                }
                if !xi.is_finite() {
                    return Err(Error::Diverged {
                        at: DrawIndex::new(t, 0, h),
                        client: i,
                    });
                }
            }
            finals.push(xi);
        }
        let scale = h_steps as f64 * gamma;
        for i in 0..n {
            for k in 0..d {
                c_i[i][k] = c_i[i][k] - c[k] + (x[k] - finals[i][k]) / scale;
            }
        }
        c = average(&c_i, d);
        x = average(&finals, d);

        let mut balance = ParamVector::zeros(d);
        for ci in &c_i {
            for k in 0..d {
                balance[k] += ci[k] - c[k];
            }
        }
        control_balance.push(balance.norm());
        global_models.push(x.clone());
    }
    Ok(ScaffoldTrajectory {
        global_models,
        control_balance,
        client_controls: c_i,
        server_control: c,
    })
}

fn average(items: &[ParamVector], d: usize) -> ParamVector {
    let mut out = ParamVector::zeros(d);
    for v in items {
        for k in 0..d {
            out[k] += v[k];
        }
    }
    for k in 0..d {
        out[k] /= items.len() as f64;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::{DataShard, Example, NoiseSource, Task, TaskKind};
    use crate::topology::Topology;

    fn scalar(center: f64, owner: usize) -> Task {
        let shard = DataShard::new(owner, vec![Example::new(vec![1.0], center)]).unwrap();
        Task::full_batch(TaskKind::Quadratic, shard).unwrap()
    }

    fn fed(centers: &[f64], groups: usize) -> Federation {
        let n = centers.len();
        let topo = Topology::uniform(groups, n / groups).unwrap();
        let tasks = centers.iter().enumerate().map(|(i, &b)| scalar(b, i)).collect();
        Federation::new(topo, tasks, NoiseSource::Minibatch).unwrap()
    }

    #[test]
    fn homogeneous_h1_is_averaged_gd() {
        let f = fed(&[2.0, 2.0, 2.0], 1);
        let cfg = TrainConfig::new(0.5, 4, 1, 1);
        let tr = scaffold_reference(&f, &cfg, 1, &ParamVector::zeros(1)).unwrap();
        let mut x = 0.0;
        for t in 0..=4 {
            assert_eq!(tr.global_models[t][0], x);
            x -= 0.5 * (x - 2.0);
        }
        for (ci, _) in tr.client_controls.iter().zip(0..) {
            assert_eq!(ci[0] - tr.server_control[0], 0.0);
        }
    }

    #[test]
    fn hand_unrolled_two_clients() {
        // F_1 = ½(x+1)², F_2 = ½(x−1)², γ = 0.25, H = 2
        let f = fed(&[-1.0, 1.0], 1);
        let cfg = TrainConfig::new(0.25, 3, 1, 2);
        let tr = scaffold_reference(&f, &cfg, 0, &ParamVector::from_vec(vec![1.0])).unwrap();

        let (gamma, h) = (0.25, 2);
        let b = [-1.0, 1.0];
        let mut x = 1.0f64;
        let mut ci = [0.0f64; 2];
        let mut c = 0.0f64;
        for t in 0..3 {
            assert!((tr.global_models[t][0] - x).abs() < 1e-15);
            let mut fin = [0.0; 2];
            for i in 0..2 {
                let mut xi = x;
                for _ in 0..h {
                    xi -= gamma * ((xi - b[i]) - ci[i] + c);
                }
                fin[i] = xi;
            }
            for i in 0..2 {
                ci[i] = ci[i] - c + (x - fin[i]) / (h as f64 * gamma);
            }
            c = (ci[0] + ci[1]) / 2.0;
            x = (fin[0] + fin[1]) / 2.0;
        }
        assert!((tr.global_models[3][0] - x).abs() < 1e-15);
        // after round 1 the controls carry the exact client gradients' offsets
        assert!(tr.global_models[3][0].abs() < 0.2);
    }

    #[test]
    fn controls_balance_every_round() {
        let f = fed(&[-3.0, 0.5, 4.0, 1.0], 1);
        let cfg = TrainConfig::new(0.1, 20, 1, 5);
        let tr = scaffold_reference(&f, &cfg, 3, &ParamVector::zeros(1)).unwrap();
        assert_eq!(tr.control_balance.len(), 20);
        assert!(tr.control_balance.iter().all(|&b| b < 1e-12));
    }

    #[test]
    fn rejects_multiple_groups() {
        let f = fed(&[0.0, 1.0], 2);
        let cfg = TrainConfig::new(0.1, 1, 1, 1);
        assert!(matches!(
            scaffold_reference(&f, &cfg, 0, &ParamVector::zeros(1)),
            Err(Error::Config(_))
        ));
    }
}
