//! Synthetic heterogeneous quadratic testbed.
//!
//! Client `i` in group `j` gets
//! `F_i(x) = ½ Σ_k c_{i,k} (q_kᵀ(x − x*_i))²` with
//! `x*_i = x*_base + group_shift·u_j + client_shift·v_i`,
//! where `Q = [q_k]` is a seeded rotation shared by all clients, `u_j`, `v_i` are
//! seeded unit directions drawn in antithetic pairs (`u_{2k+1} = −u_{2k}`, likewise
//! for clients within a group), and `c_{i,k} = 1 + spread·U(−1, 1)`.
//! With `spread = 0` all clients share one Hessian.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::ParamVector;
use crate::rng::aux_rng;
use crate::task::{DataShard, Example, Task, TaskKind};
use crate::topology::{MultiLevelTopology, Topology};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthQuadratic {
    pub dim: usize,
    pub group_shift: f64,
    pub client_shift: f64,
    /// Half-width of the per-client curvature band around 1.
    pub curvature_spread: f64,
    /// Norm of the shared base optimum.
    pub base_norm: f64,
    /// Rows sampled per stochastic gradient; `dim` or more means full batch.
    pub minibatch_size: usize,
    pub seed: u64,
}

impl SynthQuadratic {
    pub fn new(dim: usize, group_shift: f64, client_shift: f64, seed: u64) -> Self {
        Self {
            dim,
            group_shift,
            client_shift,
            curvature_spread: 0.0,
            base_norm: 1.0,
            minibatch_size: dim,
            seed,
        }
    }

    pub fn with_spread(mut self, spread: f64) -> Self {
        self.curvature_spread = spread;
        self
    }

    pub fn with_base_norm(mut self, norm: f64) -> Self {
        self.base_norm = norm;
        self
    }

    pub fn with_minibatch(mut self, b: usize) -> Self {
        self.minibatch_size = b;
        self
    }
}

#[derive(Debug, Clone)]
pub struct SynthInstance {
    pub tasks: Vec<Task>,
    pub client_optima: Vec<ParamVector>,
    pub base_optimum: ParamVector,
}

fn unit_direction(rng: &mut ChaCha8Rng, dim: usize) -> ParamVector {
    loop {
        let v = ParamVector::from_vec((0..dim).map(|_| rng.sample(StandardNormal)).collect());
        let n = v.norm();
        if n > 1e-8 {
            let mut v = v;
            v.scale(1.0 / n);
            return v;
        }
    }
}

fn antithetic(rng: &mut ChaCha8Rng, dim: usize, count: usize) -> Vec<ParamVector> {
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let v = unit_direction(rng, dim);
        let mut neg = v.clone();
        neg.scale(-1.0);
        out.push(v);
        if out.len() < count {
            out.push(neg);
        }
    }
    out
}

fn rotation(rng: &mut ChaCha8Rng, dim: usize) -> DMatrix<f64> {
    let g = DMatrix::<f64>::from_fn(dim, dim, |_, _| rng.sample(StandardNormal));
    g.qr().q()
}

pub fn synth_heterogeneous_quadratics(topology: &Topology, spec: &SynthQuadratic) -> Result<SynthInstance> {
    let n = topology.n_clients();
    let levels = [
        ShiftLevel {
            shift: spec.group_shift,
            node_of: (0..n).map(|i| topology.group_of(i)).collect(),
            siblings: vec![(0..topology.n_groups()).collect()],
        },
        ShiftLevel {
            shift: spec.client_shift,
            node_of: (0..n).collect(),
            siblings: topology.groups().to_vec(),
        },
    ];
    build(n, &levels, spec)
}

/// Tree version: leaf `i` gets `x*_i = x*_base + Σ_m shift_m·u_{m, node_m(i)}` with
/// antithetic directions among siblings at every level. `spec`'s two shift fields
/// are ignored in favor of `level_shifts` (level 1 first).
pub fn synth_tree_quadratics(
    topology: &MultiLevelTopology,
    level_shifts: &[f64],
    spec: &SynthQuadratic,
) -> Result<SynthInstance> {
    if level_shifts.len() != topology.levels() {
        return Err(Error::Config(format!(
            "{} level shifts for {} levels",
            level_shifts.len(),
            topology.levels()
        )));
    }
    let n = topology.n_leaves();
    let levels: Vec<ShiftLevel> = level_shifts
        .iter()
        .enumerate()
        .map(|(m, &shift)| {
            let depth = m + 1;
            let block = topology.block_size(depth);
            let fanout = topology.fanouts()[m];
            ShiftLevel {
                shift,
                node_of: (0..n).map(|i| i / block).collect(),
                siblings: (0..topology.nodes_at(m))
                    .map(|p| (p * fanout..(p + 1) * fanout).collect())
                    .collect(),
            }
        })
        .collect();
    build(n, &levels, spec)
}

struct ShiftLevel {
    shift: f64,
    /// Node of every leaf at this level.
    node_of: Vec<usize>,
    /// Sibling sets of nodes; each set gets one antithetic draw.
    siblings: Vec<Vec<usize>>,
}

fn build(n_leaves: usize, levels: &[ShiftLevel], spec: &SynthQuadratic) -> Result<SynthInstance> {
    if spec.dim == 0 {
        return Err(Error::Config("synthetic dimension must be at least 1".into()));
    }
    if spec.minibatch_size == 0 {
        return Err(Error::Config("minibatch size must be positive".into()));
    }
    if !(0.0..1.0).contains(&spec.curvature_spread) {
        return Err(Error::Config("curvature spread must lie in [0, 1)".into()));
    }
    let d = spec.dim;
    let mut rng = aux_rng(spec.seed, 0x5A17);
    let q = rotation(&mut rng, d);
    let mut base = unit_direction(&mut rng, d);
    base.scale(spec.base_norm);
    let mut dirs: Vec<Vec<ParamVector>> = Vec::with_capacity(levels.len());
    for level in levels {
        let count = level.siblings.iter().map(|s| s.len()).sum::<usize>();
        let mut level_dirs = vec![ParamVector::zeros(d); count];
        for set in &level.siblings {
            for (&node, v) in set.iter().zip(antithetic(&mut rng, d, set.len())) {
                level_dirs[node] = v;
            }
        }
        dirs.push(level_dirs);
    }
    let mut tasks = Vec::with_capacity(n_leaves);
    let mut optima = Vec::with_capacity(n_leaves);
    for i in 0..n_leaves {
        let mut opt = base.clone();
        for (level, level_dirs) in levels.iter().zip(&dirs) {
            opt.axpy(level.shift, &level_dirs[level.node_of[i]]);
        }
        let rows = (0..d)
            .map(|k| {
                let c = 1.0 + spec.curvature_spread * rng.random_range(-1.0..1.0);
                let a: Vec<f64> = (0..d).map(|col| c.sqrt() * q[(k, col)]).collect();
                let b = a.iter().zip(opt.as_slice()).map(|(x, y)| x * y).sum();
                Example::new(a, b)
            })
            .collect();
        let shard = DataShard::new(i, rows)?;
        tasks.push(Task::new(TaskKind::Quadratic, shard, spec.minibatch_size)?);
        optima.push(opt);
    }
    Ok(SynthInstance {
        tasks,
        client_optima: optima,
        base_optimum: base,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::closed_form_optimum;

    #[test]
    fn client_optimum_is_stationary() {
        let topo = Topology::uniform(2, 3).unwrap();
        let inst =
            synth_heterogeneous_quadratics(&topo, &SynthQuadratic::new(4, 1.0, 0.5, 9).with_spread(0.3)).unwrap();
        for (t, opt) in inst.tasks.iter().zip(&inst.client_optima) {
            assert!(t.full_gradient(opt).unwrap().norm() < 1e-12);
        }
    }

    #[test]
    fn one_dimensional_group_optima() {
        let topo = Topology::uniform(2, 2).unwrap();
        let inst = synth_heterogeneous_quadratics(&topo, &SynthQuadratic::new(1, 1.0, 0.0, 4)).unwrap();
        let base = inst.base_optimum[0];
        let mut offsets = Vec::new();
        for j in 0..2 {
            let members = topo.group(j);
            let tasks: Vec<Task> = members.iter().map(|&i| inst.tasks[i].clone()).collect();
            let w = vec![1.0 / members.len() as f64; members.len()];
            let opt = closed_form_optimum(&tasks, &w).unwrap();
            offsets.push(opt[0] - base);
        }
        offsets.sort_by(f64::total_cmp);
        assert!(
            (offsets[0] + 1.0).abs() < 1e-12 && (offsets[1] - 1.0).abs() < 1e-12,
            "{offsets:?}"
        );
    }

    #[test]
    fn homogeneous_limit_shares_optimum() {
        let topo = Topology::uniform(3, 2).unwrap();
        let inst =
            synth_heterogeneous_quadratics(&topo, &SynthQuadratic::new(3, 0.0, 0.0, 1).with_spread(0.2)).unwrap();
        assert!(inst.client_optima.iter().all(|o| o == &inst.base_optimum));
    }

    #[test]
    fn tree_matches_two_level_for_two_levels() {
        let spec = SynthQuadratic::new(3, 0.7, 0.4, 11).with_spread(0.1);
        let flat = synth_heterogeneous_quadratics(&Topology::uniform(2, 3).unwrap(), &spec).unwrap();
        let tree = MultiLevelTopology::new(vec![2, 3], vec![4, 2]).unwrap();
        let deep = synth_tree_quadratics(&tree, &[0.7, 0.4], &spec).unwrap();
        assert_eq!(flat.client_optima, deep.client_optima);
        assert_eq!(flat.tasks, deep.tasks);
    }

    #[test]
    fn tree_siblings_are_antithetic() {
        let tree = MultiLevelTopology::new(vec![2, 2, 2], vec![8, 4, 2]).unwrap();
        let spec = SynthQuadratic::new(2, 0.0, 0.0, 5);
        let inst = synth_tree_quadratics(&tree, &[1.0, 2.0, 3.0], &spec).unwrap();
        // shifts cancel pairwise, so the leaf optima average to the base
        let mean = crate::param::mean(&inst.client_optima);
        assert!(mean.max_abs_diff(&inst.base_optimum) < 1e-12);
        assert!(synth_tree_quadratics(&tree, &[1.0], &spec).is_err());
    }
}
