//! MTGC on a regular `M`-level tree.
//!
//! Level 1 is the global server and level `M` aggregates clients directly. Every
//! depth-`m` node `(k_1, …, k_m)` owns a correction `ν_{k_1..k_m}` that is updated
//! whenever its parent aggregates, and every local step adds the corrections of
//! all ancestors on the leaf's path.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{MetricOptions, MetricRecorder, MetricTrace};
use crate::engine::{
    apply_displacement, group_aggregate, local_update, zero_sum_violation, Aborted, CorrectionInit, DrawIndex,
    Federation, ZRefresh,
};
use crate::error::{Error, Result};
use crate::param::{self, ParamVector};
use crate::task::{NoiseModel, NoiseSource, Task};
use crate::topology::MultiLevelTopology;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultilevelConfig {
    pub gamma: f64,
    /// Total local iterations `R`.
    pub iterations: usize,
    /// Initialization of the leaf corrections `ν_{k_1..k_M}`.
    pub z_init: CorrectionInit,
    /// Initialization of the corrections at levels `1..M−1`.
    pub y_init: CorrectionInit,
    /// Whether deeper corrections are re-initialized after a shallower level fires.
    pub refresh: ZRefresh,
    /// `false` runs the correction-free variant (all `ν` stay zero).
    pub corrections: bool,
    pub threads: usize,
}

impl MultilevelConfig {
    pub fn new(gamma: f64, iterations: usize) -> Self {
        Self {
            gamma,
            iterations,
            z_init: CorrectionInit::Zero,
            y_init: CorrectionInit::Zero,
            refresh: ZRefresh::Carry,
            corrections: true,
            threads: 1,
        }
    }

    pub fn without_corrections(mut self) -> Self {
        self.corrections = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be positive, got {}", self.gamma)));
        }
        if self.iterations == 0 || self.threads == 0 {
            return Err(Error::Config("iterations and threads must be at least 1".into()));
        }
        Ok(())
    }
}

/// One aggregation performed by a level-`level` aggregator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelEvent {
    pub r: usize,
    /// 1-based level; level 1 is the global server.
    pub level: usize,
    /// Zero-based path of the aggregating node (empty for the root).
    pub node_path: Vec<usize>,
}

pub const EVENT_CSV_HEADER: &str = "r,level,node_path";

pub fn events_to_csv(events: &[LevelEvent]) -> String {
    let mut out = String::from(EVENT_CSV_HEADER);
    out.push('\n');
    for ev in events {
        let path = if ev.node_path.is_empty() {
            "root".to_string()
        } else {
            ev.node_path.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(".")
        };
        let _ = writeln!(out, "{},{},{}", ev.r, ev.level, path);
    }
    out
}

pub fn write_events_csv(events: &[LevelEvent], path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, events_to_csv(events))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultilevelState {
    /// Leaf models in lexicographic path order.
    pub leaves: Vec<ParamVector>,
    /// `nu[m − 1][node]` is the correction of depth-`m` node `node`.
    pub nu: Vec<Vec<ParamVector>>,
    /// Next iteration to execute.
    pub r: usize,
    /// Latest sibling zero-sum violation per level.
    pub violations: Vec<f64>,
}

impl MultilevelState {
    pub fn zeros(topology: &MultiLevelTopology, x0: &ParamVector) -> Self {
        let d = x0.dim();
        Self {
            leaves: vec![x0.clone(); topology.n_leaves()],
            nu: (1..=topology.levels())
                .map(|m| vec![ParamVector::zeros(d); topology.nodes_at(m)])
                .collect(),
            r: 0,
            violations: vec![0.0; topology.levels()],
        }
    }

    /// Mean over the tree of the level-`M` models. Every depth-`(M−1)` block is
    /// represented by its first leaf, which is exact right after level `M` fires.
    pub fn virtual_global(&self, topology: &MultiLevelTopology) -> ParamVector {
        let m = topology.levels();
        let block = topology.block_size(m - 1);
        let mut layer: Vec<ParamVector> = self.leaves.iter().step_by(block).cloned().collect();
        for depth in (0..m - 1).rev() {
            layer = layer.chunks(topology.fanouts()[depth]).map(param::mean).collect();
        }
        layer.pop().expect("root")
    }
}

/// One local step `x ← x − γ(g + ν_{k_1..k_M} + … + ν_{k_1})`.
///
/// `path_corrections[m − 1]` is the level-`m` correction on the leaf's path; they
/// are added deepest first.
#[allow(clippy::too_many_arguments)]
pub fn multilevel_client_step(
    model: &mut ParamVector,
    path_corrections: &[&ParamVector],
    levels: usize,
    task: &Task,
    noise: &NoiseModel,
    gamma: f64,
    draw: DrawIndex,
    leaf: usize,
) -> Result<()> {
    if path_corrections.len() != levels {
        return Err(Error::InternalState(format!(
            "leaf {leaf} has {} of {levels} path corrections",
            path_corrections.len()
        )));
    }
    let deepest_first: Vec<&ParamVector> = path_corrections.iter().rev().copied().collect();
    local_update(model, &deepest_first, task, noise, gamma, draw, leaf)
}

/// Level-`level` aggregation at iteration `r`: subtree means, correction update of
/// the aggregated children, and dissemination to every leaf below.
pub fn level_aggregate_and_correct(
    topology: &MultiLevelTopology,
    level: usize,
    r: usize,
    state: &mut MultilevelState,
    gamma: f64,
    corrections: bool,
    events: Option<&mut Vec<LevelEvent>>,
) -> Result<()> {
    let m = topology.levels();
    if level == 0 || level > m {
        return Err(Error::InternalState(format!("no level {level} in a {m}-level tree")));
    }
    let period = topology.periods()[level - 1];
    if !(r + 1).is_multiple_of(period) {
        return Err(Error::Schedule { level, r, period });
    }
    let child_block = topology.block_size(level);
    let fanout = topology.fanouts()[level - 1];
    let parent_block = child_block * fanout;
    let parents = topology.nodes_at(level - 1);
    let mut worst = 0.0f64;
    let mut log = events;
    for p in 0..parents {
        let first_leaf = p * parent_block;
        // children below level M have just been aggregated, so their first leaf holds the child model
        let agg = group_aggregate((0..fanout).map(|c| &state.leaves[first_leaf + c * child_block]));
        if corrections {
            for c in 0..fanout {
                let child = p * fanout + c;
                let pre = &state.leaves[first_leaf + c * child_block];
                apply_displacement(&mut state.nu[level - 1][child], pre, &agg, period, gamma);
            }
            worst = worst.max(zero_sum_violation(&state.nu[level - 1][p * fanout..(p + 1) * fanout]));
        }
        for leaf in &mut state.leaves[first_leaf..first_leaf + parent_block] {
            leaf.clone_from(&agg);
        }
        if let Some(log) = log.as_deref_mut() {
            log.push(LevelEvent {
                r,
                level,
                node_path: topology.path_of(first_leaf, level - 1),
            });
        }
    }
    state.violations[level - 1] = worst;
    Ok(())
}

/// Result of a complete multilevel run.
#[derive(Debug, Clone)]
pub struct MultilevelOutput {
    pub state: MultilevelState,
    pub trace: MetricTrace,
    pub events: Vec<LevelEvent>,
}

/// Draw key of iteration `r`: `(r / P_1, (r mod P_1) / P_M, r mod P_M)`.
pub fn draw_index(topology: &MultiLevelTopology, r: usize) -> DrawIndex {
    let p1 = topology.periods()[0];
    let pm = *topology.periods().last().unwrap();
    DrawIndex::new(r / p1, (r % p1) / pm, r % pm)
}

struct Runner<'a> {
    topology: &'a MultiLevelTopology,
    federation: Federation,
    config: &'a MultilevelConfig,
    seed: u64,
    pool: Option<rayon::ThreadPool>,
}

impl Runner<'_> {
    fn draw_gradients(&self, state: &MultilevelState, draw: DrawIndex) -> Result<Vec<ParamVector>> {
        let fed = &self.federation;
        state
            .leaves
            .iter()
            .enumerate()
            .map(|(i, x)| fed.tasks[i].stochastic_gradient(x, &fed.noise_for(self.seed, i), draw))
            .collect()
    }

    /// Re-initializes corrections at levels `from..=M`.
    fn init_corrections(&self, state: &mut MultilevelState, from: usize, draw: DrawIndex) -> Result<()> {
        let m = self.topology.levels();
        let d = self.federation.dim();
        let init_of = |level: usize| {
            if !self.config.corrections {
                CorrectionInit::Zero
            } else if level == m {
                self.config.z_init
            } else {
                self.config.y_init
            }
        };
        let needs_grads = (from..=m).any(|l| init_of(l) == CorrectionInit::BatchGradient);
        // means[depth] holds the mean gradient of every depth-`depth` subtree
        let means = if needs_grads {
            let mut means = vec![self.draw_gradients(state, draw)?];
            for depth in (0..m).rev() {
                let next = means[0]
                    .chunks(self.topology.fanouts()[depth])
                    .map(param::mean)
                    .collect();
                means.insert(0, next);
            }
            Some(means)
        } else {
            None
        };
        for level in from..=m {
            let fanout = self.topology.fanouts()[level - 1];
            match (init_of(level), &means) {
                (CorrectionInit::BatchGradient, Some(means)) => {
                    for (node, nu) in state.nu[level - 1].iter_mut().enumerate() {
                        *nu = means[level - 1][node / fanout].sub(&means[level][node]);
                    }
                }
                _ => {
                    for nu in &mut state.nu[level - 1] {
                        *nu = ParamVector::zeros(d);
                    }
                }
            }
            state.violations[level - 1] = state.nu[level - 1]
                .chunks(fanout)
                .map(zero_sum_violation)
                .fold(0.0, f64::max);
        }
        Ok(())
    }

    fn local_steps(&self, state: &mut MultilevelState, r: usize) -> Result<()> {
        let topo = self.topology;
        let m = topo.levels();
        let fed = &self.federation;
        let draw = draw_index(topo, r);
        let gamma = self.config.gamma;
        let seed = self.seed;
        let nu = &state.nu;
        let work = |(i, model): (usize, &mut ParamVector)| -> Result<()> {
            let path: Vec<&ParamVector> = (1..=m).map(|l| &nu[l - 1][i / topo.block_size(l)]).collect();
            multilevel_client_step(model, &path, m, &fed.tasks[i], &fed.noise_for(seed, i), gamma, draw, i)
        };
        let results: Vec<Result<()>> = match &self.pool {
            Some(pool) => pool.install(|| state.leaves.par_iter_mut().enumerate().map(&work).collect()),
            None => state.leaves.iter_mut().enumerate().map(&work).collect(),
        };
        results.into_iter().collect()
    }

    fn record(&self, recorder: &mut MetricRecorder, state: &MultilevelState, t: usize, e: usize) -> Result<()> {
        let m = self.topology.levels();
        let x_hat = state.virtual_global(self.topology);
        let inner = state.violations[..m - 1].iter().copied().fold(0.0, f64::max);
        recorder.record_point(&self.federation, t, e, &x_hat, state.violations[m - 1], inner)
    }

    fn run(
        &self,
        state: &mut MultilevelState,
        recorder: &mut MetricRecorder,
        events: &mut Vec<LevelEvent>,
    ) -> Result<()> {
        let topo = self.topology;
        let m = topo.levels();
        let p1 = topo.periods()[0];
        let pm = topo.periods()[m - 1];
        self.init_corrections(state, 1, DrawIndex::new(0, 0, 0))?;
        self.record(recorder, state, 0, 0)?;
        for r in 0..self.config.iterations {
            self.local_steps(state, r)?;
            let mut shallowest = None;
            for level in (1..=m).rev() {
                if (r + 1) % topo.periods()[level - 1] != 0 {
                    break;
                }
                level_aggregate_and_correct(
                    topo,
                    level,
                    r,
                    state,
                    self.config.gamma,
                    self.config.corrections,
                    Some(events),
                )?;
                shallowest = Some(level);
            }
            state.r = r + 1;
            let Some(top) = shallowest else { continue };
            let t = (r + 1) / p1;
            let e = ((r + 1) % p1) / pm;
            self.record(recorder, state, t, e)?;
            if top < m && self.config.refresh == ZRefresh::PerRound && r + 1 < self.config.iterations {
                self.init_corrections(state, top + 1, draw_index(topo, r + 1))?;
            }
        }
        Ok(())
    }
}

/// Runs `R` iterations of the `M`-level algorithm from `x0`. Clients are the
/// leaves in lexicographic order; `tasks[i]` belongs to leaf `i`.
///
/// Metric rows are emitted whenever level `M` fires, labeled
/// `(t, e) = ((r+1)/P_1, ((r+1) mod P_1)/P_M)`, plus the initial `(0, 0)`.
pub fn run_multilevel(
    topology: &MultiLevelTopology,
    tasks: Vec<Task>,
    noise: NoiseSource,
    config: &MultilevelConfig,
    seed: u64,
    x0: &ParamVector,
    metrics: &MetricOptions,
) -> std::result::Result<MultilevelOutput, Aborted> {
    let abort = |error| Aborted {
        error,
        trace: MetricTrace::default(),
    };
    config.validate().map_err(abort)?;
    if tasks.len() != topology.n_leaves() {
        return Err(abort(Error::Config(format!(
            "{} tasks for {} leaves",
            tasks.len(),
            topology.n_leaves()
        ))));
    }
    let federation = Federation::new(topology.top_level_groups(), tasks, noise).map_err(abort)?;
    x0.check_dim(federation.dim()).map_err(abort)?;
    let mut recorder = MetricRecorder::new(&federation, metrics).map_err(abort)?;
    let pool = if config.threads > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(config.threads)
                .build()
                .map_err(|e| abort(Error::Config(format!("thread pool: {e}"))))?,
        )
    } else {
        None
    };
    let runner = Runner {
        topology,
        federation,
        config,
        seed,
        pool,
    };
    let mut state = MultilevelState::zeros(topology, x0);
    let mut events = Vec::new();
    match runner.run(&mut state, &mut recorder, &mut events) {
        Ok(()) => Ok(MultilevelOutput {
            state,
            trace: recorder.into_trace(),
            events,
        }),
        Err(error) => Err(Aborted {
            error,
            trace: recorder.into_trace(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::{DataShard, Example, TaskKind};

    fn scalar(center: f64, owner: usize) -> Task {
        let shard = DataShard::new(owner, vec![Example::new(vec![1.0], center)]).unwrap();
        Task::full_batch(TaskKind::Quadratic, shard).unwrap()
    }

    fn v(x: f64) -> ParamVector {
        ParamVector::from_vec(vec![x])
    }

    #[test]
    fn zero_corrections_are_plain_sgd() {
        let task = scalar(0.0, 0);
        let noise = NoiseModel::seeded(NoiseSource::Minibatch, 0, 0);
        let z = v(0.0);
        let mut x = v(1.0);
        multilevel_client_step(&mut x, &[&z, &z, &z], 3, &task, &noise, 0.1, DrawIndex::new(0, 0, 0), 0).unwrap();
        assert_eq!(x[0], 0.9);
        let mut x = v(1.0);
        multilevel_client_step(
            &mut x,
            &[&v(3.0), &v(-2.0)],
            2,
            &task,
            &noise,
            0.0,
            DrawIndex::new(0, 0, 0),
            0,
        )
        .unwrap();
        assert_eq!(x[0], 1.0);
    }

    #[test]
    fn missing_path_correction_is_an_error() {
        let task = scalar(0.0, 0);
        let noise = NoiseModel::seeded(NoiseSource::Minibatch, 0, 0);
        let mut x = v(1.0);
        let err = multilevel_client_step(&mut x, &[&v(0.0)], 2, &task, &noise, 0.1, DrawIndex::new(0, 0, 0), 0);
        assert!(matches!(err, Err(Error::InternalState(_))));
    }

    #[test]
    fn off_schedule_aggregation_is_rejected() {
        let topo = MultiLevelTopology::new(vec![2, 2], vec![4, 2]).unwrap();
        let mut state = MultilevelState::zeros(&topo, &v(0.0));
        let err = level_aggregate_and_correct(&topo, 1, 2, &mut state, 0.1, true, None);
        assert!(matches!(
            err,
            Err(Error::Schedule {
                level: 1,
                r: 2,
                period: 4
            })
        ));
        assert!(level_aggregate_and_correct(&topo, 2, 1, &mut state, 0.1, true, None).is_ok());
    }

    #[test]
    fn single_child_aggregation_is_identity() {
        let topo = MultiLevelTopology::new(vec![1, 1], vec![4, 2]).unwrap();
        let tasks = vec![scalar(3.0, 0)];
        let cfg = MultilevelConfig::new(0.1, 8);
        let out = run_multilevel(
            &topo,
            tasks,
            NoiseSource::Minibatch,
            &cfg,
            0,
            &v(0.0),
            &MetricOptions::default(),
        )
        .unwrap();
        assert!(out.state.nu.iter().flatten().all(|nu| nu[0] == 0.0));
        let mut x = 0.0;
        for _ in 0..8 {
            x -= 0.1 * (x - 3.0);
        }
        assert_eq!(out.state.leaves[0][0], x);
    }

    #[test]
    fn hand_schedule_three_levels() {
        let topo = MultiLevelTopology::new(vec![2, 2, 2], vec![8, 4, 2]).unwrap();
        let tasks = (0..8).map(|i| scalar(i as f64, i)).collect();
        let cfg = MultilevelConfig::new(0.05, 16);
        let out = run_multilevel(
            &topo,
            tasks,
            NoiseSource::Minibatch,
            &cfg,
            0,
            &v(0.0),
            &MetricOptions::default(),
        )
        .unwrap();
        let mut fired: Vec<(usize, usize)> = out.events.iter().map(|e| (e.r, e.level)).collect();
        fired.dedup();
        let mut expected = Vec::new();
        for r in 0..16 {
            for level in [3, 2, 1] {
                if (r + 1) % [8, 4, 2][level - 1] == 0 {
                    expected.push((r, level));
                } else {
                    break;
                }
            }
        }
        assert_eq!(fired, expected);
        assert_eq!(fired[..3], [(1, 3), (3, 3), (3, 2)]);
        // four level-3 aggregators per firing
        assert_eq!(out.events.iter().filter(|e| e.r == 1).count(), 4);
        let csv = events_to_csv(&out.events);
        assert!(csv.starts_with("r,level,node_path\n1,3,0.0\n1,3,0.1\n"));
        assert!(csv.contains("7,1,root"));
    }

    #[test]
    fn homogeneous_tree_is_gradient_descent() {
        let topo = MultiLevelTopology::new(vec![2, 3, 2], vec![12, 6, 3]).unwrap();
        let tasks = (0..12).map(|i| scalar(2.0, i)).collect();
        let cfg = MultilevelConfig::new(0.1, 24);
        let out = run_multilevel(
            &topo,
            tasks,
            NoiseSource::Minibatch,
            &cfg,
            0,
            &v(0.0),
            &MetricOptions::default(),
        )
        .unwrap();
        let mut x = 0.0;
        for _ in 0..24 {
            x -= 0.1 * (x - 2.0);
        }
        for leaf in &out.state.leaves {
            assert!((leaf[0] - x).abs() < 1e-14);
        }
    }

    #[test]
    fn siblings_stay_zero_sum() {
        let topo = MultiLevelTopology::new(vec![2, 2, 2], vec![8, 4, 2]).unwrap();
        let tasks = (0..8).map(|i| scalar((i * i) as f64 - 10.0, i)).collect();
        let cfg = MultilevelConfig::new(0.05, 40);
        let out = run_multilevel(
            &topo,
            tasks,
            NoiseSource::Minibatch,
            &cfg,
            0,
            &v(0.0),
            &MetricOptions::default(),
        )
        .unwrap();
        for level in &out.state.nu {
            for sibs in level.chunks(2) {
                assert!(zero_sum_violation(sibs) < 1e-9);
            }
        }
        assert!(out
            .trace
            .records
            .iter()
            .all(|r| r.z_sum_violation < 1e-9 && r.y_sum_violation < 1e-9));
    }
}
