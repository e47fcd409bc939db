use rayon::prelude::*;

use super::ops::{apply_displacement, group_aggregate, local_update, zero_sum_violation};
use super::{
    ClientState, CorrectionInit, DrawIndex, Federation, GlobalState, GroupState, RunState, TrainConfig, ZRefresh,
};
use crate::analysis::{MetricOptions, MetricRecorder, MetricTrace};
use crate::error::{Error, Result};
use crate::param::{self, ParamVector};

/// Per-iteration models of one global round, retained only when requested.
#[derive(Debug, Clone, Default)]
pub struct RoundSnapshots {
    pub t: usize,
    /// `group_models[e][j] = x̄_j^{t,e}`
    pub group_models: Vec<Vec<ParamVector>>,
    /// `client_iterates[e][i][h] = x_{i,h}^{t,e}` for `h = 0..H`
    pub client_iterates: Vec<Vec<Vec<ParamVector>>>,
}

/// Read-only view handed to observers at aggregation boundaries.
pub struct RoundView<'a> {
    /// `(t, e)` label of the state being shown: group models hold `x̄_j^{t,e}`.
    pub t: usize,
    pub e: usize,
    pub state: &'a RunState,
    pub federation: &'a Federation,
    pub config: &'a TrainConfig,
    /// Present on global-round views when snapshot recording is on.
    pub snapshots: Option<&'a RoundSnapshots>,
}

pub trait RunObserver {
    /// Called once before the first step of a fresh run, labeled `(0, 0)`.
    fn on_start(&mut self, _view: &RoundView<'_>) -> Result<()> {
        Ok(())
    }

    /// After a group aggregation inside a global round, labeled `(t, e)` with `1 ≤ e < E`.
    fn on_group_round(&mut self, _view: &RoundView<'_>) -> Result<()> {
        Ok(())
    }

    /// After the global aggregation closing round `t`, labeled `(t + 1, 0)`.
    fn on_global_round(&mut self, _view: &RoundView<'_>) -> Result<()> {
        Ok(())
    }
}

pub struct Engine<'a> {
    federation: &'a Federation,
    config: &'a TrainConfig,
    seed: u64,
    pool: Option<rayon::ThreadPool>,
    record_snapshots: bool,
}

impl<'a> Engine<'a> {
    pub fn new(federation: &'a Federation, config: &'a TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let pool = if config.threads > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(config.threads)
                    .build()
                    .map_err(|e| Error::Config(format!("thread pool: {e}")))?,
            )
        } else {
            None
        };
        Ok(Self {
            federation,
            config,
            seed,
            pool,
            record_snapshots: false,
        })
    }

    pub fn with_snapshots(mut self, on: bool) -> Self {
        self.record_snapshots = on;
        self
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Every client, group and the server start at `x0`; corrections follow the
    /// configured initialization (zero when the mode disables them).
    pub fn init_run(&self, x0: &ParamVector) -> Result<RunState> {
        let fed = self.federation;
        if fed.tasks.len() != fed.topology.n_clients() {
            return Err(Error::Config("a task is required for every client".into()));
        }
        x0.check_dim(fed.dim())?;
        let d = x0.dim();
        let clients = (0..fed.topology.n_clients())
            .map(|_| ClientState {
                model: x0.clone(),
                correction: ParamVector::zeros(d),
                phase_start: x0.clone(),
            })
            .collect();
        let groups = (0..fed.topology.n_groups())
            .map(|_| GroupState {
                model: x0.clone(),
                correction: ParamVector::zeros(d),
            })
            .collect();
        let mut state = RunState {
            clients,
            groups,
            global: GlobalState {
                model: x0.clone(),
                clock: DrawIndex::new(0, 0, 0),
            },
            z_violation: 0.0,
            y_violation: 0.0,
        };
        self.init_client_corrections(&mut state, 0)?;
        if self.config.mode.uses_group() && self.config.y_init == CorrectionInit::BatchGradient {
            let grads = self.draw_gradients(&state, 0)?;
            let group_means: Vec<ParamVector> = (0..fed.topology.n_groups())
                .map(|j| param::mean(fed.topology.group(j).iter().map(|&i| &grads[i])))
                .collect();
            let global_mean = param::mean(&group_means);
            for (g, mean_j) in state.groups.iter_mut().zip(&group_means) {
                g.correction = global_mean.sub(mean_j);
            }
            state.y_violation = zero_sum_violation(state.groups.iter().map(|g| &g.correction));
        }
        Ok(state)
    }

    fn draw_gradients(&self, state: &RunState, t: usize) -> Result<Vec<ParamVector>> {
        let fed = self.federation;
        state
            .clients
            .iter()
            .enumerate()
            .map(|(i, c)| {
                fed.tasks[i].stochastic_gradient(&c.model, &fed.noise_for(self.seed, i), DrawIndex::new(t, 0, 0))
            })
            .collect()
    }

    fn init_client_corrections(&self, state: &mut RunState, t: usize) -> Result<()> {
        let fed = self.federation;
        let d = fed.dim();
        if !self.config.mode.uses_client() || self.config.z_init == CorrectionInit::Zero {
            for c in &mut state.clients {
                c.correction = ParamVector::zeros(d);
            }
            state.z_violation = 0.0;
            return Ok(());
        }
        let grads = self.draw_gradients(state, t)?;
        let mut worst = 0.0f64;
        for members in fed.topology.groups() {
            let mean = param::mean(members.iter().map(|&i| &grads[i]));
            for &i in members {
                state.clients[i].correction = mean.sub(&grads[i]);
            }
            worst = worst.max(zero_sum_violation(
                members.iter().map(|&i| &state.clients[i].correction),
            ));
        }
        state.z_violation = worst;
        Ok(())
    }

    fn view<'s>(
        &'s self,
        state: &'s RunState,
        t: usize,
        e: usize,
        snapshots: Option<&'s RoundSnapshots>,
    ) -> RoundView<'s> {
        RoundView {
            t,
            e,
            state,
            federation: self.federation,
            config: self.config,
            snapshots,
        }
    }

    /// Runs from the state's clock to `T`, notifying observers at every boundary.
    /// After an error the state is partially advanced and should be discarded.
    pub fn run_training(&self, state: &mut RunState, observers: &mut [&mut dyn RunObserver]) -> Result<()> {
        if state.global.clock.e != 0 || state.global.clock.h != 0 {
            return Err(Error::InternalState(
                "runs resume only at global-round boundaries".into(),
            ));
        }
        if state.global.clock.t == 0 {
            let view = self.view(state, 0, 0, None);
            for o in observers.iter_mut() {
                o.on_start(&view)?;
            }
        }
        while state.global.clock.t < self.config.rounds {
            self.run_global_round(state, observers)?;
        }
        Ok(())
    }

    /// Executes one global round: `E` × (local phase, group aggregation, z update),
    /// then global aggregation and y update.
    pub fn run_global_round(&self, state: &mut RunState, observers: &mut [&mut dyn RunObserver]) -> Result<()> {
        let cfg = self.config;
        let fed = self.federation;
        let t = state.global.clock.t;
        if t > 0 && cfg.z_refresh == ZRefresh::PerRound {
            self.init_client_corrections(state, t)?;
        }
        let mut snaps = self.record_snapshots.then(|| RoundSnapshots {
            t,
            ..Default::default()
        });
        for e in 0..cfg.group_rounds {
            state.global.clock = DrawIndex::new(t, e, 0);
            let iterates = self.run_local_phase(state, t, e)?;
            if let Some(s) = snaps.as_mut() {
                s.group_models
                    .push(state.groups.iter().map(|g| g.model.clone()).collect());
                s.client_iterates.push(iterates);
            }
            self.aggregate_groups(state);
            if e + 1 < cfg.group_rounds {
                let view = self.view(state, t, e + 1, None);
                for o in observers.iter_mut() {
                    o.on_group_round(&view)?;
                }
            }
        }
        self.aggregate_global(state);
        state.global.clock = DrawIndex::new(t + 1, 0, 0);
        let view = self.view(state, t + 1, 0, snaps.as_ref());
        for o in observers.iter_mut() {
            o.on_global_round(&view)?;
        }
        debug_assert_eq!(state.clients.len(), fed.topology.n_clients());
        Ok(())
    }

    /// `H` corrected local steps on every client; returns the pre-step iterates
    /// when snapshots are on.
    fn run_local_phase(&self, state: &mut RunState, t: usize, e: usize) -> Result<Vec<Vec<ParamVector>>> {
        let cfg = self.config;
        let fed = self.federation;
        let record = self.record_snapshots;
        let groups = &state.groups;
        let seed = self.seed;
        let work = |(i, client): (usize, &mut ClientState)| -> Result<Vec<ParamVector>> {
            let ClientState { model, correction, .. } = client;
            let y = &groups[fed.topology.group_of(i)].correction;
            let mut corrections: Vec<&ParamVector> = Vec::with_capacity(2);
            if cfg.mode.uses_client() {
                corrections.push(correction);
            }
            if cfg.mode.uses_group() {
                corrections.push(y);
            }
            let noise = fed.noise_for(seed, i);
            let mut iterates = Vec::new();
            for h in 0..cfg.local_steps {
                if record {
                    iterates.push(model.clone());
                }
                local_update(
                    model,
                    &corrections,
                    &fed.tasks[i],
                    &noise,
                    cfg.gamma,
                    DrawIndex::new(t, e, h),
                    i,
                )?;
            }
            Ok(iterates)
        };
        let results: Vec<Result<Vec<ParamVector>>> = match &self.pool {
            Some(pool) => pool.install(|| state.clients.par_iter_mut().enumerate().map(&work).collect()),
            None => state.clients.iter_mut().enumerate().map(&work).collect(),
        };
        results.into_iter().collect()
    }

    fn aggregate_groups(&self, state: &mut RunState) {
        let cfg = self.config;
        let mut worst = 0.0f64;
        for (j, members) in self.federation.topology.groups().iter().enumerate() {
            let agg = group_aggregate(members.iter().map(|&i| &state.clients[i].model));
            for &i in members {
                let c = &mut state.clients[i];
                if cfg.mode.uses_client() {
                    apply_displacement(&mut c.correction, &c.model, &agg, cfg.local_steps, cfg.gamma);
                }
                c.model = agg.clone();
                c.phase_start = agg.clone();
            }
            if cfg.mode.uses_client() {
                worst = worst.max(zero_sum_violation(
                    members.iter().map(|&i| &state.clients[i].correction),
                ));
            }
            state.groups[j].model = agg;
        }
        state.z_violation = worst;
    }

    fn aggregate_global(&self, state: &mut RunState) {
        let cfg = self.config;
        let global = group_aggregate(state.groups.iter().map(|g| &g.model));
        let period = cfg.local_steps * cfg.group_rounds;
        for g in &mut state.groups {
            if cfg.mode.uses_group() {
                apply_displacement(&mut g.correction, &g.model, &global, period, cfg.gamma);
            }
            g.model = global.clone();
        }
        if cfg.mode.uses_group() {
            state.y_violation = zero_sum_violation(state.groups.iter().map(|g| &g.correction));
        }
        for c in &mut state.clients {
            c.model = global.clone();
            c.phase_start = global.clone();
        }
        state.global.model = global;
    }
}

pub struct RunOutput {
    pub state: RunState,
    pub trace: MetricTrace,
}

/// A run that stopped early; `trace` holds everything recorded before the failure.
#[derive(Debug)]
pub struct Aborted {
    pub error: Error,
    pub trace: MetricTrace,
}

impl std::fmt::Display for Aborted {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "run aborted after {} records: {}",
            self.trace.records.len(),
            self.error
        )
    }
}

impl std::error::Error for Aborted {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// Full two-level run from `x0` with the standard metric recorder attached.
pub fn train(
    federation: &Federation,
    config: &TrainConfig,
    seed: u64,
    x0: &ParamVector,
    metrics: &MetricOptions,
) -> std::result::Result<RunOutput, Aborted> {
    let mut recorder = match MetricRecorder::new(federation, metrics) {
        Ok(r) => r,
        Err(error) => {
            return Err(Aborted {
                error,
                trace: MetricTrace::default(),
            })
        }
    };
    let result = Engine::new(federation, config, seed).and_then(|engine| {
        let engine = engine.with_snapshots(metrics.drift);
        let mut state = engine.init_run(x0)?;
        engine.run_training(&mut state, &mut [&mut recorder])?;
        Ok(state)
    });
    match result {
        Ok(state) => Ok(RunOutput {
            state,
            trace: recorder.into_trace(),
        }),
        Err(error) => Err(Aborted {
            error,
            trace: recorder.into_trace(),
        }),
    }
}
