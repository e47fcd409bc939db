//! Two-level training loop with client-group and group-global gradient corrections.

mod checkpoint;
mod ops;
mod run;
mod state;

use serde::{Deserialize, Serialize};

pub use checkpoint::Checkpoint;
pub use ops::{apply_displacement, group_aggregate, local_update, zero_sum_violation, DIVERGENCE_NORM};
pub use run::{train, Aborted, Engine, RoundSnapshots, RoundView, RunObserver, RunOutput};
pub use state::{ClientState, GlobalState, GroupState, RunState};

use crate::error::{Error, Result};
use crate::task::{NoiseModel, NoiseSource, Task};
use crate::topology::Topology;

/// Position `(t, e, h)` of a local step: global round, group round, local iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DrawIndex {
    pub t: usize,
    pub e: usize,
    pub h: usize,
}

impl DrawIndex {
    pub const fn new(t: usize, e: usize, h: usize) -> Self {
        Self { t, e, h }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorrectionMode {
    /// Hierarchical FedAvg: no corrections.
    None,
    ClientOnly,
    GroupOnly,
    Full,
}

impl CorrectionMode {
    pub const ALL: [CorrectionMode; 4] = [
        CorrectionMode::Full,
        CorrectionMode::ClientOnly,
        CorrectionMode::GroupOnly,
        CorrectionMode::None,
    ];

    pub fn uses_client(self) -> bool {
        matches!(self, CorrectionMode::ClientOnly | CorrectionMode::Full)
    }

    pub fn uses_group(self) -> bool {
        matches!(self, CorrectionMode::GroupOnly | CorrectionMode::Full)
    }

    pub fn name(self) -> &'static str {
        match self {
            CorrectionMode::None => "none",
            CorrectionMode::ClientOnly => "client-only",
            CorrectionMode::GroupOnly => "group-only",
            CorrectionMode::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" | "hfedavg" => Some(CorrectionMode::None),
            "client-only" => Some(CorrectionMode::ClientOnly),
            "group-only" => Some(CorrectionMode::GroupOnly),
            "full" | "mtgc" => Some(CorrectionMode::Full),
            _ => None,
        }
    }
}

/// How a correction term is (re)initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorrectionInit {
    Zero,
    /// Differences of stochastic gradients at the current model (draw `(t, 0, 0)`).
    BatchGradient,
}

impl CorrectionInit {
    pub fn name(self) -> &'static str {
        match self {
            CorrectionInit::Zero => "zero",
            CorrectionInit::BatchGradient => "batch-gradient",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "zero" => Some(CorrectionInit::Zero),
            "batch-gradient" => Some(CorrectionInit::BatchGradient),
            _ => None,
        }
    }
}

/// Whether client corrections carry across global rounds or are re-initialized
/// (with `z_init`) at the start of every global round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ZRefresh {
    #[default]
    Carry,
    PerRound,
}

impl ZRefresh {
    pub fn name(self) -> &'static str {
        match self {
            ZRefresh::Carry => "carry",
            ZRefresh::PerRound => "per-round",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "carry" => Some(ZRefresh::Carry),
            "per-round" => Some(ZRefresh::PerRound),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Learning rate `γ`.
    pub gamma: f64,
    /// Global rounds `T`.
    pub rounds: usize,
    /// Group aggregations per global round `E`.
    pub group_rounds: usize,
    /// Local steps per group round `H`.
    pub local_steps: usize,
    pub z_init: CorrectionInit,
    pub y_init: CorrectionInit,
    pub z_refresh: ZRefresh,
    pub mode: CorrectionMode,
    /// Worker threads for local phases; never changes results.
    pub threads: usize,
}

impl TrainConfig {
    pub fn new(gamma: f64, rounds: usize, group_rounds: usize, local_steps: usize) -> Self {
        Self {
            gamma,
            rounds,
            group_rounds,
            local_steps,
            z_init: CorrectionInit::Zero,
            y_init: CorrectionInit::Zero,
            z_refresh: ZRefresh::Carry,
            mode: CorrectionMode::Full,
            threads: 1,
        }
    }

    pub fn with_mode(mut self, mode: CorrectionMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_threads(mut self, threads: usize) -> Self {
        self.threads = threads;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be positive, got {}", self.gamma)));
        }
        for (name, v) in [
            ("rounds", self.rounds),
            ("group_rounds", self.group_rounds),
            ("local_steps", self.local_steps),
            ("threads", self.threads),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

/// Clients, their objectives and the gradient noise model: everything a run needs
/// besides the training configuration.
#[derive(Debug, Clone)]
pub struct Federation {
    pub topology: Topology,
    /// Indexed by client id.
    pub tasks: Vec<Task>,
    pub noise: NoiseSource,
}

impl Federation {
    pub fn new(topology: Topology, tasks: Vec<Task>, noise: NoiseSource) -> Result<Self> {
        if tasks.len() != topology.n_clients() {
            return Err(Error::Config(format!(
                "{} tasks for {} clients",
                tasks.len(),
                topology.n_clients()
            )));
        }
        let d = tasks[0].dim();
        for t in &tasks {
            if t.dim() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: t.dim(),
                });
            }
        }
        Ok(Self { topology, tasks, noise })
    }

    pub fn dim(&self) -> usize {
        self.tasks[0].dim()
    }

    pub fn noise_for(&self, seed: u64, client: usize) -> NoiseModel {
        NoiseModel::seeded(self.noise, seed, client)
    }
}
