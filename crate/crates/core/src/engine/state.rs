use serde::{Deserialize, Serialize};

use super::DrawIndex;
use crate::param::{self, ParamVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientState {
    /// Current local model `x_{i,h}`.
    pub model: ParamVector,
    /// Client-group correction `z_i`.
    pub correction: ParamVector,
    /// Model at the start of the current local phase, `x_{i,0}`.
    pub phase_start: ParamVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupState {
    /// Group model `x̄_j`.
    pub model: ParamVector,
    /// Group-global correction `y_j`.
    pub correction: ParamVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalState {
    /// Global model `x̄^t`.
    pub model: ParamVector,
    /// Next step to execute; `e = h = 0` at global-round boundaries.
    pub clock: DrawIndex,
}

/// All mutable training state. Serialized field order is the declaration order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub clients: Vec<ClientState>,
    pub groups: Vec<GroupState>,
    pub global: GlobalState,
    /// Largest per-group `‖Σ z_i‖/(1 + max‖z_i‖)` after the latest client-correction update.
    pub z_violation: f64,
    /// `‖Σ y_j‖/(1 + max‖y_j‖)` after the latest group-correction update.
    pub y_violation: f64,
}

impl RunState {
    /// `x̂ = (1/N) Σ_j x̄_j`
    pub fn virtual_global(&self) -> ParamVector {
        param::mean(self.groups.iter().map(|g| &g.model))
    }

    pub fn client_models(&self) -> Vec<ParamVector> {
        self.clients.iter().map(|c| c.model.clone()).collect()
    }
}
