//! JSON checkpoints taken at global-round boundaries.
//!
//! Field order: `format`, `version`, `seed`, `config`, `state`; `state` serializes as
//! `clients[] {model, correction, phase_start}`, `groups[] {model, correction}`,
//! `global {model, clock {t, e, h}}`, `z_violation`, `y_violation`. Floats are written
//! in shortest round-trip form, so a restored run continues bit-identically.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{RunState, TrainConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "mtgc-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub config: TrainConfig,
    pub state: RunState,
}

impl Checkpoint {
    pub fn new(seed: u64, config: TrainConfig, state: RunState) -> Result<Self> {
        if state.global.clock.e != 0 || state.global.clock.h != 0 {
            return Err(Error::Config(
                "checkpoints are only taken at global-round boundaries".into(),
            ));
        }
        Ok(Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            seed,
            config,
            state,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cp: Checkpoint = serde_json::from_str(text)?;
        if cp.format != CHECKPOINT_FORMAT || cp.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint {} v{}",
                cp.format, cp.version
            )));
        }
        Ok(cp)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
