//! Differentiable client objectives with deterministic gradient oracles.

mod logistic;
mod mlp;
mod optimum;
mod quadratic;
mod smoothness;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use optimum::closed_form_optimum;
pub use smoothness::{lipschitz_constant, max_lipschitz};

use crate::engine::DrawIndex;
use crate::error::{Error, Result};
use crate::param::ParamVector;
use crate::rng::draw_rng;

/// One training example. For classification tasks the target is the class label
/// encoded as `0.0` / `1.0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub features: Vec<f64>,
    pub target: f64,
}

impl Example {
    pub fn new(features: Vec<f64>, target: f64) -> Self {
        Self { features, target }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataShard {
    pub examples: Vec<Example>,
    pub owner: usize,
    /// Ids of the examples in the source dataset, parallel to `examples`.
    pub example_ids: Vec<usize>,
}

impl DataShard {
    pub fn new(owner: usize, examples: Vec<Example>) -> Result<Self> {
        let ids = (0..examples.len()).collect();
        Self::with_ids(owner, examples, ids)
    }

    pub fn with_ids(owner: usize, examples: Vec<Example>, example_ids: Vec<usize>) -> Result<Self> {
        let Some(first) = examples.first() else {
            return Err(Error::Config(format!("shard for client {owner} is empty")));
        };
        let width = first.features.len();
        if let Some(bad) = examples.iter().find(|ex| ex.features.len() != width) {
            return Err(Error::DimensionMismatch {
                expected: width,
                found: bad.features.len(),
            });
        }
        if example_ids.len() != examples.len() {
            return Err(Error::Config("example id list does not match shard".into()));
        }
        Ok(Self {
            examples,
            owner,
            example_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.examples[0].features.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum TaskKind {
    /// `½‖Ax − b‖²` with one example per row of `A`.
    Quadratic,
    /// Binary cross-entropy on a linear logit.
    Logistic,
    /// `input → tanh(hidden) → linear` with squared loss.
    Mlp { hidden: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub kind: TaskKind,
    pub shard: DataShard,
    /// Minibatch size `B`; values at or above the shard size mean full batch.
    pub minibatch_size: usize,
}

impl Task {
    pub fn new(kind: TaskKind, shard: DataShard, minibatch_size: usize) -> Result<Self> {
        if minibatch_size == 0 {
            return Err(Error::Config("minibatch size must be positive".into()));
        }
        if let TaskKind::Mlp { hidden: 0 } = kind {
            return Err(Error::Config("mlp hidden width must be positive".into()));
        }
        Ok(Self {
            kind,
            shard,
            minibatch_size,
        })
    }

    pub fn full_batch(kind: TaskKind, shard: DataShard) -> Result<Self> {
        let n = shard.len();
        Self::new(kind, shard, n)
    }

    /// Parameter dimension `d` of this task.
    pub fn dim(&self) -> usize {
        let p = self.shard.feature_dim();
        match self.kind {
            TaskKind::Quadratic | TaskKind::Logistic => p,
            TaskKind::Mlp { hidden } => mlp::param_count(p, hidden),
        }
    }

    pub fn loss(&self, x: &ParamVector) -> Result<f64> {
        x.check_dim(self.dim())?;
        let total: f64 = self.shard.examples.iter().map(|ex| self.example_loss(ex, x)).sum();
        Ok(total / self.shard.len() as f64)
    }

    pub fn full_gradient(&self, x: &ParamVector) -> Result<ParamVector> {
        x.check_dim(self.dim())?;
        let mut g = ParamVector::zeros(x.dim());
        if self.kind == TaskKind::Quadratic {
            // average of m·r_k·a_k over m rows is Aᵀ(Ax − b)
            quadratic::accumulate_normal(&self.shard.examples, x, &mut g);
            return Ok(g);
        }
        for ex in &self.shard.examples {
            self.accumulate_example_gradient(ex, x, 1.0, &mut g);
        }
        g.scale(1.0 / self.shard.len() as f64);
        Ok(g)
    }

    /// Gradient of the per-example loss whose shard average is `loss`.
    pub fn example_gradient(&self, index: usize, x: &ParamVector) -> Result<ParamVector> {
        x.check_dim(self.dim())?;
        let mut g = ParamVector::zeros(x.dim());
        self.accumulate_example_gradient(&self.shard.examples[index], x, 1.0, &mut g);
        Ok(g)
    }

    pub fn stochastic_gradient(&self, x: &ParamVector, noise: &NoiseModel, draw: DrawIndex) -> Result<ParamVector> {
        let (seed, client) = noise
            .stream
            .ok_or_else(|| Error::Config("gradient noise stream is not initialized".into()))?;
        x.check_dim(self.dim())?;
        let mut rng = draw_rng(seed, client, draw);
        match noise.source {
            NoiseSource::Minibatch => {
                let m = self.shard.len();
                if self.minibatch_size >= m {
                    return self.full_gradient(x);
                }
                let mut g = ParamVector::zeros(x.dim());
                for _ in 0..self.minibatch_size {
                    let k = rng.random_range(0..m);
                    self.accumulate_example_gradient(&self.shard.examples[k], x, 1.0, &mut g);
                }
                g.scale(1.0 / self.minibatch_size as f64);
                Ok(g)
            }
            NoiseSource::Gaussian { sigma } => {
                let mut g = self.full_gradient(x)?;
                if sigma > 0.0 {
                    for v in g.as_mut_slice() {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        *v += sigma * z;
                    }
                }
                Ok(g)
            }
        }
    }

    fn example_loss(&self, ex: &Example, x: &ParamVector) -> f64 {
        match self.kind {
            TaskKind::Quadratic => quadratic::loss(ex, x, self.shard.len()),
            TaskKind::Logistic => logistic::loss(ex, x),
            TaskKind::Mlp { hidden } => mlp::loss(ex, x, hidden),
        }
    }

    fn accumulate_example_gradient(&self, ex: &Example, x: &ParamVector, w: f64, g: &mut ParamVector) {
        match self.kind {
            TaskKind::Quadratic => quadratic::accumulate_gradient(ex, x, self.shard.len(), w, g),
            TaskKind::Logistic => logistic::accumulate_gradient(ex, x, w, g),
            TaskKind::Mlp { hidden } => mlp::accumulate_gradient(ex, x, hidden, w, g),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "source")]
pub enum NoiseSource {
    /// Uniform sampling of `B` examples with replacement.
    #[default]
    Minibatch,
    /// Full-batch gradient plus isotropic Gaussian noise of standard deviation `sigma`.
    Gaussian { sigma: f64 },
}

/// Source of gradient noise for one client, bound to that client's keyed stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    pub source: NoiseSource,
    stream: Option<(u64, usize)>,
}

impl NoiseModel {
    pub const fn seeded(source: NoiseSource, seed: u64, client: usize) -> Self {
        Self {
            source,
            stream: Some((seed, client)),
        }
    }

    pub const fn unseeded(source: NoiseSource) -> Self {
        Self { source, stream: None }
    }
}
