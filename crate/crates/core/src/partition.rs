//! Non-i.i.d. partitioning of labeled data over a two-level topology.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::aux_rng;
use crate::task::{DataShard, Example};
use crate::topology::Topology;

pub const DEFAULT_MAX_RETRIES: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub label: usize,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub examples: Vec<LabeledExample>,
}

impl LabeledDataset {
    pub fn new(examples: Vec<LabeledExample>) -> Self {
        Self { examples }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn n_labels(&self) -> usize {
        self.examples.iter().map(|e| e.label + 1).max().unwrap_or(0)
    }

    pub fn label_histogram(&self, ids: &[usize]) -> Vec<usize> {
        let mut h = vec![0; self.n_labels()];
        for &i in ids {
            h[self.examples[i].label] += 1;
        }
        h
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_csv(&text)
    }

    /// `label,feature_1,…,feature_d` per line; a first line whose label field is not
    /// an integer is taken as a header.
    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let mut examples = Vec::new();
        let mut width = None;
        for (line, record) in reader.records().enumerate() {
            let record = record?;
            if record.iter().all(str::is_empty) {
                continue;
            }
            let first = record.get(0).unwrap_or_default();
            let Ok(label) = first.parse::<usize>() else {
                if line == 0 {
                    continue;
                }
                return Err(Error::Dataset(format!("line {}: bad label {first:?}", line + 1)));
            };
            let features = record
                .iter()
                .skip(1)
                .map(|f| {
                    f.parse::<f64>()
                        .map_err(|_| Error::Dataset(format!("line {}: bad feature {f:?}", line + 1)))
                })
                .collect::<Result<Vec<_>>>()?;
            match width {
                None => width = Some(features.len()),
                Some(w) if w != features.len() => {
                    return Err(Error::Dataset(format!(
                        "line {}: expected {w} features, found {}",
                        line + 1,
                        features.len()
                    )))
                }
                _ => {}
            }
            examples.push(LabeledExample { label, features });
        }
        if examples.is_empty() {
            return Err(Error::Dataset("no examples".into()));
        }
        Ok(Self { examples })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    /// Uniform split over groups, Dirichlet label skew over clients in each group.
    GroupIidClientNoniid,
    /// Dirichlet label skew over groups, uniform split over clients in each group.
    GroupNoniidClientIid,
    /// Dirichlet label skew at both levels.
    BothNoniid,
}

impl Regime {
    pub const ALL: [Regime; 3] = [
        Regime::GroupIidClientNoniid,
        Regime::GroupNoniidClientIid,
        Regime::BothNoniid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Regime::GroupIidClientNoniid => "group-iid-client-noniid",
            Regime::GroupNoniidClientIid => "group-noniid-client-iid",
            Regime::BothNoniid => "both-noniid",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.name() == s)
    }

    fn groups_skewed(self) -> bool {
        !matches!(self, Regime::GroupIidClientNoniid)
    }

    fn clients_skewed(self) -> bool {
        !matches!(self, Regime::GroupNoniidClientIid)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub regime: Regime,
    pub alpha: f64,
    pub seed: u64,
    #[serde(default = "default_retries")]
    pub max_retries: usize,
}

fn default_retries() -> usize {
    DEFAULT_MAX_RETRIES
}

impl PartitionPlan {
    pub fn new(regime: Regime, alpha: f64, seed: u64) -> Self {
        Self {
            regime,
            alpha,
            seed,
            max_retries: DEFAULT_MAX_RETRIES,
        }
    }
}

/// Assigns every example to exactly one client. The returned shards are indexed by
/// client id and carry the source example ids; targets are the labels as `f64`.
pub fn partition_dataset(
    dataset: &LabeledDataset,
    topology: &Topology,
    plan: &PartitionPlan,
) -> Result<Vec<DataShard>> {
    if dataset.is_empty() {
        return Err(Error::Dataset("cannot partition an empty dataset".into()));
    }
    if !(plan.alpha > 0.0 && plan.alpha.is_finite()) {
        return Err(Error::Config(format!(
            "dirichlet alpha must be positive, got {}",
            plan.alpha
        )));
    }
    let mut rng = aux_rng(plan.seed, 0x9A27);
    for _ in 0..=plan.max_retries {
        let assignment = assign_once(dataset, topology, plan, &mut rng)?;
        if assignment.iter().all(|ids| !ids.is_empty()) {
            return assignment
                .into_iter()
                .enumerate()
                .map(|(client, ids)| {
                    let examples = ids
                        .iter()
                        .map(|&i| {
                            let ex = &dataset.examples[i];
                            Example::new(ex.features.clone(), ex.label as f64)
                        })
                        .collect();
                    DataShard::with_ids(client, examples, ids)
                })
                .collect();
        }
    }
    Err(Error::PartitionFailed {
        retries: plan.max_retries,
    })
}

fn assign_once(
    dataset: &LabeledDataset,
    topology: &Topology,
    plan: &PartitionPlan,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<usize>>> {
    let all: Vec<usize> = (0..dataset.len()).collect();
    let n_labels = dataset.n_labels();
    let group_parts = if plan.regime.groups_skewed() {
        dirichlet_split(dataset, &all, topology.n_groups(), n_labels, plan.alpha, rng)?
    } else {
        uniform_split(&all, topology.n_groups(), rng)
    };
    let mut per_client = vec![Vec::new(); topology.n_clients()];
    for (j, part) in group_parts.iter().enumerate() {
        let members = topology.group(j);
        let client_parts = if plan.regime.clients_skewed() {
            dirichlet_split(dataset, part, members.len(), n_labels, plan.alpha, rng)?
        } else {
            uniform_split(part, members.len(), rng)
        };
        for (&client, mut ids) in members.iter().zip(client_parts) {
            ids.sort_unstable();
            per_client[client] = ids;
        }
    }
    Ok(per_client)
}

fn uniform_split(ids: &[usize], parts: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(rng);
    let sizes = largest_remainder(shuffled.len(), &vec![1.0; parts]);
    chunk(&shuffled, &sizes)
}

/// Draws one label-proportion vector per target from `Dir(alpha)` and splits each
/// label's examples over targets in proportion to that label's weight per target.
fn dirichlet_split(
    dataset: &LabeledDataset,
    ids: &[usize],
    parts: usize,
    n_labels: usize,
    alpha: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<usize>>> {
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Config(format!("dirichlet alpha: {e}")))?;
    let proportions: Vec<Vec<f64>> = (0..parts)
        .map(|_| {
            let draw: Vec<f64> = (0..n_labels).map(|_| gamma.sample(rng)).collect();
            let total: f64 = draw.iter().sum();
            if total > 0.0 {
                draw.iter().map(|g| g / total).collect()
            } else {
                vec![1.0 / n_labels as f64; n_labels]
            }
        })
        .collect();
    let mut out = vec![Vec::new(); parts];
    for label in 0..n_labels {
        let mut members: Vec<usize> = ids
            .iter()
            .copied()
            .filter(|&i| dataset.examples[i].label == label)
            .collect();
        if members.is_empty() {
            continue;
        }
        members.shuffle(rng);
        let weights: Vec<f64> = proportions.iter().map(|p| p[label]).collect();
        let sizes = largest_remainder(members.len(), &weights);
        for (target, piece) in chunk(&members, &sizes).into_iter().enumerate() {
            out[target].extend(piece);
        }
    }
    Ok(out)
}

fn chunk(ids: &[usize], sizes: &[usize]) -> Vec<Vec<usize>> {
    let mut start = 0;
    sizes
        .iter()
        .map(|&s| {
            let piece = ids[start..start + s].to_vec();
            start += s;
            piece
        })
        .collect()
}

/// Integer apportionment of `total` by `weights`: floors first, then the leftover
/// units go to the largest fractional parts (lower index wins ties). All-zero weights
/// are treated as uniform.
pub fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let uniform;
    let weights = if sum > 0.0 && sum.is_finite() {
        weights
    } else {
        uniform = vec![1.0; weights.len()];
        &uniform[..]
    };
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = sizes.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &k in order.iter().take(total.saturating_sub(assigned)) {
        sizes[k] += 1;
    }
    sizes
}

/// Toy labeled set: `n_labels` Gaussian clusters in `dim` dimensions.
pub fn toy_clusters(n_per_label: usize, n_labels: usize, dim: usize, seed: u64) -> LabeledDataset {
    use rand_distr::StandardNormal;
    let mut rng = aux_rng(seed, 0x70A1);
    let centers: Vec<Vec<f64>> = (0..n_labels)
        .map(|_| (0..dim).map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let mut examples = Vec::with_capacity(n_per_label * n_labels);
    for _ in 0..n_per_label {
        for (label, c) in centers.iter().enumerate() {
            let features = c
                .iter()
                .map(|m| m + 0.5 * rng.sample::<f64, _>(StandardNormal))
                .collect();
            examples.push(LabeledExample { label, features });
        }
    }
    LabeledDataset { examples }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_set(n: usize, labels: usize) -> LabeledDataset {
        LabeledDataset::new(
            (0..n)
                .map(|i| LabeledExample {
                    label: i % labels,
                    features: vec![i as f64, 1.0],
                })
                .collect(),
        )
    }

    #[test]
    fn largest_remainder_conserves() {
        assert_eq!(largest_remainder(10, &[1.0, 1.0, 1.0]), vec![4, 3, 3]);
        assert_eq!(largest_remainder(7, &[0.0, 0.0]), vec![4, 3]);
        assert_eq!(largest_remainder(5, &[0.2, 0.0, 0.8]), vec![1, 0, 4]);
    }

    #[test]
    fn ten_examples_two_clients() {
        let data = small_set(10, 2);
        let topo = Topology::build(1, &[2]).unwrap();
        for regime in Regime::ALL {
            let shards = partition_dataset(&data, &topo, &PartitionPlan::new(regime, 0.5, 3)).unwrap();
            assert_eq!(shards.iter().map(DataShard::len).sum::<usize>(), 10);
        }
    }

    #[test]
    fn empty_dataset_rejected() {
        let topo = Topology::build(1, &[1]).unwrap();
        let plan = PartitionPlan::new(Regime::BothNoniid, 0.1, 0);
        assert!(partition_dataset(&LabeledDataset::default(), &topo, &plan).is_err());
    }

    #[test]
    fn impossible_partition_fails_after_retries() {
        // 2 examples cannot fill 3 clients
        let data = small_set(2, 2);
        let topo = Topology::build(1, &[3]).unwrap();
        let mut plan = PartitionPlan::new(Regime::BothNoniid, 0.1, 0);
        plan.max_retries = 5;
        assert!(matches!(
            partition_dataset(&data, &topo, &plan),
            Err(Error::PartitionFailed { retries: 5 })
        ));
    }

    #[test]
    fn csv_with_and_without_header() {
        let a = LabeledDataset::parse_csv("label,f1,f2\n1,0.5,2\n0,1,-1\n").unwrap();
        let b = LabeledDataset::parse_csv("1,0.5,2\n0,1,-1\n").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.examples[0].label, 1);
        assert_eq!(a.examples[1].features, vec![1.0, -1.0]);
        assert!(LabeledDataset::parse_csv("1,2\n0,1,2\n").is_err());
        assert!(LabeledDataset::parse_csv("1,2\nx,1\n").is_err());
    }
}
