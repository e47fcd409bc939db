//! Client/group hierarchies.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Two-level hierarchy: `N` groups, each a set `C_j` of client ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    groups: Vec<Vec<usize>>,
    group_of: Vec<usize>,
}

impl Topology {
    /// Groups of the given sizes with client ids assigned contiguously in group order.
    pub fn build(n_groups: usize, clients_per_group: &[usize]) -> Result<Self> {
        if n_groups == 0 {
            return Err(Error::Config("topology needs at least one group".into()));
        }
        if clients_per_group.len() != n_groups {
            return Err(Error::Config(format!(
                "{} group sizes given for {n_groups} groups",
                clients_per_group.len()
            )));
        }
        let mut next = 0;
        let groups = clients_per_group
            .iter()
            .map(|&n| {
                let ids: Vec<usize> = (next..next + n).collect();
                next += n;
                ids
            })
            .collect();
        Self::from_groups(groups)
    }

    pub fn uniform(n_groups: usize, clients_per_group: usize) -> Result<Self> {
        Self::build(n_groups, &vec![clients_per_group; n_groups])
    }

    /// Arbitrary client sets; ids must cover `0..total` exactly once.
    pub fn from_groups(groups: Vec<Vec<usize>>) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::Config("topology needs at least one group".into()));
        }
        let total: usize = groups.iter().map(Vec::len).sum();
        let mut group_of = vec![usize::MAX; total];
        for (j, members) in groups.iter().enumerate() {
            if members.is_empty() {
                return Err(Error::Config(format!("group {j} has no clients")));
            }
            for &i in members {
                if i >= total {
                    return Err(Error::Config(format!("client id {i} out of range 0..{total}")));
                }
                if group_of[i] != usize::MAX {
                    return Err(Error::Config(format!("client {i} appears in two groups")));
                }
                group_of[i] = j;
            }
        }
        let mut groups = groups;
        for g in &mut groups {
            g.sort_unstable();
        }
        Ok(Self { groups, group_of })
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn n_clients(&self) -> usize {
        self.group_of.len()
    }

    pub fn group(&self, j: usize) -> &[usize] {
        &self.groups[j]
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        self.groups.iter().map(Vec::len).collect()
    }

    pub fn group_of(&self, client: usize) -> usize {
        self.group_of[client]
    }

    /// Weight of each client in `f = (1/N) Σ_j (1/n_j) Σ_{i∈C_j} F_i`.
    pub fn client_weights(&self) -> Vec<f64> {
        let n = self.n_groups() as f64;
        (0..self.n_clients())
            .map(|i| 1.0 / (n * self.groups[self.group_of[i]].len() as f64))
            .collect()
    }
}

/// Regular `M`-level tree with fanouts `N_1..N_M` and aggregation periods `P_1..P_M`
/// (level 1 is the global server, level `M` aggregates clients directly).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiLevelTopology {
    fanouts: Vec<usize>,
    periods: Vec<usize>,
}

impl MultiLevelTopology {
    pub fn new(fanouts: Vec<usize>, periods: Vec<usize>) -> Result<Self> {
        if fanouts.is_empty() {
            return Err(Error::Config("multi-level topology needs at least one level".into()));
        }
        if fanouts.len() != periods.len() {
            return Err(Error::Config(format!(
                "{} fanouts but {} periods",
                fanouts.len(),
                periods.len()
            )));
        }
        if let Some(m) = fanouts.iter().position(|&n| n == 0) {
            return Err(Error::Config(format!("fanout of level {} is zero", m + 1)));
        }
        if let Some(m) = periods.iter().position(|&p| p == 0) {
            return Err(Error::Config(format!("period of level {} is zero", m + 1)));
        }
        for m in 0..periods.len() - 1 {
            let (outer, inner) = (periods[m], periods[m + 1]);
            if outer <= inner || outer % inner != 0 {
                return Err(Error::Config(format!(
                    "period of level {} ({inner}) must be smaller than and divide period of level {} ({outer})",
                    m + 2,
                    m + 1
                )));
            }
        }
        if *periods.last().unwrap() == 1 {
            log::warn!("innermost period is 1: clients aggregate after every step");
        }
        Ok(Self { fanouts, periods })
    }

    pub fn levels(&self) -> usize {
        self.fanouts.len()
    }

    pub fn fanouts(&self) -> &[usize] {
        &self.fanouts
    }

    pub fn periods(&self) -> &[usize] {
        &self.periods
    }

    /// `N_1 · … · N_M`
    pub fn n_leaves(&self) -> usize {
        self.fanouts.iter().product()
    }

    /// Number of leaves below one node at depth `m` (depth 0 is the root).
    pub fn block_size(&self, depth: usize) -> usize {
        self.fanouts[depth..].iter().product()
    }

    /// Number of nodes at depth `m`.
    pub fn nodes_at(&self, depth: usize) -> usize {
        self.fanouts[..depth].iter().product()
    }

    /// Path `(k_1, …, k_m)` (zero-based) of the depth-`m` ancestor of a leaf.
    pub fn path_of(&self, leaf: usize, depth: usize) -> Vec<usize> {
        let mut rest = leaf;
        let mut path = Vec::with_capacity(depth);
        for m in 0..depth {
            let block = self.block_size(m + 1);
            path.push(rest / block);
            rest %= block;
        }
        path
    }

    /// The equivalent two-level topology when `M = 2`.
    pub fn as_two_level(&self) -> Option<Topology> {
        (self.levels() == 2).then(|| Topology::uniform(self.fanouts[0], self.fanouts[1]).unwrap())
    }

    /// Client grouping by depth-1 subtree (used for objective weights).
    pub fn top_level_groups(&self) -> Topology {
        Topology::uniform(self.fanouts[0], self.block_size(1)).unwrap()
    }
}
