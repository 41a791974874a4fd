use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::graph::{GraphError, TaskGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExecMode {
    Sequential,
    LocalParallel,
    Offload,
}

impl ExecMode {
    pub const ALL: [ExecMode; 3] = [ExecMode::Sequential, ExecMode::LocalParallel, ExecMode::Offload];

    pub fn as_str(self) -> &'static str {
        match self {
            ExecMode::Sequential => "sequential",
            ExecMode::LocalParallel => "local-parallel",
            ExecMode::Offload => "offload",
        }
    }
}

impl fmt::Display for ExecMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExecMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown mode {s:?}"))
    }
}

/// Capacity a node advertises to its peers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentInfo {
    pub node: String,
    pub total_slots: usize,
    pub free_slots: usize,
}

impl AgentInfo {
    pub fn new(node: impl Into<String>, total_slots: usize, free_slots: usize) -> Self {
        Self {
            node: node.into(),
            total_slots,
            free_slots: free_slots.min(total_slots),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Placement {
    /// Task id to node label.
    pub nodes: BTreeMap<String, String>,
    /// Concurrent task-cores each node may run for this graph.
    pub limits: BTreeMap<String, usize>,
}

impl Placement {
    pub fn count_on(&self, node: &str) -> usize {
        self.nodes.values().filter(|n| *n == node).count()
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PlanError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("no agent can provide {cores} cores for task {task:?}")]
    NoCapacity { task: String, cores: usize },
}

/// Assigns every task to a node.
///
/// Offload mode walks the graph level by level. Within a level it fills the
/// local node's free slots, then peers in descending order of advertised
/// free slots (ties by label); when everyone is full it starts another round
/// with the same capacities.
pub fn plan(graph: &TaskGraph, local: &AgentInfo, peers: &[AgentInfo], mode: ExecMode) -> Result<Placement, PlanError> {
    let levels = graph.levels()?;
    let mut out = Placement::default();
    match mode {
        ExecMode::Sequential | ExecMode::LocalParallel => {
            let limit = if mode == ExecMode::Sequential { 1 } else { local.total_slots.max(1) };
            for t in &graph.tasks {
                if t.cores > local.total_slots.max(1) {
                    return Err(PlanError::NoCapacity {
                        task: t.id.clone(),
                        cores: t.cores,
                    });
                }
                out.nodes.insert(t.id.clone(), local.node.clone());
            }
            out.limits.insert(local.node.clone(), limit.max(graph.tasks.iter().map(|t| t.cores).max().unwrap_or(1)));
        }
        ExecMode::Offload => {
            let mut agents: Vec<&AgentInfo> = peers.iter().filter(|p| p.node != local.node).collect();
            agents.sort_by(|a, b| b.free_slots.cmp(&a.free_slots).then_with(|| a.node.cmp(&b.node)));
            agents.insert(0, local);
            let mut capacity: Vec<usize> = agents.iter().map(|a| a.free_slots).collect();
            if capacity.iter().all(|&c| c == 0) {
                capacity = agents.iter().map(|a| a.total_slots).collect();
            }
            let max_levels = levels.iter().copied().max().unwrap_or(0);
            for level in 0..=max_levels {
                let mut pending: Vec<usize> = (0..graph.tasks.len()).filter(|&i| levels[i] == level).collect();
                while !pending.is_empty() {
                    let mut free = capacity.clone();
                    let mut rest = Vec::new();
                    for &i in &pending {
                        let t = &graph.tasks[i];
                        match free.iter().position(|&f| f >= t.cores) {
                            Some(a) => {
                                free[a] -= t.cores;
                                out.nodes.insert(t.id.clone(), agents[a].node.clone());
                            }
                            None => rest.push(i),
                        }
                    }
                    if rest.len() == pending.len() {
                        let t = &graph.tasks[rest[0]];
                        return Err(PlanError::NoCapacity {
                            task: t.id.clone(),
                            cores: t.cores,
                        });
                    }
                    pending = rest;
                }
            }
            for (a, c) in agents.iter().zip(&capacity) {
                if out.nodes.values().any(|n| *n == a.node) {
                    out.limits.insert(a.node.clone(), (*c).max(1));
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::offload::graph::TaskSpec;

    fn independent(n: usize) -> TaskGraph {
        let mut g = TaskGraph::new();
        for i in 0..n {
            g.add(TaskSpec::new(format!("t{i}"), "noop", vec![]));
        }
        g
    }

    #[test]
    fn greedy_fill() {
        let p = plan(
            &independent(4),
            &AgentInfo::new("edge", 2, 2),
            &[AgentInfo::new("cloud", 4, 4)],
            ExecMode::Offload,
        )
        .unwrap();
        assert_eq!(p.count_on("edge"), 2);
        assert_eq!(p.count_on("cloud"), 2);
    }

    #[test]
    fn tie_break_by_label() {
        let p = plan(
            &independent(2),
            &AgentInfo::new("edge", 1, 0),
            &[AgentInfo::new("cloudB", 2, 2), AgentInfo::new("cloudA", 2, 2)],
            ExecMode::Offload,
        )
        .unwrap();
        assert_eq!(p.count_on("cloudA"), 2);
        assert_eq!(p.count_on("cloudB"), 0);
        let p = plan(
            &independent(3),
            &AgentInfo::new("edge", 1, 0),
            &[AgentInfo::new("cloudB", 2, 2), AgentInfo::new("cloudA", 2, 2)],
            ExecMode::Offload,
        )
        .unwrap();
        assert_eq!(p.nodes["t2"], "cloudB");
    }

    #[test]
    fn sequential_ignores_peers() {
        let p = plan(
            &independent(5),
            &AgentInfo::new("edge", 1, 1),
            &[AgentInfo::new("cloud", 4, 4)],
            ExecMode::Sequential,
        )
        .unwrap();
        assert_eq!(p.count_on("edge"), 5);
        assert_eq!(p.limits["edge"], 1);
    }

    #[test]
    fn overflow_rounds_respect_capacity() {
        let p = plan(
            &independent(11),
            &AgentInfo::new("edge", 1, 1),
            &[AgentInfo::new("cloud", 4, 4)],
            ExecMode::Offload,
        )
        .unwrap();
        assert_eq!(p.count_on("edge") + p.count_on("cloud"), 11);
        assert_eq!(p.limits["cloud"], 4);
        assert_eq!(p.limits["edge"], 1);
    }

    #[test]
    fn impossible_cores() {
        let mut g = TaskGraph::new();
        let mut t = TaskSpec::new("big", "noop", vec![]);
        t.cores = 8;
        g.add(t);
        let err = plan(&g, &AgentInfo::new("edge", 1, 1), &[AgentInfo::new("cloud", 4, 4)], ExecMode::Offload);
        assert!(matches!(err, Err(PlanError::NoCapacity { .. })));
    }
}
