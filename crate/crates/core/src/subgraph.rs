//! Alert-driven growth of the diagnostic subgraph G_j = (M_j, E_j) and its
//! watchlist W_j.
//!
//! When member `m` alerts while watched, the next iteration is
//!
//! * M_{j+1} = M_j ∪ {m}
//! * E_{j+1} = E_j ∪ {(p, m) ∈ E_0 | p ∈ M_j}
//! * W_{j+1} = W_j ∪ {s | (m, s) ∈ E_0}
//!
//! Only edges into the alerting member are added; its outgoing edges never
//! enter E_j.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::{bound_components, is_process_member};
use crate::detection::{HistoryWindow, SymptomPlugin, Watchlist};
use crate::model::{Direction, EdgeLayer, KindFilter, MemberId, ModelError, SystemGraph};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SubgraphError {
    #[error("unknown member `{0}`")]
    UnknownMember(MemberId),
    #[error("seed set is empty; nothing will ever be watched")]
    EmptySeed,
    #[error("member `{0}` is not on the watchlist")]
    NotWatched(MemberId),
    #[error("no process tree on layer {0}")]
    NoProcessTree(EdgeLayer),
    #[error("malformed state dump: {0}")]
    Malformed(String),
}

impl From<ModelError> for SubgraphError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::UnknownMember(m) => SubgraphError::UnknownMember(m),
            other => SubgraphError::Malformed(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpansionEvent {
    /// Iteration the alert was applied to (the result is j + 1).
    pub j: u64,
    pub member: MemberId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IterationState {
    pub j: u64,
    pub members: BTreeSet<MemberId>,
    /// Layer-0 edges (src, dst).
    pub edges: BTreeSet<(MemberId, MemberId)>,
    pub watchlist: Watchlist,
    /// W_0, kept so the state can be rebuilt from its history.
    pub initial_watchlist: Watchlist,
    pub history: Vec<ExpansionEvent>,
}

/// Initialization diagnostics that do not abort the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitWarning {
    EmptySeed,
}

impl IterationState {
    fn with_watchlist(w: Watchlist) -> Self {
        IterationState {
            j: 0,
            members: BTreeSet::new(),
            edges: BTreeSet::new(),
            initial_watchlist: w.clone(),
            watchlist: w,
            history: Vec::new(),
        }
    }

    /// Iteration 0 from configured seed members: W_0 = seeds, empty subgraph.
    pub fn init_from_config(
        graph: &SystemGraph,
        seeds: &[MemberId],
    ) -> Result<Self, SubgraphError> {
        if seeds.is_empty() {
            return Err(SubgraphError::EmptySeed);
        }
        for s in seeds {
            if !graph.contains(s) {
                return Err(SubgraphError::UnknownMember(s.clone()));
            }
        }
        Ok(Self::with_watchlist(seeds.iter().cloned().collect()))
    }

    /// Iteration 0 from process monitoring: W_0 holds the components whose
    /// bound process currently triggers `rule`. Anomalous processes with no
    /// bound component contribute nothing.
    pub fn init_from_process_anomaly(
        graph: &SystemGraph,
        process_layer: EdgeLayer,
        rule: &dyn SymptomPlugin,
        history: &HistoryWindow,
    ) -> Result<(Self, Option<InitWarning>), SubgraphError> {
        let tree = graph
            .tree_subgraph(process_layer)
            .map_err(|_| SubgraphError::NoProcessTree(process_layer))?;
        if !tree.members.iter().any(is_process_member) {
            return Err(SubgraphError::NoProcessTree(process_layer));
        }
        let mut w = Watchlist::new();
        for proc_id in tree.members.iter().filter(|m| is_process_member(m)) {
            let attrs = graph.attrs(proc_id)?;
            // a failing rule is treated as "not anomalous"
            if let Ok(Some(_)) = rule.evaluate(proc_id, attrs, history.get(proc_id)) {
                for c in bound_components(graph, proc_id) {
                    w.insert(c);
                }
            }
        }
        let warn = w.is_empty().then_some(InitWarning::EmptySeed);
        Ok((Self::with_watchlist(w), warn))
    }

    /// Applies one alert of a watched member.
    pub fn expand(&mut self, graph: &SystemGraph, m_alert: &MemberId) -> Result<(), SubgraphError> {
        if !self.watchlist.contains(m_alert) {
            return Err(SubgraphError::NotWatched(m_alert.clone()));
        }
        let preds = graph.neighbors(m_alert, Direction::Predecessors, KindFilter::All)?;
        let succs = graph.neighbors(m_alert, Direction::Successors, KindFilter::All)?;
        for p in preds.into_iter().filter(|p| self.members.contains(p)) {
            self.edges.insert((p, m_alert.clone()));
        }
        self.members.insert(m_alert.clone());
        for s in succs {
            self.watchlist.insert(s);
        }
        self.history.push(ExpansionEvent {
            j: self.j,
            member: m_alert.clone(),
        });
        self.j += 1;
        Ok(())
    }

    /// Immutable copy for trajectory extraction.
    pub fn snapshot(&self) -> SubgraphSnapshot {
        SubgraphSnapshot(self.clone())
    }

    /// Rebuilds a state from W_0 by replaying the logged expansions.
    pub fn replay(
        graph: &SystemGraph,
        initial: &Watchlist,
        history: &[ExpansionEvent],
    ) -> Result<Self, SubgraphError> {
        let mut s = Self::with_watchlist(initial.clone());
        for ev in history {
            if ev.j != s.j {
                return Err(SubgraphError::Malformed(format!(
                    "event for iteration {} applied at iteration {}",
                    ev.j, s.j
                )));
            }
            s.expand(graph, &ev.member)?;
        }
        Ok(s)
    }

    /// Every E_j endpoint lies in M_j.
    pub fn is_closed(&self) -> bool {
        self.edges
            .iter()
            .all(|(a, b)| self.members.contains(a) && self.members.contains(b))
    }

    /// Predecessors of `m` within E_j, sorted.
    pub fn predecessors(&self, m: &MemberId) -> Vec<&MemberId> {
        self.edges
            .iter()
            .filter(|(_, d)| d == m)
            .map(|(s, _)| s)
            .collect()
    }

    pub fn to_json(&self) -> String {
        let mut s = crate::canonical::to_string(self, true).expect("state serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, SubgraphError> {
        serde_json::from_str(text).map_err(|e| SubgraphError::Malformed(e.to_string()))
    }
}

/// Frozen G_{j_extract} with its watchlist and expansion history.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubgraphSnapshot(IterationState);

impl std::ops::Deref for SubgraphSnapshot {
    type Target = IterationState;

    fn deref(&self) -> &IterationState {
        &self.0
    }
}
