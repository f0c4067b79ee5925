//! Seeded synthetic pub/sub systems with injected, propagating faults.
//!
//! `generate_topology` draws a component-level DAG of the requested shape,
//! routes each component's output either through its own distributor or
//! as direct sends, and synthesizes a layer-1 process tree (components
//! grouped under launcher processes). `run` samples every member's metrics
//! per tick and returns the event log plus the ground truth of each fault.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::{self, bind_processes, build_process_tree, ProcessRecord};
use crate::canonical;
use crate::model::{
    AttributeVector, EdgeLayer, GraphSchema, MemberId, MemberKind, ModelError, SystemGraph,
};

pub const CPU: &str = "cpu_fraction";
pub const LATENCY: &str = "latency_ms";
pub const RSS: &str = "rss_bytes";
pub const QUEUE: &str = "queue_len";

const TOPOLOGY_STREAM: u64 = 0;
const RUN_STREAM: u64 = 1;
const ROOT_PID: u32 = 1;
const LAUNCHER_PID_BASE: u32 = 100;
const COMPONENT_PID_BASE: u32 = 1000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidSpec(String),
    #[error("fault root `{0}` is not a member of the graph")]
    UnknownFaultRoot(MemberId),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Aggregation(#[from] aggregation::AggregationError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyKind {
    Chain,
    Tree,
    Diamond,
    RandomDag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySpec {
    pub kind: TopologyKind,
    pub active_count: usize,
    /// Probability that a component publishes through a distributor instead
    /// of sending directly.
    #[serde(default = "one")]
    pub distributor_density: f64,
    /// RandomDag: probability of each extra forward edge.
    #[serde(default = "default_edge_prob")]
    pub edge_prob: f64,
    /// Components per launcher process.
    #[serde(default = "default_group_size")]
    pub group_size: usize,
}

fn one() -> f64 {
    1.0
}
fn default_edge_prob() -> f64 {
    0.1
}
fn default_group_size() -> usize {
    4
}
fn default_duration() -> f64 {
    40.0
}
fn default_tick() -> f64 {
    0.1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricModel {
    pub baseline: f64,
    pub noise_std: f64,
}

impl MetricModel {
    pub const fn new(baseline: f64, noise_std: f64) -> Self {
        MetricModel {
            baseline,
            noise_std,
        }
    }
}

pub fn default_active_metrics() -> BTreeMap<String, MetricModel> {
    BTreeMap::from([
        (CPU.to_string(), MetricModel::new(0.25, 0.02)),
        (LATENCY.to_string(), MetricModel::new(10.0, 0.5)),
        (RSS.to_string(), MetricModel::new(2.0e8, 1.0e6)),
    ])
}

pub fn default_passive_metrics() -> BTreeMap<String, MetricModel> {
    BTreeMap::from([(QUEUE.to_string(), MetricModel::new(5.0, 1.0))])
}

/// Launcher and init processes.
pub fn default_process_metrics() -> BTreeMap<String, MetricModel> {
    BTreeMap::from([
        (CPU.to_string(), MetricModel::new(0.01, 0.002)),
        (RSS.to_string(), MetricModel::new(1.0e7, 1.0e5)),
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub seed: u64,
    pub topology: TopologySpec,
    #[serde(default = "default_duration")]
    pub duration_s: f64,
    #[serde(default = "default_tick")]
    pub tick_s: f64,
    #[serde(default = "default_active_metrics")]
    pub active_metrics: BTreeMap<String, MetricModel>,
    #[serde(default = "default_passive_metrics")]
    pub passive_metrics: BTreeMap<String, MetricModel>,
    #[serde(default = "default_process_metrics")]
    pub process_metrics: BTreeMap<String, MetricModel>,
    /// Per-member replacements of the per-kind metric models.
    #[serde(default)]
    pub member_metrics: BTreeMap<MemberId, BTreeMap<String, MetricModel>>,
}

impl ScenarioSpec {
    pub fn new(seed: u64, kind: TopologyKind, active_count: usize) -> Self {
        ScenarioSpec {
            seed,
            topology: TopologySpec {
                kind,
                active_count,
                distributor_density: 1.0,
                edge_prob: default_edge_prob(),
                group_size: default_group_size(),
            },
            duration_s: default_duration(),
            tick_s: default_tick(),
            active_metrics: default_active_metrics(),
            passive_metrics: default_passive_metrics(),
            process_metrics: default_process_metrics(),
            member_metrics: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidSpec(m.to_string()));
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return bad("duration_s must be positive");
        }
        if !(self.tick_s.is_finite() && self.tick_s > 0.0) {
            return bad("tick_s must be positive");
        }
        let t = &self.topology;
        if t.active_count == 0 {
            return bad("active_count must be at least 1");
        }
        if t.kind == TopologyKind::Diamond && t.active_count < 4 {
            return bad("a diamond needs at least 4 active members");
        }
        if !(0.0..=1.0).contains(&t.distributor_density) || !(0.0..=1.0).contains(&t.edge_prob) {
            return bad("densities must lie in [0,1]");
        }
        if t.group_size == 0 {
            return bad("group_size must be at least 1");
        }
        let models = self
            .active_metrics
            .values()
            .chain(self.passive_metrics.values())
            .chain(self.process_metrics.values())
            .chain(self.member_metrics.values().flat_map(|m| m.values()));
        for m in models {
            if !(m.baseline.is_finite() && m.noise_std.is_finite() && m.noise_std >= 0.0) {
                return bad("metric models need finite baseline and non-negative noise");
            }
        }
        Ok(())
    }

    /// Tick times t_k = k · tick_s for all k with t_k < duration_s.
    pub fn tick_count(&self) -> usize {
        ((self.duration_s / self.tick_s) - 1e-9).ceil().max(0.0) as usize
    }

    /// Rounded like every other logged number, so `3 · 0.1` is exactly 0.3.
    pub fn tick_time(&self, k: usize) -> f64 {
        canonical::round_sig(k as f64 * self.tick_s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Effect {
    pub field: String,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSpec {
    pub root: MemberId,
    pub start_s: f64,
    #[serde(default = "default_lag_mean")]
    pub lag_mean_s: f64,
    #[serde(default = "default_lag_std")]
    pub lag_std_s: f64,
    #[serde(default = "one")]
    pub probability: f64,
    /// Shift applied to affected active members.
    #[serde(default = "default_effect")]
    pub effect: Effect,
    /// Shift applied to affected distributors (queue growth); None leaves
    /// them silent.
    #[serde(default = "default_distributor_effect")]
    pub distributor_effect: Option<Effect>,
}

fn default_lag_mean() -> f64 {
    0.5
}
fn default_lag_std() -> f64 {
    0.05
}
fn default_effect() -> Effect {
    Effect {
        field: CPU.to_string(),
        delta: 0.5,
    }
}
fn default_distributor_effect() -> Option<Effect> {
    Some(Effect {
        field: QUEUE.to_string(),
        delta: 50.0,
    })
}

impl FaultSpec {
    pub fn new(root: impl Into<MemberId>, start_s: f64) -> Self {
        FaultSpec {
            root: root.into(),
            start_s,
            lag_mean_s: default_lag_mean(),
            lag_std_s: default_lag_std(),
            probability: 1.0,
            effect: default_effect(),
            distributor_effect: default_distributor_effect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropagationEdge {
    pub src: MemberId,
    pub dst: MemberId,
    pub lag_s: f64,
    pub arrival_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultTruth {
    pub root_cause: MemberId,
    pub start_s: f64,
    /// Onset time of every affected member (root included), restricted to
    /// onsets inside the simulated interval.
    pub affected: BTreeMap<MemberId, f64>,
    /// Every edge that carried the fault out of an affected member.
    pub propagation: Vec<PropagationEdge>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub faults: Vec<FaultTruth>,
}

impl GroundTruth {
    pub fn root_causes(&self) -> impl Iterator<Item = &MemberId> {
        self.faults.iter().map(|f| &f.root_cause)
    }

    pub fn to_json(&self) -> String {
        let mut s = canonical::to_string(self, true).expect("ground truth serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }
}

/// One (tick, member) sample of the event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventRecord {
    pub timestamp: f64,
    pub member: MemberId,
    pub metrics: AttributeVector,
}

pub fn write_event_log(events: &[EventRecord]) -> String {
    let mut out = String::with_capacity(events.len() * 96);
    for e in events {
        out.push_str(&canonical::to_string(e, false).expect("event serializes"));
        out.push('\n');
    }
    out
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn pad(prefix: &str, i: usize, n: usize) -> MemberId {
    let width = n.saturating_sub(1).max(1).to_string().len();
    MemberId::new(format!("{prefix}{i:0width$}"))
}

/// Component-level successor lists of the requested shape.
fn component_dag(spec: &TopologySpec, rng: &mut ChaCha8Rng) -> Vec<BTreeSet<usize>> {
    let n = spec.active_count;
    let mut succ = vec![BTreeSet::new(); n];
    match spec.kind {
        TopologyKind::Chain => {
            for i in 1..n {
                succ[i - 1].insert(i);
            }
        }
        TopologyKind::Tree => {
            for i in 1..n {
                let p = rng.random_range(0..i);
                succ[p].insert(i);
            }
        }
        TopologyKind::Diamond => {
            let sink = n - 1;
            let mid = n - 2;
            let split = mid.div_ceil(2);
            let branches = [(1..=split).collect::<Vec<_>>(), (split + 1..=mid).collect()];
            for b in branches.iter().filter(|b| !b.is_empty()) {
                succ[0].insert(b[0]);
                for w in b.windows(2) {
                    succ[w[0]].insert(w[1]);
                }
                succ[*b.last().unwrap()].insert(sink);
            }
        }
        TopologyKind::RandomDag => {
            for j in 1..n {
                let p = rng.random_range(0..j);
                succ[p].insert(j);
                for (i, s) in succ.iter_mut().enumerate().take(j) {
                    if i != p && rng.random_bool(spec.edge_prob) {
                        s.insert(j);
                    }
                }
            }
        }
    }
    succ
}

fn zeros(fields: &BTreeMap<String, MetricModel>) -> AttributeVector {
    fields
        .iter()
        .map(|(f, m)| (f.clone(), m.baseline))
        .collect()
}

pub fn component_pid(i: usize) -> u32 {
    COMPONENT_PID_BASE + i as u32
}

/// Builds the graph for `spec`. Deterministic per seed.
pub fn generate_topology(spec: &ScenarioSpec) -> Result<SystemGraph, SimError> {
    spec.validate()?;
    let mut rng = rng_for(spec.seed, TOPOLOGY_STREAM);
    let n = spec.topology.active_count;
    let schema = GraphSchema {
        active: spec.active_metrics.keys().cloned().collect(),
        passive: spec.passive_metrics.keys().cloned().collect(),
        layer_count: 2,
    };
    let mut g = SystemGraph::new(schema)?;
    let comps: Vec<MemberId> = (0..n).map(|i| pad("c", i, n)).collect();
    for c in &comps {
        g.add_member(c.clone(), MemberKind::Active, zeros(&spec.active_metrics))?;
    }
    let succ = component_dag(&spec.topology, &mut rng);
    let mut topics = 0usize;
    for (i, out) in succ.iter().enumerate() {
        if out.is_empty() {
            continue;
        }
        if rng.random_bool(spec.topology.distributor_density) {
            let t = pad("t", topics, n);
            topics += 1;
            g.add_member(t.clone(), MemberKind::Passive, zeros(&spec.passive_metrics))?;
            g.add_edge(comps[i].clone(), t.clone(), EdgeLayer::COMMUNICATION)?;
            for &j in out {
                g.add_edge(t.clone(), comps[j].clone(), EdgeLayer::COMMUNICATION)?;
            }
        } else {
            for &j in out {
                g.add_edge(comps[i].clone(), comps[j].clone(), EdgeLayer::COMMUNICATION)?;
            }
        }
    }

    let proc_metrics = |name: &str| ProcessRecord {
        pid: 0,
        ppid: 0,
        name: name.to_string(),
        metrics: zeros(&spec.process_metrics),
    };
    let mut records = vec![ProcessRecord {
        pid: ROOT_PID,
        ..proc_metrics("launch")
    }];
    let groups = n.div_ceil(spec.topology.group_size);
    for gi in 0..groups {
        records.push(ProcessRecord {
            pid: LAUNCHER_PID_BASE + gi as u32,
            ppid: ROOT_PID,
            ..proc_metrics(&format!("launcher-{gi}"))
        });
    }
    for (i, c) in comps.iter().enumerate() {
        records.push(ProcessRecord {
            pid: component_pid(i),
            ppid: LAUNCHER_PID_BASE + (i / spec.topology.group_size) as u32,
            name: c.to_string(),
            metrics: zeros(&spec.active_metrics),
        });
    }
    build_process_tree(&mut g, &records, EdgeLayer::PROCESS)?;
    let bindings: BTreeMap<MemberId, u32> = comps
        .iter()
        .enumerate()
        .map(|(i, c)| (c.clone(), component_pid(i)))
        .collect();
    bind_processes(&mut g, &bindings)?;
    g.validate()?;
    Ok(g)
}

fn check_fault(graph: &SystemGraph, spec: &ScenarioSpec, f: &FaultSpec) -> Result<(), SimError> {
    if !graph.contains(&f.root) {
        return Err(SimError::UnknownFaultRoot(f.root.clone()));
    }
    let bad = |m: &str| Err(SimError::InvalidSpec(format!("fault at `{}`: {m}", f.root)));
    if !(f.start_s >= 0.0 && f.start_s < spec.duration_s) {
        return bad("start_s must lie in [0, duration_s)");
    }
    if !(0.0..=1.0).contains(&f.probability) {
        return bad("probability must lie in [0,1]");
    }
    if !(f.lag_mean_s.is_finite()
        && f.lag_std_s.is_finite()
        && f.lag_mean_s >= 0.0
        && f.lag_std_s >= 0.0)
    {
        return bad("lag mean/std must be finite and non-negative");
    }
    Ok(())
}

/// Samples, for every layer-0 edge in sorted order, whether it transmits and
/// its lag; then takes earliest arrivals from the root.
fn propagate(
    graph: &SystemGraph,
    fault: &FaultSpec,
    last_tick: f64,
    rng: &mut ChaCha8Rng,
) -> FaultTruth {
    let lag_dist =
        Normal::new(fault.lag_mean_s, fault.lag_std_s).expect("validated lag parameters");
    let mut out_edges: BTreeMap<&MemberId, Vec<(&MemberId, f64)>> = BTreeMap::new();
    for e in graph.edges_on(EdgeLayer::COMMUNICATION) {
        let transmit = rng.random::<f64>() < fault.probability;
        let lag = lag_dist.sample(rng).max(0.0);
        if transmit {
            out_edges.entry(&e.src).or_default().push((&e.dst, lag));
        }
    }
    let mut onset: BTreeMap<MemberId, f64> = BTreeMap::from([(fault.root.clone(), fault.start_s)]);
    let mut done: BTreeSet<MemberId> = BTreeSet::new();
    loop {
        let next = onset
            .iter()
            .filter(|(m, _)| !done.contains(*m))
            .min_by(|a, b| a.1.total_cmp(b.1).then_with(|| a.0.cmp(b.0)))
            .map(|(m, t)| (m.clone(), *t));
        let Some((m, t)) = next else { break };
        done.insert(m.clone());
        for &(dst, lag) in out_edges.get(&m).into_iter().flatten() {
            let arrival = t + lag;
            let slot = onset.entry(dst.clone()).or_insert(f64::INFINITY);
            if arrival < *slot {
                *slot = arrival;
            }
        }
    }
    let affected: BTreeMap<MemberId, f64> = onset
        .into_iter()
        .filter(|(_, t)| *t <= last_tick + 1e-9)
        .collect();
    let mut propagation = Vec::new();
    for (src, t) in &affected {
        for &(dst, lag) in out_edges.get(src).into_iter().flatten() {
            propagation.push(PropagationEdge {
                src: src.clone(),
                dst: dst.clone(),
                lag_s: lag,
                arrival_s: t + lag,
            });
        }
    }
    FaultTruth {
        root_cause: fault.root.clone(),
        start_s: fault.start_s,
        affected,
        propagation,
    }
}

/// True when the tick at `t` already shows a fault with onset `onset`.
pub fn is_onset_reached(t: f64, onset: f64) -> bool {
    t + 1e-9 >= onset
}

/// Simulates `scenario` on `graph` with the given faults.
pub fn run(
    graph: &SystemGraph,
    scenario: &ScenarioSpec,
    faults: &[FaultSpec],
) -> Result<(Vec<EventRecord>, GroundTruth), SimError> {
    scenario.validate()?;
    for f in faults {
        check_fault(graph, scenario, f)?;
    }
    let mut rng = rng_for(scenario.seed, RUN_STREAM);
    let ticks = scenario.tick_count();
    let last_tick = scenario.tick_time(ticks.saturating_sub(1));
    let truths: Vec<FaultTruth> = faults
        .iter()
        .map(|f| propagate(graph, f, last_tick, &mut rng))
        .collect();

    // process members that mirror a bound component
    let mut mirrors: BTreeMap<MemberId, MemberId> = BTreeMap::new();
    for m in graph
        .member_ids()
        .filter(|m| aggregation::is_process_member(m))
    {
        if let Some(c) = aggregation::bound_components(graph, m).into_iter().next() {
            mirrors.insert(m.clone(), c);
        }
    }
    let plain: Vec<&crate::model::Member> = graph
        .members()
        .filter(|m| !mirrors.contains_key(&m.id))
        .collect();

    let mut events = Vec::with_capacity(ticks * graph.member_count());
    for k in 0..ticks {
        let t = scenario.tick_time(k);
        let mut sample: BTreeMap<MemberId, AttributeVector> = BTreeMap::new();
        for m in &plain {
            let models = model_for(scenario, m);
            let mut attrs = AttributeVector::new();
            for f in graph.schema().fields(m.kind) {
                let model = models
                    .get(f.as_str())
                    .copied()
                    .unwrap_or(MetricModel::new(0.0, 0.0));
                let z: f64 = StandardNormal.sample(&mut rng);
                let mut v = model.baseline + model.noise_std * z;
                for (fault, truth) in faults.iter().zip(&truths) {
                    let Some(&onset) = truth.affected.get(&m.id) else {
                        continue;
                    };
                    if !is_onset_reached(t, onset) {
                        continue;
                    }
                    let effect = match m.kind {
                        MemberKind::Active => Some(&fault.effect),
                        MemberKind::Passive => fault.distributor_effect.as_ref(),
                    };
                    if let Some(e) = effect.filter(|e| &e.field == f) {
                        v += e.delta;
                    }
                }
                // stored as written to the log, so file and memory agree
                attrs.set(f, canonical::round_sig(v));
            }
            sample.insert(m.id.clone(), attrs);
        }
        for (p, c) in &mirrors {
            let comp = &sample[c];
            let attrs: AttributeVector = graph
                .schema()
                .active
                .iter()
                .map(|f| {
                    let v = if f == CPU || f == RSS {
                        comp.get(f).unwrap_or(0.0)
                    } else {
                        0.0
                    };
                    (f.clone(), v)
                })
                .collect();
            sample.insert(p.clone(), attrs);
        }
        events.extend(sample.into_iter().map(|(member, metrics)| EventRecord {
            timestamp: t,
            member,
            metrics,
        }));
    }
    Ok((events, GroundTruth { faults: truths }))
}

/// Metric models for a non-mirrored member.
pub fn model_for<'a>(
    scenario: &'a ScenarioSpec,
    m: &crate::model::Member,
) -> BTreeMap<&'a str, MetricModel> {
    let base = if aggregation::is_process_member(&m.id) {
        &scenario.process_metrics
    } else {
        match m.kind {
            MemberKind::Active => &scenario.active_metrics,
            MemberKind::Passive => &scenario.passive_metrics,
        }
    };
    let mut out: BTreeMap<&str, MetricModel> = base.iter().map(|(k, v)| (k.as_str(), *v)).collect();
    if let Some(over) = scenario.member_metrics.get(&m.id) {
        for (k, v) in over {
            out.insert(k.as_str(), *v);
        }
    }
    out
}
