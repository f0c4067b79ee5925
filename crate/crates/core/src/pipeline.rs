//! Offline replay of an event log through detection, subgraph growth and
//! trajectory extraction.
//!
//! Per tick: apply the samples to θ, evaluate the plugins on the current
//! watchlist, record every alert and expand the subgraph with it (alerts
//! ordered by origin id), then extend the plugin history. Extraction happens
//! at the end of the log (`demand`) or once no alert has arrived for the
//! quiescence window.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical;
use crate::detection::{
    AlertStore, DetectionError, HistoryWindow, PluginConfig, PluginRegistry, DEFAULT_HISTORY_LEN,
};
use crate::model::{EdgeLayer, MemberId, ModelError, SystemGraph};
use crate::simulator::EventRecord;
use crate::subgraph::{InitWarning, IterationState, SubgraphError};
use crate::trajectory::{self, estimate_lag_model, FaultTrajectory, LagModel, Method, TraceParams};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const NO_SYMPTOMS: &str = "no symptoms detected";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PipelineError {
    #[error("event log line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("event for {member} at t={timestamp}: {source}")]
    Event {
        member: MemberId,
        timestamp: f64,
        source: ModelError,
    },
    #[error(transparent)]
    Detection(#[from] DetectionError),
    #[error(transparent)]
    Subgraph(#[from] SubgraphError),
    #[error(transparent)]
    Trajectory(#[from] trajectory::TrajectoryError),
    #[error("invalid analysis configuration: {0}")]
    Config(String),
}

/// Parses a JSON Lines event log; errors carry the 1-based line number.
pub fn parse_event_log(text: &str) -> Result<Vec<EventRecord>, PipelineError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: EventRecord = serde_json::from_str(line).map_err(|e| PipelineError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if !rec.timestamp.is_finite() {
            return Err(PipelineError::Parse {
                line: i + 1,
                msg: "timestamp is not finite".into(),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitConfig {
    /// W_0 taken verbatim from configuration.
    Seeds { members: Vec<MemberId> },
    /// W_0 = components whose bound process triggers `rule`; re-evaluated
    /// every tick until it is non-empty.
    ProcessAnomaly {
        rule: PluginConfig,
        #[serde(default = "process_layer")]
        layer: u32,
    },
}

fn process_layer() -> u32 {
    EdgeLayer::PROCESS.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TriggerMode {
    Demand,
    Quiescence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TriggerConfig {
    pub mode: TriggerMode,
    pub quiescence_s: f64,
}

impl Default for TriggerConfig {
    fn default() -> Self {
        TriggerConfig {
            mode: TriggerMode::Quiescence,
            quiescence_s: 5.0,
        }
    }
}

/// Which alerted member the trace starts from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialSymptom {
    Earliest,
    Latest,
    Member(MemberId),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    pub plugins: Vec<PluginConfig>,
    pub init: InitConfig,
    #[serde(default)]
    pub trace: TraceParams,
    #[serde(default)]
    pub trigger: TriggerConfig,
    #[serde(default = "default_history")]
    pub history_len: usize,
    /// Defaults to one tick of the replayed log.
    #[serde(default)]
    pub refractory_s: Option<f64>,
    #[serde(default = "default_initial")]
    pub initial: InitialSymptom,
    /// Overrides the lag model estimated from the run.
    #[serde(default)]
    pub lag_model: Option<LagModel>,
}

fn default_history() -> usize {
    DEFAULT_HISTORY_LEN
}
fn default_initial() -> InitialSymptom {
    InitialSymptom::Earliest
}

impl AnalysisConfig {
    pub fn new(plugins: Vec<PluginConfig>, init: InitConfig) -> Self {
        AnalysisConfig {
            plugins,
            init,
            trace: TraceParams::default(),
            trigger: TriggerConfig::default(),
            history_len: DEFAULT_HISTORY_LEN,
            refractory_s: None,
            initial: InitialSymptom::Earliest,
            lag_model: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Extraction {
    pub j: u64,
    pub time_s: f64,
    pub trigger: TriggerMode,
    /// False when the log ended before the quiescence window elapsed.
    pub triggered: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgraphSummary {
    pub members: usize,
    pub edges: usize,
    pub watchlist: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedTrajectory {
    pub rank: usize,
    pub members: Vec<MemberId>,
    pub strengths: Vec<f64>,
    pub methods: Vec<Vec<Method>>,
    pub avg_strength: f64,
    pub length: usize,
    pub root_cause: MemberId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub status: String,
    pub alert_count: usize,
    pub extraction: Extraction,
    pub initial: Option<MemberId>,
    pub subgraph: SubgraphSummary,
    pub lag_model: Option<LagModel>,
    pub truncated: bool,
    pub plugin_failures: usize,
    pub trajectories: Vec<RankedTrajectory>,
}

impl Report {
    pub fn has_symptoms(&self) -> bool {
        self.alert_count > 0
    }

    pub fn to_json(&self) -> String {
        let mut s = canonical::to_string(self, true).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }

    /// Root-cause candidates of the first `k` ranked trajectories.
    pub fn top_root_causes(&self, k: usize) -> Vec<&MemberId> {
        self.trajectories
            .iter()
            .take(k)
            .map(|t| &t.root_cause)
            .collect()
    }

    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "status: {}", self.status);
        let _ = writeln!(
            out,
            "alerts={} j={} extracted_at={}s trigger={}",
            self.alert_count,
            self.extraction.j,
            self.extraction.time_s,
            match self.extraction.trigger {
                TriggerMode::Demand => "demand",
                TriggerMode::Quiescence => "quiescence",
            }
        );
        if let Some(i) = &self.initial {
            let _ = writeln!(out, "initial symptom: {i}");
        }
        if self.trajectories.is_empty() {
            return out;
        }
        let _ = writeln!(
            out,
            "{:>4}  {:>8}  {:>6}  {:<16}  trajectory",
            "rank", "avg", "length", "root cause"
        );
        for t in &self.trajectories {
            let path: Vec<&str> = t.members.iter().map(MemberId::as_str).collect();
            let _ = writeln!(
                out,
                "{:>4}  {:>8.4}  {:>6}  {:<16}  {}",
                t.rank,
                t.avg_strength,
                t.length,
                t.root_cause.as_str(),
                path.join(" <- ")
            );
        }
        if self.truncated {
            let _ = writeln!(out, "(trajectory enumeration truncated)");
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct AnalysisOutcome {
    pub report: Report,
    pub state: IterationState,
    pub alerts: AlertStore,
    pub warnings: Vec<String>,
}

/// Smallest positive gap between distinct timestamps.
fn infer_tick(ticks: &[f64]) -> Option<f64> {
    ticks
        .windows(2)
        .map(|w| w[1] - w[0])
        .filter(|d| *d > 0.0)
        .min_by(f64::total_cmp)
}

/// Replays `events` against `graph` and extracts ranked fault trajectories.
pub fn analyze(
    mut graph: SystemGraph,
    events: &[EventRecord],
    config: &AnalysisConfig,
) -> Result<AnalysisOutcome, PipelineError> {
    let mut order: Vec<usize> = (0..events.len()).collect();
    order.sort_by(|&a, &b| {
        events[a]
            .timestamp
            .total_cmp(&events[b].timestamp)
            .then_with(|| events[a].member.cmp(&events[b].member))
    });
    let mut ticks: BTreeMap<u64, (f64, Vec<&EventRecord>)> = BTreeMap::new();
    let mut times = Vec::new();
    for &i in &order {
        let e = &events[i];
        let key = times.len() as u64;
        if times.last() != Some(&e.timestamp) {
            times.push(e.timestamp);
            ticks.insert(key, (e.timestamp, Vec::new()));
        }
        ticks
            .last_entry()
            .expect("tick inserted")
            .get_mut()
            .1
            .push(e);
    }
    let tick = infer_tick(&times).unwrap_or(0.0);
    let refractory = config.refractory_s.unwrap_or(tick);
    if !(refractory.is_finite() && refractory >= 0.0) {
        return Err(PipelineError::Config(
            "refractory_s must be non-negative".into(),
        ));
    }

    let mut registry = PluginRegistry::from_configs(&config.plugins, refractory)?;
    let mut history = HistoryWindow::new(config.history_len);
    let mut warnings = Vec::new();
    let mut state = match &config.init {
        InitConfig::Seeds { members } => Some(IterationState::init_from_config(&graph, members)?),
        InitConfig::ProcessAnomaly { .. } => None,
    };
    let anomaly_rule = match &config.init {
        InitConfig::ProcessAnomaly { rule, layer } => Some((rule.build()?, EdgeLayer(*layer))),
        InitConfig::Seeds { .. } => None,
    };

    let mut store = AlertStore::new();
    let mut plugin_failures = 0usize;
    let mut last_alert: Option<f64> = None;
    let mut extraction_time = times.last().copied().unwrap_or(0.0);
    let mut triggered = false;
    for (t, records) in ticks.values() {
        let t = *t;
        for r in records {
            graph
                .update_attributes(&r.member, &r.metrics)
                .map_err(|source| PipelineError::Event {
                    member: r.member.clone(),
                    timestamp: t,
                    source,
                })?;
        }
        if state.is_none() {
            if let Some((rule, layer)) = &anomaly_rule {
                let (s, warn) = IterationState::init_from_process_anomaly(
                    &graph,
                    *layer,
                    rule.as_ref(),
                    &history,
                )?;
                if warn != Some(InitWarning::EmptySeed) {
                    state = Some(s);
                }
            }
        }
        if let Some(st) = state.as_mut() {
            let report = registry.evaluate_tick(&graph, &history, &st.watchlist, t)?;
            plugin_failures += report.failures.len();
            let mut alerts = report.alerts;
            alerts.sort_by(|a, b| a.origin.cmp(&b.origin).then_with(|| a.label.cmp(&b.label)));
            if !alerts.is_empty() {
                last_alert = Some(t);
            }
            for a in alerts {
                let origin = a.origin.clone();
                store.record(a);
                st.expand(&graph, &origin)?;
            }
        }
        for r in records {
            let attrs = graph
                .attrs(&r.member)
                .expect("member updated above")
                .clone();
            history.push(&r.member, attrs);
        }
        if config.trigger.mode == TriggerMode::Quiescence {
            if let Some(last) = last_alert {
                if t - last >= config.trigger.quiescence_s - 1e-9 {
                    extraction_time = t;
                    triggered = true;
                    break;
                }
            }
        }
    }
    if config.trigger.mode == TriggerMode::Demand {
        triggered = true;
    }

    let state = match state {
        Some(s) => s,
        None => {
            warnings.push(
                "process monitoring never flagged a bound component; watchlist stayed empty".into(),
            );
            IterationState::replay(&graph, &Default::default(), &[])?
        }
    };
    let snapshot = state.snapshot();
    let extraction = Extraction {
        j: snapshot.j,
        time_s: extraction_time,
        trigger: config.trigger.mode,
        triggered,
    };
    let summary = SubgraphSummary {
        members: snapshot.members.len(),
        edges: snapshot.edges.len(),
        watchlist: snapshot.watchlist.len(),
    };

    if store.is_empty() {
        return Ok(AnalysisOutcome {
            report: Report {
                schema_version: REPORT_SCHEMA_VERSION,
                status: NO_SYMPTOMS.to_string(),
                alert_count: 0,
                extraction,
                initial: None,
                subgraph: summary,
                lag_model: None,
                truncated: false,
                plugin_failures,
                trajectories: Vec::new(),
            },
            state,
            alerts: store,
            warnings,
        });
    }

    let lag_model = match &config.lag_model {
        Some(m) => Some(m.clone()),
        None => {
            let pairs: Vec<(MemberId, MemberId)> = snapshot.edges.iter().cloned().collect();
            match estimate_lag_model(&store, &pairs, config.trace.lag_horizon_s, None) {
                Ok(m) => Some(m),
                Err(e) => {
                    warnings.push(format!("time-lag method disabled: {e}"));
                    None
                }
            }
        }
    };
    let initial = match &config.initial {
        InitialSymptom::Earliest => store.earliest().expect("store is non-empty").origin.clone(),
        InitialSymptom::Latest => store.latest().expect("store is non-empty").origin.clone(),
        InitialSymptom::Member(m) => m.clone(),
    };
    let traced = trajectory::trace(
        &snapshot,
        &store,
        &initial,
        &config.trace,
        lag_model.as_ref(),
        None,
    )?;
    let ranked = trajectory::rank(traced.trajectories);
    let trajectories = ranked
        .into_iter()
        .enumerate()
        .map(|(i, t)| to_ranked(i + 1, t))
        .collect();

    Ok(AnalysisOutcome {
        report: Report {
            schema_version: REPORT_SCHEMA_VERSION,
            status: "ok".to_string(),
            alert_count: store.len(),
            extraction,
            initial: Some(initial),
            subgraph: summary,
            lag_model,
            truncated: traced.truncated,
            plugin_failures,
            trajectories,
        },
        state,
        alerts: store,
        warnings,
    })
}

fn to_ranked(rank: usize, t: FaultTrajectory) -> RankedTrajectory {
    RankedTrajectory {
        rank,
        root_cause: t.root_cause().clone(),
        members: t.members,
        strengths: t.strengths,
        methods: t.methods,
        avg_strength: t.avg_strength,
        length: t.length,
    }
}
