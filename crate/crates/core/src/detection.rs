//! Symptom detection: expert plugins evaluated over the watchlist, and the
//! append-only alert store their output lands in.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical;
use crate::model::{AttributeVector, MemberId, ModelError, SystemGraph};

/// Samples of history kept per member unless configured otherwise.
pub const DEFAULT_HISTORY_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DetectionError {
    #[error("plugin `{0}` is already registered")]
    DuplicatePluginName(String),
    #[error("watched member `{0}` is not in the graph")]
    UnknownMember(MemberId),
    #[error("invalid plugin configuration: {0}")]
    InvalidConfig(String),
    #[error("malformed alert log line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{0}")]
pub struct PluginError(pub String);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Symptom {
    pub label: String,
    pub severity: f64,
}

impl Symptom {
    pub fn new(label: impl Into<String>, severity: f64) -> Self {
        Symptom {
            label: label.into(),
            severity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alert {
    pub origin: MemberId,
    pub timestamp: f64,
    pub label: String,
    pub severity: f64,
}

/// An expert-supplied symptom rule. `evaluate` must be deterministic and
/// sees only the watched member's own attributes plus its recent history
/// (oldest first, current sample excluded).
pub trait SymptomPlugin: Send + Sync {
    fn name(&self) -> &str;

    fn evaluate(
        &self,
        member: &MemberId,
        attrs: &AttributeVector,
        history: &[AttributeVector],
    ) -> Result<Option<Symptom>, PluginError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdDirection {
    Above,
    Below,
}

/// Fires while `field` is strictly beyond `threshold`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdPlugin {
    pub name: String,
    pub field: String,
    pub threshold: f64,
    pub direction: ThresholdDirection,
    pub label: String,
    pub severity: f64,
}

impl ThresholdPlugin {
    pub fn above(name: &str, field: &str, threshold: f64) -> Self {
        ThresholdPlugin {
            name: name.to_string(),
            field: field.to_string(),
            threshold,
            direction: ThresholdDirection::Above,
            label: format!("{field}-high"),
            severity: 1.0,
        }
    }

    pub fn below(name: &str, field: &str, threshold: f64) -> Self {
        ThresholdPlugin {
            direction: ThresholdDirection::Below,
            label: format!("{field}-low"),
            ..Self::above(name, field, threshold)
        }
    }
}

impl SymptomPlugin for ThresholdPlugin {
    fn name(&self) -> &str {
        &self.name
    }

    fn evaluate(
        &self,
        _member: &MemberId,
        attrs: &AttributeVector,
        _history: &[AttributeVector],
    ) -> Result<Option<Symptom>, PluginError> {
        let Some(v) = attrs.get(&self.field) else {
            return Ok(None);
        };
        let fired = match self.direction {
            ThresholdDirection::Above => v > self.threshold,
            ThresholdDirection::Below => v < self.threshold,
        };
        Ok(fired.then(|| Symptom::new(self.label.clone(), self.severity)))
    }
}

/// Fires when the current value is more than `z` standard deviations away
/// from the mean of the history window. Severity is `1 - z/|score|`.
#[derive(Debug, Clone, PartialEq)]
pub struct ZScorePlugin {
    pub name: String,
    pub field: String,
    pub z: f64,
    pub min_history: usize,
    pub label: String,
}

impl ZScorePlugin {
    pub fn new(name: &str, field: &str, z: f64) -> Self {
        ZScorePlugin {
            name: name.to_string(),
            field: field.to_string(),
            z,
            min_history: 8,
            label: format!("{field}-spike"),
        }
    }
}

impl SymptomPlugin for ZScorePlugin {
    fn name(&self) -> &str {
        &self.name
    }

    fn evaluate(
        &self,
        _member: &MemberId,
        attrs: &AttributeVector,
        history: &[AttributeVector],
    ) -> Result<Option<Symptom>, PluginError> {
        let Some(v) = attrs.get(&self.field) else {
            return Ok(None);
        };
        let past: Vec<f64> = history.iter().filter_map(|h| h.get(&self.field)).collect();
        if past.len() < self.min_history.max(2) {
            return Ok(None);
        }
        let n = past.len() as f64;
        let mean = past.iter().sum::<f64>() / n;
        let var = past.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let std = var.sqrt();
        if std <= f64::EPSILON * mean.abs().max(1.0) {
            return Ok(None);
        }
        let score = (v - mean).abs() / std;
        if score <= self.z {
            return Ok(None);
        }
        Ok(Some(Symptom::new(self.label.clone(), 1.0 - self.z / score)))
    }
}

/// One plugin block of a configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum PluginConfig {
    Threshold {
        name: String,
        field: String,
        threshold: f64,
        #[serde(default = "default_direction")]
        direction: ThresholdDirection,
        #[serde(default)]
        label: Option<String>,
        #[serde(default = "default_severity")]
        severity: f64,
    },
    Zscore {
        name: String,
        field: String,
        #[serde(default = "default_z")]
        z: f64,
        #[serde(default = "default_min_history")]
        min_history: usize,
        #[serde(default)]
        label: Option<String>,
    },
}

fn default_direction() -> ThresholdDirection {
    ThresholdDirection::Above
}
fn default_severity() -> f64 {
    1.0
}
fn default_z() -> f64 {
    3.0
}
fn default_min_history() -> usize {
    8
}

impl PluginConfig {
    pub fn name(&self) -> &str {
        match self {
            PluginConfig::Threshold { name, .. } | PluginConfig::Zscore { name, .. } => name,
        }
    }

    pub fn build(&self) -> Result<Box<dyn SymptomPlugin>, DetectionError> {
        match self {
            PluginConfig::Threshold {
                name,
                field,
                threshold,
                direction,
                label,
                severity,
            } => {
                if !threshold.is_finite() || !(0.0..=1.0).contains(severity) {
                    return Err(DetectionError::InvalidConfig(format!(
                        "plugin `{name}`: threshold must be finite and severity in [0,1]"
                    )));
                }
                let mut p = match direction {
                    ThresholdDirection::Above => ThresholdPlugin::above(name, field, *threshold),
                    ThresholdDirection::Below => ThresholdPlugin::below(name, field, *threshold),
                };
                if let Some(l) = label {
                    p.label = l.clone();
                }
                p.severity = *severity;
                Ok(Box::new(p))
            }
            PluginConfig::Zscore {
                name,
                field,
                z,
                min_history,
                label,
            } => {
                if !(z.is_finite() && *z > 0.0) {
                    return Err(DetectionError::InvalidConfig(format!(
                        "plugin `{name}`: z must be positive"
                    )));
                }
                let mut p = ZScorePlugin::new(name, field, *z);
                p.min_history = *min_history;
                if let Some(l) = label {
                    p.label = l.clone();
                }
                Ok(Box::new(p))
            }
        }
    }
}

/// W_j: members whose attributes are fed to the plugins.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Watchlist(BTreeSet<MemberId>);

impl Watchlist {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn contains(&self, id: &MemberId) -> bool {
        self.0.contains(id)
    }

    pub fn insert(&mut self, id: MemberId) -> bool {
        self.0.insert(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &MemberId> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_subset(&self, other: &Watchlist) -> bool {
        self.0.is_subset(&other.0)
    }

    pub fn as_set(&self) -> &BTreeSet<MemberId> {
        &self.0
    }
}

impl FromIterator<MemberId> for Watchlist {
    fn from_iter<T: IntoIterator<Item = MemberId>>(iter: T) -> Self {
        Watchlist(iter.into_iter().collect())
    }
}

/// Bounded per-member attribute history, oldest first.
#[derive(Debug, Clone)]
pub struct HistoryWindow {
    capacity: usize,
    samples: BTreeMap<MemberId, Vec<AttributeVector>>,
}

impl Default for HistoryWindow {
    fn default() -> Self {
        Self::new(DEFAULT_HISTORY_LEN)
    }
}

impl HistoryWindow {
    pub fn new(capacity: usize) -> Self {
        HistoryWindow {
            capacity,
            samples: BTreeMap::new(),
        }
    }

    pub fn push(&mut self, member: &MemberId, attrs: AttributeVector) {
        if self.capacity == 0 {
            return;
        }
        let buf = self.samples.entry(member.clone()).or_default();
        if buf.len() == self.capacity {
            buf.remove(0);
        }
        buf.push(attrs);
    }

    pub fn get(&self, member: &MemberId) -> &[AttributeVector] {
        self.samples.get(member).map(Vec::as_slice).unwrap_or(&[])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PluginFailure {
    pub plugin: String,
    pub member: MemberId,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TickReport {
    pub alerts: Vec<Alert>,
    pub failures: Vec<PluginFailure>,
}

/// Ordered plugin set plus the per-(origin, label) refractory state.
pub struct PluginRegistry {
    plugins: Vec<Box<dyn SymptomPlugin>>,
    refractory_s: f64,
    last_seen: BTreeMap<(MemberId, String), f64>,
}

impl Default for PluginRegistry {
    fn default() -> Self {
        Self::new(0.0)
    }
}

impl PluginRegistry {
    /// A symptom repeating on the same member with the same label within
    /// `refractory_s` of its previous occurrence is folded into the earlier
    /// alert, so a persistent symptom yields one alert per episode.
    pub fn new(refractory_s: f64) -> Self {
        PluginRegistry {
            plugins: Vec::new(),
            refractory_s,
            last_seen: BTreeMap::new(),
        }
    }

    pub fn from_configs(
        configs: &[PluginConfig],
        refractory_s: f64,
    ) -> Result<Self, DetectionError> {
        let mut reg = Self::new(refractory_s);
        for c in configs {
            reg.register(c.build()?)?;
        }
        Ok(reg)
    }

    pub fn register(&mut self, plugin: Box<dyn SymptomPlugin>) -> Result<(), DetectionError> {
        if self.plugins.iter().any(|p| p.name() == plugin.name()) {
            return Err(DetectionError::DuplicatePluginName(
                plugin.name().to_string(),
            ));
        }
        self.plugins.push(plugin);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.plugins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.plugins.is_empty()
    }

    pub fn names(&self) -> Vec<&str> {
        self.plugins.iter().map(|p| p.name()).collect()
    }

    pub fn refractory_s(&self) -> f64 {
        self.refractory_s
    }

    /// Runs every plugin, in registration order, on every watched member
    /// (sorted by id). Plugin errors and out-of-range severities are
    /// reported as failures and do not stop the other plugins.
    pub fn evaluate_tick(
        &mut self,
        graph: &SystemGraph,
        history: &HistoryWindow,
        watchlist: &Watchlist,
        now: f64,
    ) -> Result<TickReport, DetectionError> {
        let mut report = TickReport::default();
        for member in watchlist.iter() {
            let attrs = graph.attrs(member).map_err(|e| match e {
                ModelError::UnknownMember(m) => DetectionError::UnknownMember(m),
                other => DetectionError::InvalidConfig(other.to_string()),
            })?;
            let past = history.get(member);
            for plugin in &self.plugins {
                let symptom = match plugin.evaluate(member, attrs, past) {
                    Ok(Some(s)) if (0.0..=1.0).contains(&s.severity) => s,
                    Ok(Some(s)) => {
                        report.failures.push(PluginFailure {
                            plugin: plugin.name().to_string(),
                            member: member.clone(),
                            message: format!("severity {} outside [0,1]", s.severity),
                        });
                        continue;
                    }
                    Ok(None) => continue,
                    Err(e) => {
                        report.failures.push(PluginFailure {
                            plugin: plugin.name().to_string(),
                            member: member.clone(),
                            message: e.0,
                        });
                        continue;
                    }
                };
                let key = (member.clone(), symptom.label.clone());
                let repeat = self
                    .last_seen
                    .get(&key)
                    .is_some_and(|&t| now - t <= self.refractory_s + 1e-9);
                self.last_seen.insert(key, now);
                if repeat {
                    continue;
                }
                report.alerts.push(Alert {
                    origin: member.clone(),
                    timestamp: now,
                    label: symptom.label,
                    severity: symptom.severity,
                });
            }
        }
        Ok(report)
    }
}

/// Append-only alert log with per-member (timestamp-sorted) and per-label
/// indexes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AlertStore {
    log: Vec<Alert>,
    by_member: BTreeMap<MemberId, Vec<usize>>,
    by_label: BTreeMap<String, Vec<usize>>,
}

impl AlertStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, alert: Alert) {
        let idx = self.log.len();
        let ts = alert.timestamp;
        let slot = self.by_member.entry(alert.origin.clone()).or_default();
        // after any equal timestamps, keeping arrival order stable
        let pos = slot.partition_point(|&i| self.log[i].timestamp <= ts);
        slot.insert(pos, idx);
        self.by_label
            .entry(alert.label.clone())
            .or_default()
            .push(idx);
        self.log.push(alert);
    }

    pub fn len(&self) -> usize {
        self.log.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log.is_empty()
    }

    /// Alerts in arrival order.
    pub fn all(&self) -> &[Alert] {
        &self.log
    }

    /// Alerts of `member`, timestamp-sorted.
    pub fn alerts_for<'a>(&'a self, member: &MemberId) -> impl Iterator<Item = &'a Alert> + 'a {
        self.by_member
            .get(member)
            .into_iter()
            .flatten()
            .map(move |&i| &self.log[i])
    }

    pub fn alerts_with_label<'a>(&'a self, label: &str) -> impl Iterator<Item = &'a Alert> + 'a {
        self.by_label
            .get(label)
            .into_iter()
            .flatten()
            .map(move |&i| &self.log[i])
    }

    pub fn count_for(&self, member: &MemberId) -> usize {
        self.by_member.get(member).map_or(0, Vec::len)
    }

    pub fn has_alerts(&self, member: &MemberId) -> bool {
        self.count_for(member) > 0
    }

    pub fn members(&self) -> impl Iterator<Item = &MemberId> {
        self.by_member.keys()
    }

    /// Sorted alert timestamps of `member`, optionally restricted to one
    /// label and to the closed window `[t0, t1]`.
    pub fn series(
        &self,
        member: &MemberId,
        label: Option<&str>,
        window: Option<(f64, f64)>,
    ) -> Vec<f64> {
        self.alerts_for(member)
            .filter(|a| label.is_none_or(|l| a.label == l))
            .filter(|a| window.is_none_or(|(t0, t1)| a.timestamp >= t0 && a.timestamp <= t1))
            .map(|a| a.timestamp)
            .collect()
    }

    /// Earliest alert; ties go to the smallest origin id.
    pub fn earliest(&self) -> Option<&Alert> {
        self.log.iter().min_by(|a, b| {
            a.timestamp
                .total_cmp(&b.timestamp)
                .then_with(|| a.origin.cmp(&b.origin))
        })
    }

    pub fn latest(&self) -> Option<&Alert> {
        self.log.iter().max_by(|a, b| {
            a.timestamp
                .total_cmp(&b.timestamp)
                .then_with(|| b.origin.cmp(&a.origin))
        })
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for a in &self.log {
            out.push_str(&canonical::to_string(a, false).expect("alert serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, DetectionError> {
        let mut store = AlertStore::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let a: Alert = serde_json::from_str(line).map_err(|e| DetectionError::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
            store.record(a);
        }
        Ok(store)
    }
}

/// Alert store shared between one appending pipeline and any number of
/// readers. Each read sees a prefix of the append sequence.
#[derive(Debug, Clone, Default)]
pub struct SharedAlertStore {
    inner: Arc<RwLock<AlertStore>>,
}

impl SharedAlertStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, alert: Alert) {
        self.inner
            .write()
            .expect("alert store poisoned")
            .record(alert);
    }

    pub fn read<T>(&self, f: impl FnOnce(&AlertStore) -> T) -> T {
        f(&self.inner.read().expect("alert store poisoned"))
    }

    pub fn snapshot(&self) -> AlertStore {
        self.read(Clone::clone)
    }
}
