//! Fault-trajectory extraction over a frozen subgraph.
//!
//! Two symptom correlation methods decide whether an upstream member's
//! alerts explain a downstream member's alerts:
//!
//! * co-occurrence: a one-dimensional ICP that aligns the two alert time
//!   series by a single offset and scores how many alerts line up;
//! * time lag: the pair's median propagation lag compared against a lag
//!   distribution fitted over the subgraph's edges.
//!
//! Trajectories are walked upstream from the initial symptom and end at a
//! member with no dependent alerted predecessor, the root-cause candidate.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detection::AlertStore;
use crate::model::MemberId;
use crate::subgraph::SubgraphSnapshot;

/// Floor for the lag-model standard deviation, in seconds.
pub const LAG_STD_FLOOR_S: f64 = 0.01;
/// Minimum number of lags for a usable lag model.
pub const MIN_LAGS: usize = 3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrajectoryError {
    #[error("member `{0}` is not in the extracted subgraph")]
    NotInSubgraph(MemberId),
    #[error("member `{0}` has no alerts")]
    NoAlerts(MemberId),
    #[error("insufficient lag data: {0} lags, need at least {MIN_LAGS}")]
    InsufficientData(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertSeries {
    pub member: MemberId,
    pub timestamps: Vec<f64>,
}

impl AlertSeries {
    pub fn new(member: impl Into<MemberId>, mut timestamps: Vec<f64>) -> Self {
        timestamps.sort_by(f64::total_cmp);
        AlertSeries {
            member: member.into(),
            timestamps,
        }
    }

    pub fn from_store(store: &AlertStore, member: &MemberId, window: Option<(f64, f64)>) -> Self {
        AlertSeries {
            member: member.clone(),
            timestamps: store.series(member, None, window),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    CoOccurrence,
    TimeLag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependencyVerdict {
    pub upstream: MemberId,
    pub downstream: MemberId,
    pub method: Method,
    pub dependent: bool,
    pub strength: f64,
    /// Recovered offset (co-occurrence) or median lag (time lag), seconds.
    pub offset_or_lag: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoOccurrenceParams {
    pub max_iters: usize,
    /// Aligned alerts closer than this count as matched.
    pub match_window_s: f64,
    pub converge_eps_s: f64,
    /// Offsets beyond this magnitude are not considered co-occurrence.
    pub max_offset_s: f64,
}

impl Default for CoOccurrenceParams {
    fn default() -> Self {
        CoOccurrenceParams {
            max_iters: 50,
            match_window_s: 1.0,
            converge_eps_s: 1e-3,
            max_offset_s: 10.0,
        }
    }
}

/// Element of sorted `xs` nearest to `x`; ties go to the smaller one.
fn nearest(xs: &[f64], x: f64) -> Option<f64> {
    let i = xs.partition_point(|&v| v < x);
    match (i.checked_sub(1).map(|j| xs[j]), xs.get(i).copied()) {
        (Some(lo), Some(hi)) => Some(if x - lo <= hi - x { lo } else { hi }),
        (lo, hi) => lo.or(hi),
    }
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Residuals of the points of `from`, shifted by `offset`, against their
/// nearest neighbour in `to`, keeping those inside `window`.
fn matched_residuals(from: &[f64], to: &[f64], offset: f64, window: f64) -> Vec<f64> {
    from.iter()
        .filter_map(|&x| {
            let y = x + offset;
            let r = nearest(to, y)? - y;
            (r.abs() <= window).then_some(r)
        })
        .collect()
}

/// One-dimensional ICP alignment of alert series `a` (upstream) against
/// `b` (downstream), with the offset convention b ≈ a + offset.
///
/// The offset is seeded by the best-scoring candidate among 0 and the
/// first-point differences (most matches, then smallest residual), then
/// refined by repeatedly matching every
/// point of `a` to its nearest point of `b` and taking the median signed
/// difference of the matched pairs. The matched fraction counts matches in
/// both directions; strength is `fraction / (1 + rms_residual)`.
pub fn co_occurrence(
    a: &AlertSeries,
    b: &AlertSeries,
    params: &CoOccurrenceParams,
) -> DependencyVerdict {
    let mut verdict = DependencyVerdict {
        upstream: a.member.clone(),
        downstream: b.member.clone(),
        method: Method::CoOccurrence,
        dependent: false,
        strength: 0.0,
        offset_or_lag: 0.0,
    };
    let (xa, xb) = (&a.timestamps[..], &b.timestamps[..]);
    if xa.is_empty() || xb.is_empty() {
        return verdict;
    }
    let window = params.match_window_s;

    let mut candidates: Vec<f64> = std::iter::once(0.0)
        .chain(xb.iter().map(|&y| y - xa[0]))
        .chain(xa.iter().map(|&x| xb[0] - x))
        .filter(|c| c.abs() <= params.max_offset_s)
        .collect();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    // score: matches in both directions, then residual sum of squares,
    // then |c|; scoring both directions keeps the choice swap-symmetric
    let mut best: Option<(usize, f64, f64)> = None;
    for c in candidates {
        let fwd = matched_residuals(xa, xb, c, window);
        let bwd = matched_residuals(xb, xa, -c, window);
        let score = fwd.len() + bwd.len();
        let sse: f64 = fwd.iter().chain(&bwd).map(|r| r * r).sum();
        let better = match best {
            None => true,
            Some((s, e, o)) => {
                score > s
                    || (score == s
                        && (sse < e - 1e-12 || ((sse - e).abs() <= 1e-12 && c.abs() < o.abs())))
            }
        };
        if better {
            best = Some((score, sse, c));
        }
    }
    let Some((score, _, mut offset)) = best else {
        return verdict;
    };
    if score == 0 {
        return verdict;
    }

    for _ in 0..params.max_iters {
        let mut diffs: Vec<f64> = matched_residuals(xa, xb, offset, window)
            .into_iter()
            .map(|r| r + offset)
            .collect();
        if diffs.is_empty() {
            break;
        }
        let next = median(&mut diffs);
        let step = (next - offset).abs();
        offset = next;
        if step < params.converge_eps_s {
            break;
        }
    }
    verdict.offset_or_lag = offset;
    if offset.abs() > params.max_offset_s {
        return verdict;
    }

    let fwd = matched_residuals(xa, xb, offset, window);
    let bwd = matched_residuals(xb, xa, -offset, window);
    let matched = fwd.len() + bwd.len();
    let fraction = matched as f64 / (xa.len() + xb.len()) as f64;
    let rms = if matched == 0 {
        0.0
    } else {
        (fwd.iter().chain(&bwd).map(|r| r * r).sum::<f64>() / matched as f64).sqrt()
    };
    if fraction >= 0.5 {
        verdict.dependent = true;
        verdict.strength = (fraction / (1.0 + rms)).clamp(0.0, 1.0);
    }
    verdict
}

/// For every alert time t of `u`: the delay to the first alert of `v` at or
/// after t, if it falls within `horizon_s`.
pub fn pair_lags(u: &[f64], v: &[f64], horizon_s: f64) -> Vec<f64> {
    u.iter()
        .filter_map(|&t| {
            let i = v.partition_point(|&x| x < t);
            let lag = v.get(i)? - t;
            (lag <= horizon_s).then_some(lag)
        })
        .collect()
}

/// Empirical propagation-lag distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LagModel {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl LagModel {
    pub fn fit(lags: &[f64]) -> Result<Self, TrajectoryError> {
        if lags.len() < MIN_LAGS {
            return Err(TrajectoryError::InsufficientData(lags.len()));
        }
        let n = lags.len() as f64;
        let mean = lags.iter().sum::<f64>() / n;
        let var = lags.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n;
        Ok(LagModel {
            mean,
            std: var.sqrt(),
            count: lags.len(),
        })
    }

    pub fn usable(&self) -> bool {
        self.count >= MIN_LAGS && self.mean.is_finite() && self.std.is_finite() && self.std >= 0.0
    }
}

/// Fits a lag model over the alert series of the given (upstream,
/// downstream) pairs.
pub fn estimate_lag_model(
    store: &AlertStore,
    pairs: &[(MemberId, MemberId)],
    horizon_s: f64,
    window: Option<(f64, f64)>,
) -> Result<LagModel, TrajectoryError> {
    let mut lags = Vec::new();
    for (u, v) in pairs {
        let su = store.series(u, None, window);
        let sv = store.series(v, None, window);
        lags.extend(pair_lags(&su, &sv, horizon_s));
    }
    LagModel::fit(&lags)
}

/// Tests whether the pair's median lag is plausible under `model`.
pub fn time_lag(
    u: &AlertSeries,
    v: &AlertSeries,
    model: &LagModel,
    z_max: f64,
    horizon_s: f64,
) -> Result<DependencyVerdict, TrajectoryError> {
    if !model.usable() {
        return Err(TrajectoryError::InsufficientData(model.count));
    }
    let mut lags = pair_lags(&u.timestamps, &v.timestamps, horizon_s);
    if lags.is_empty() {
        return Err(TrajectoryError::InsufficientData(0));
    }
    let lag = median(&mut lags);
    let scale = model.std.max(LAG_STD_FLOOR_S);
    let dev = (lag - model.mean).abs();
    let dependent = dev <= z_max * scale;
    Ok(DependencyVerdict {
        upstream: u.member.clone(),
        downstream: v.member.clone(),
        method: Method::TimeLag,
        dependent,
        strength: if dependent {
            (-dev / scale).exp().clamp(0.0, 1.0)
        } else {
            0.0
        },
        offset_or_lag: lag,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodSelection {
    CoOccurrence,
    TimeLag,
    Both,
}

impl MethodSelection {
    pub fn uses(self, m: Method) -> bool {
        matches!(
            (self, m),
            (MethodSelection::Both, _)
                | (MethodSelection::CoOccurrence, Method::CoOccurrence)
                | (MethodSelection::TimeLag, Method::TimeLag)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceParams {
    pub methods: MethodSelection,
    pub cooccurrence: CoOccurrenceParams,
    pub z_max: f64,
    pub lag_horizon_s: f64,
    /// Upper bound on enumerated trajectories; dense DAGs have exponentially
    /// many upstream paths.
    pub max_trajectories: usize,
}

impl Default for TraceParams {
    fn default() -> Self {
        TraceParams {
            methods: MethodSelection::Both,
            cooccurrence: CoOccurrenceParams::default(),
            z_max: 3.0,
            lag_horizon_s: 10.0,
            max_trajectories: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultTrajectory {
    /// Initial symptom first, root-cause candidate last.
    pub members: Vec<MemberId>,
    /// Per-hop dependency strength.
    pub strengths: Vec<f64>,
    /// Methods that found each hop dependent.
    pub methods: Vec<Vec<Method>>,
    pub avg_strength: f64,
    pub length: usize,
}

impl FaultTrajectory {
    fn from_path(members: Vec<MemberId>, hops: Vec<(f64, Vec<Method>)>) -> Self {
        let (strengths, methods): (Vec<f64>, Vec<Vec<Method>>) = hops.into_iter().unzip();
        let avg_strength = if strengths.is_empty() {
            0.0
        } else {
            strengths.iter().sum::<f64>() / strengths.len() as f64
        };
        FaultTrajectory {
            length: members.len() - 1,
            members,
            strengths,
            methods,
            avg_strength,
        }
    }

    pub fn root_cause(&self) -> &MemberId {
        self.members.last().expect("trajectory is never empty")
    }

    pub fn initial(&self) -> &MemberId {
        &self.members[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceResult {
    pub trajectories: Vec<FaultTrajectory>,
    /// Enumeration stopped at `max_trajectories`.
    pub truncated: bool,
}

/// Evidence for one hop: strength and the methods that found it dependent.
type Hop = (f64, Vec<Method>);

struct Tracer<'a> {
    store: &'a AlertStore,
    params: &'a TraceParams,
    lag_model: Option<&'a LagModel>,
    window: Option<(f64, f64)>,
    series: BTreeMap<MemberId, AlertSeries>,
    hops: BTreeMap<(MemberId, MemberId), Option<Hop>>,
    preds: BTreeMap<MemberId, Vec<MemberId>>,
    out: Vec<FaultTrajectory>,
    truncated: bool,
}

impl Tracer<'_> {
    fn series(&mut self, m: &MemberId) -> &AlertSeries {
        let (store, window) = (self.store, self.window);
        self.series
            .entry(m.clone())
            .or_insert_with(|| AlertSeries::from_store(store, m, window))
    }

    /// Hop evidence for upstream `p` explaining `cur`, or None if no enabled
    /// method finds them dependent.
    fn hop(&mut self, p: &MemberId, cur: &MemberId) -> Option<Hop> {
        let key = (p.clone(), cur.clone());
        if let Some(h) = self.hops.get(&key) {
            return h.clone();
        }
        let up = self.series(p).clone();
        let down = self.series(cur).clone();
        let mut verdicts = Vec::new();
        if !up.is_empty() && !down.is_empty() {
            if self.params.methods.uses(Method::CoOccurrence) {
                verdicts.push(co_occurrence(&up, &down, &self.params.cooccurrence));
            }
            if self.params.methods.uses(Method::TimeLag) {
                if let Some(model) = self.lag_model {
                    if let Ok(v) = time_lag(
                        &up,
                        &down,
                        model,
                        self.params.z_max,
                        self.params.lag_horizon_s,
                    ) {
                        verdicts.push(v);
                    }
                }
            }
        }
        let dependent: Vec<&DependencyVerdict> = verdicts.iter().filter(|v| v.dependent).collect();
        let h = (!dependent.is_empty()).then(|| {
            let strength = dependent.iter().map(|v| v.strength).fold(0.0, f64::max);
            (strength, dependent.iter().map(|v| v.method).collect())
        });
        self.hops.insert(key, h.clone());
        h
    }

    fn walk(
        &mut self,
        path: &mut Vec<MemberId>,
        hops: &mut Vec<Hop>,
        on_path: &mut BTreeSet<MemberId>,
    ) {
        if self.out.len() >= self.params.max_trajectories {
            self.truncated = true;
            return;
        }
        let cur = path
            .last()
            .expect("path starts with the initial member")
            .clone();
        let preds = self.preds.get(&cur).cloned().unwrap_or_default();
        let mut extended = false;
        for p in preds {
            if on_path.contains(&p) {
                continue;
            }
            let Some(h) = self.hop(&p, &cur) else {
                continue;
            };
            extended = true;
            path.push(p.clone());
            hops.push(h);
            on_path.insert(p.clone());
            self.walk(path, hops, on_path);
            on_path.remove(&p);
            hops.pop();
            path.pop();
            if self.truncated {
                return;
            }
        }
        if !extended {
            if self.out.len() >= self.params.max_trajectories {
                self.truncated = true;
                return;
            }
            self.out
                .push(FaultTrajectory::from_path(path.clone(), hops.clone()));
        }
    }
}

/// Walks reversed subgraph edges upstream from `initial`, extending a
/// trajectory through every alerted predecessor that an enabled method
/// finds dependent. A member with no such predecessor ends the trajectory
/// as its root-cause candidate. Members never repeat within a trajectory.
pub fn trace(
    snapshot: &SubgraphSnapshot,
    store: &AlertStore,
    initial: &MemberId,
    params: &TraceParams,
    lag_model: Option<&LagModel>,
    window: Option<(f64, f64)>,
) -> Result<TraceResult, TrajectoryError> {
    if !snapshot.members.contains(initial) {
        return Err(TrajectoryError::NotInSubgraph(initial.clone()));
    }
    if store.series(initial, None, window).is_empty() {
        return Err(TrajectoryError::NoAlerts(initial.clone()));
    }
    let mut preds: BTreeMap<MemberId, Vec<MemberId>> = BTreeMap::new();
    for (s, d) in &snapshot.edges {
        preds.entry(d.clone()).or_default().push(s.clone());
    }
    let mut tracer = Tracer {
        store,
        params,
        lag_model,
        window,
        series: BTreeMap::new(),
        hops: BTreeMap::new(),
        preds,
        out: Vec::new(),
        truncated: false,
    };
    let mut path = vec![initial.clone()];
    let mut on_path = BTreeSet::from([initial.clone()]);
    tracer.walk(&mut path, &mut Vec::new(), &mut on_path);
    Ok(TraceResult {
        trajectories: tracer.out,
        truncated: tracer.truncated,
    })
}

/// Orders trajectories by average strength (descending), then length
/// (descending), then member sequence (lexicographic).
pub fn rank(mut trajectories: Vec<FaultTrajectory>) -> Vec<FaultTrajectory> {
    trajectories.sort_by(|a, b| {
        b.avg_strength
            .total_cmp(&a.avg_strength)
            .then_with(|| b.length.cmp(&a.length))
            .then_with(|| a.members.cmp(&b.members))
            .then_with(|| {
                // fully deterministic even for equal member paths
                let sa: Vec<u64> = a.strengths.iter().map(|s| s.to_bits()).collect();
                let sb: Vec<u64> = b.strengths.iter().map(|s| s.to_bits()).collect();
                sa.cmp(&sb)
            })
    });
    trajectories
}
