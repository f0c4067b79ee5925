//! Top-down aggregation over tree layers and the OS process tree.
//!
//! `accumulate` computes, for every member v of a tree layer,
//! ψ(v) = Σ_{c ∈ children(v)} (ψ(c) + θ(c)). The root's own attributes are
//! never included: ψ(root) is the sum of θ over every other tree member.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{AttributeVector, EdgeLayer, MemberId, MemberKind, ModelError, SystemGraph};

/// Id of the synthetic common parent inserted when a snapshot has several roots.
pub const VIRTUAL_ROOT: &str = "proc:virtual-root";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AggregationError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("process snapshot contains a parent cycle through pid {0}")]
    CycleDetected(u32),
    #[error("duplicate pid {0} in process snapshot")]
    DuplicatePid(u32),
    #[error("pid must be positive")]
    ZeroPid,
    #[error("no process member for pid {0}")]
    UnknownProcess(u32),
    #[error("member `{0}` is already bound to a process")]
    AlreadyBound(MemberId),
    #[error("malformed process snapshot line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Member id of the process with `pid`.
pub fn process_member_id(pid: u32) -> MemberId {
    MemberId::new(format!("proc:{pid}"))
}

pub fn is_process_member(id: &MemberId) -> bool {
    id.as_str().starts_with("proc:")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessRecord {
    pub pid: u32,
    /// 0 = no parent.
    pub ppid: u32,
    pub name: String,
    pub metrics: AttributeVector,
}

/// Parses a JSON Lines process snapshot.
pub fn parse_process_snapshot(text: &str) -> Result<Vec<ProcessRecord>, AggregationError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| AggregationError::Parse {
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccumulationResult {
    pub layer: EdgeLayer,
    pub values: BTreeMap<MemberId, AttributeVector>,
}

impl AccumulationResult {
    pub fn get(&self, id: &MemberId) -> Option<&AttributeVector> {
        self.values.get(id)
    }
}

/// Accumulates the requested fields bottom-up over tree layer `layer`.
/// Fields missing from a member's attributes contribute zero. Children are
/// summed in id order so floating-point results are reproducible.
pub fn accumulate<S: AsRef<str>>(
    graph: &SystemGraph,
    layer: EdgeLayer,
    fields: &[S],
) -> Result<AccumulationResult, ModelError> {
    let tree = graph.tree_subgraph(layer)?;
    let fields: BTreeSet<&str> = fields.iter().map(AsRef::as_ref).collect();
    let mut values: BTreeMap<MemberId, AttributeVector> = BTreeMap::new();
    for node in tree.post_order() {
        let mut acc = AttributeVector::zeros(fields.iter().copied());
        for child in tree.children(&node) {
            let below = &values[child];
            let theta = graph.attrs(child)?;
            for f in &fields {
                let add = below.get(f).unwrap_or(0.0) + theta.get(f).unwrap_or(0.0);
                acc.set(f, acc.get(f).unwrap_or(0.0) + add);
            }
        }
        values.insert(node, acc);
    }
    Ok(AccumulationResult { layer, values })
}

fn check_tree_layer(graph: &SystemGraph, layer: EdgeLayer) -> Result<(), ModelError> {
    if layer.0 == 0 || layer.0 >= graph.layer_count() {
        return Err(ModelError::LayerOutOfRange {
            layer,
            count: graph.layer_count(),
        });
    }
    Ok(())
}

/// Projects process metrics onto the graph's Active schema: schema fields
/// missing from the record become 0, extra metrics are dropped.
fn project(graph: &SystemGraph, kind: MemberKind, metrics: &AttributeVector) -> AttributeVector {
    graph
        .schema()
        .fields(kind)
        .iter()
        .map(|f| (f.clone(), metrics.get(f).unwrap_or(0.0)))
        .collect()
}

/// Materializes a process snapshot as `proc:<pid>` Active members linked by
/// parent→child edges on `layer`. Returns whether a virtual root was needed.
///
/// Rebuilding from the same snapshot leaves the edge set unchanged;
/// existing process members get their attributes refreshed. On error the
/// graph is left untouched.
pub fn build_process_tree(
    graph: &mut SystemGraph,
    records: &[ProcessRecord],
    layer: EdgeLayer,
) -> Result<bool, AggregationError> {
    check_tree_layer(graph, layer)?;
    let mut by_pid: BTreeMap<u32, &ProcessRecord> = BTreeMap::new();
    for r in records {
        if r.pid == 0 {
            return Err(AggregationError::ZeroPid);
        }
        if r.ppid == r.pid {
            return Err(AggregationError::CycleDetected(r.pid));
        }
        if by_pid.insert(r.pid, r).is_some() {
            return Err(AggregationError::DuplicatePid(r.pid));
        }
    }
    let parent_of = |pid: u32| -> Option<u32> {
        let pp = by_pid[&pid].ppid;
        (pp != 0 && by_pid.contains_key(&pp)).then_some(pp)
    };
    // every chain must reach a root within |records| steps
    for &pid in by_pid.keys() {
        let mut cur = pid;
        let mut steps = 0;
        while let Some(p) = parent_of(cur) {
            steps += 1;
            if steps > by_pid.len() {
                return Err(AggregationError::CycleDetected(pid));
            }
            cur = p;
        }
    }
    let roots: Vec<u32> = by_pid
        .keys()
        .copied()
        .filter(|&p| parent_of(p).is_none())
        .collect();
    let needs_virtual = roots.len() > 1;

    let mut next = graph.clone();
    for r in by_pid.values() {
        let id = process_member_id(r.pid);
        let attrs = project(&next, MemberKind::Active, &r.metrics);
        if next.contains(&id) {
            if next.kind(&id)? != MemberKind::Active {
                return Err(ModelError::NotActive(id).into());
            }
            next.set_attributes(&id, attrs)?;
        } else {
            next.add_member(id, MemberKind::Active, attrs)?;
        }
    }
    for r in by_pid.values() {
        if let Some(pp) = parent_of(r.pid) {
            next.add_edge(process_member_id(pp), process_member_id(r.pid), layer)?;
        }
    }
    if needs_virtual {
        let vroot = MemberId::from(VIRTUAL_ROOT);
        if !next.contains(&vroot) {
            let zeros = project(&next, MemberKind::Passive, &AttributeVector::new());
            next.add_member(vroot.clone(), MemberKind::Passive, zeros)?;
        }
        for &root in &roots {
            next.add_edge(vroot.clone(), process_member_id(root), layer)?;
        }
    }
    *graph = next;
    Ok(needs_virtual)
}

/// Binds components to their OS processes on the process layer: each
/// component becomes a child of `proc:<pid>`.
pub fn bind_processes(
    graph: &mut SystemGraph,
    bindings: &BTreeMap<MemberId, u32>,
) -> Result<(), AggregationError> {
    let layer = EdgeLayer::PROCESS;
    check_tree_layer(graph, layer)?;
    let mut next = graph.clone();
    for (member, &pid) in bindings {
        if next.kind(member)? != MemberKind::Active {
            return Err(ModelError::NotActive(member.clone()).into());
        }
        let proc_id = process_member_id(pid);
        if !next.contains(&proc_id) {
            return Err(AggregationError::UnknownProcess(pid));
        }
        if next.parent(layer, member).is_some() {
            return Err(AggregationError::AlreadyBound(member.clone()));
        }
        next.add_edge(proc_id, member.clone(), layer)?;
    }
    *graph = next;
    Ok(())
}

/// Component bound to a process member, if any: the non-process children of
/// `proc_id` on the process layer.
pub fn bound_components(graph: &SystemGraph, proc_id: &MemberId) -> Vec<MemberId> {
    graph
        .children(EdgeLayer::PROCESS, proc_id)
        .into_iter()
        .filter(|c| !is_process_member(c))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::GraphSchema;

    fn graph() -> SystemGraph {
        SystemGraph::new(GraphSchema::new(["x", "cpu_fraction"], ["q"], 2)).unwrap()
    }

    fn act(x: f64) -> AttributeVector {
        AttributeVector::new()
            .with("x", x)
            .with("cpu_fraction", 0.0)
    }

    fn rec(pid: u32, ppid: u32) -> ProcessRecord {
        ProcessRecord {
            pid,
            ppid,
            name: format!("p{pid}"),
            metrics: AttributeVector::new()
                .with("cpu_fraction", 0.1)
                .with("rss_bytes", 1e6),
        }
    }

    #[test]
    fn chain_unrolls_recursion() {
        let mut g = graph();
        for id in ["root", "a", "b"] {
            g.add_member(id, MemberKind::Active, act(1.0)).unwrap();
        }
        g.add_edge("root", "a", EdgeLayer(1)).unwrap();
        g.add_edge("a", "b", EdgeLayer(1)).unwrap();
        let r = accumulate(&g, EdgeLayer(1), &["x"]).unwrap();
        assert_eq!(r.get(&"b".into()).unwrap().get("x"), Some(0.0));
        assert_eq!(r.get(&"a".into()).unwrap().get("x"), Some(1.0));
        assert_eq!(r.get(&"root".into()).unwrap().get("x"), Some(2.0));
    }

    #[test]
    fn absent_fields_count_as_zero() {
        let mut g = graph();
        g.add_member("r", MemberKind::Active, act(1.0)).unwrap();
        g.add_member(
            "t",
            MemberKind::Passive,
            AttributeVector::new().with("q", 4.0),
        )
        .unwrap();
        g.add_edge("r", "t", EdgeLayer(1)).unwrap();
        let r = accumulate(&g, EdgeLayer(1), &["x", "q"]).unwrap();
        let root = r.get(&"r".into()).unwrap();
        assert_eq!(root.get("x"), Some(0.0));
        assert_eq!(root.get("q"), Some(4.0));
    }

    #[test]
    fn accumulate_needs_a_single_root() {
        let mut g = graph();
        for id in ["r1", "a", "r2", "b"] {
            g.add_member(id, MemberKind::Active, act(1.0)).unwrap();
        }
        g.add_edge("r1", "a", EdgeLayer(1)).unwrap();
        g.add_edge("r2", "b", EdgeLayer(1)).unwrap();
        assert!(matches!(
            accumulate(&g, EdgeLayer(1), &["x"]),
            Err(ModelError::MultipleRoots { .. })
        ));
        assert!(matches!(
            accumulate(&g, EdgeLayer(5), &["x"]),
            Err(ModelError::LayerOutOfRange { .. })
        ));
    }

    #[test]
    fn single_rooted_process_tree() {
        let mut g = graph();
        let virt =
            build_process_tree(&mut g, &[rec(1, 0), rec(2, 1), rec(3, 1)], EdgeLayer(1)).unwrap();
        assert!(!virt);
        let t = g.tree_subgraph(EdgeLayer(1)).unwrap();
        assert_eq!(t.root.as_str(), "proc:1");
        assert_eq!(
            t.children(&"proc:1".into()),
            &["proc:2".into(), "proc:3".into()]
        );
        // metrics projected onto the active schema
        assert_eq!(
            g.attrs(&"proc:2".into()).unwrap(),
            &AttributeVector::new()
                .with("cpu_fraction", 0.1)
                .with("x", 0.0)
        );
    }

    #[test]
    fn several_roots_get_a_virtual_parent() {
        let mut g = graph();
        let virt = build_process_tree(&mut g, &[rec(1, 0), rec(9, 0)], EdgeLayer(1)).unwrap();
        assert!(virt);
        let t = g.tree_subgraph(EdgeLayer(1)).unwrap();
        assert_eq!(t.root.as_str(), VIRTUAL_ROOT);
        assert_eq!(g.kind(&VIRTUAL_ROOT.into()).unwrap(), MemberKind::Passive);
        assert_eq!(
            t.children(&VIRTUAL_ROOT.into()),
            &["proc:1".into(), "proc:9".into()]
        );
    }

    #[test]
    fn corrupt_snapshots_are_rejected() {
        let mut g = graph();
        let before = g.clone();
        assert_eq!(
            build_process_tree(&mut g, &[rec(2, 3), rec(3, 2)], EdgeLayer(1)),
            Err(AggregationError::CycleDetected(2))
        );
        assert_eq!(
            build_process_tree(&mut g, &[rec(2, 0), rec(2, 0)], EdgeLayer(1)),
            Err(AggregationError::DuplicatePid(2))
        );
        assert!(matches!(
            build_process_tree(&mut g, &[rec(1, 0)], EdgeLayer(0)),
            Err(AggregationError::Model(ModelError::LayerOutOfRange { .. }))
        ));
        assert_eq!(g, before);
    }

    #[test]
    fn rebuild_is_idempotent() {
        let snap = [rec(1, 0), rec(2, 1), rec(5, 0), rec(7, 5)];
        let mut g = graph();
        build_process_tree(&mut g, &snap, EdgeLayer(1)).unwrap();
        let first: Vec<_> = g.edges().cloned().collect();
        build_process_tree(&mut g, &snap, EdgeLayer(1)).unwrap();
        let second: Vec<_> = g.edges().cloned().collect();
        assert_eq!(first, second);
    }

    #[test]
    fn unresolvable_parent_is_a_root() {
        let mut g = graph();
        assert!(!build_process_tree(&mut g, &[rec(4, 77), rec(5, 4)], EdgeLayer(1)).unwrap());
        assert_eq!(
            g.tree_subgraph(EdgeLayer(1)).unwrap().root.as_str(),
            "proc:4"
        );
    }

    #[test]
    fn binding_components() {
        let mut g = graph();
        build_process_tree(&mut g, &[rec(1, 0), rec(2, 1)], EdgeLayer(1)).unwrap();
        g.add_member("camera", MemberKind::Active, act(0.0))
            .unwrap();
        let bind = BTreeMap::from([(MemberId::from("camera"), 2)]);
        bind_processes(&mut g, &bind).unwrap();
        let t = g.tree_subgraph(EdgeLayer(1)).unwrap();
        assert_eq!(t.parent(&"camera".into()), Some(&"proc:2".into()));
        assert_eq!(
            bound_components(&g, &"proc:2".into()),
            vec![MemberId::from("camera")]
        );
        assert_eq!(
            bind_processes(&mut g, &bind),
            Err(AggregationError::AlreadyBound("camera".into()))
        );
        let ghost = BTreeMap::from([(MemberId::from("ghost"), 2)]);
        assert_eq!(
            bind_processes(&mut g, &ghost),
            Err(AggregationError::Model(ModelError::UnknownMember(
                "ghost".into()
            )))
        );
        g.add_member("lidar", MemberKind::Active, act(0.0)).unwrap();
        let nopid = BTreeMap::from([(MemberId::from("lidar"), 42)]);
        assert_eq!(
            bind_processes(&mut g, &nopid),
            Err(AggregationError::UnknownProcess(42))
        );
    }

    #[test]
    fn snapshot_lines_parse() {
        let text =
            "{\"pid\":1,\"ppid\":0,\"name\":\"init\",\"metrics\":{\"cpu_fraction\":0.5}}\n\n";
        let recs = parse_process_snapshot(text).unwrap();
        assert_eq!(recs.len(), 1);
        assert!(matches!(
            parse_process_snapshot("{bad"),
            Err(AggregationError::Parse { line: 1, .. })
        ));
    }
}
