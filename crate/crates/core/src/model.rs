//! Layered system graph: typed members, a communication layer and
//! relationship-tree layers.
//!
//! Layer 0 carries communication edges. Only three kind pairs are legal
//! there: Active→Active (send), Active→Passive (publish) and
//! Passive→Active (subscribe). Every layer above 0 must form a rooted
//! forest: at most one parent per member and no cycles. The same
//! `(src, dst)` pair may appear on several layers.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("member id must not be empty")]
    EmptyId,
    #[error("duplicate member id `{0}`")]
    DuplicateId(MemberId),
    #[error("attributes of `{id}` do not match the {kind} schema: {reason}")]
    SchemaMismatch {
        id: MemberId,
        kind: MemberKind,
        reason: String,
    },
    #[error("unknown member `{0}`")]
    UnknownMember(MemberId),
    #[error("member `{0}` is not active")]
    NotActive(MemberId),
    #[error("layer-0 edge `{src}` -> `{dst}` connects two passive members")]
    KindViolation { src: MemberId, dst: MemberId },
    #[error("edge `{src}` -> `{dst}` on layer {layer} breaks the tree: {reason}")]
    TreeViolation {
        src: MemberId,
        dst: MemberId,
        layer: EdgeLayer,
        reason: &'static str,
    },
    #[error("self-loop on `{0}` rejected")]
    SelfLoop(MemberId),
    #[error("layer {layer} out of range (graph has {count} layers)")]
    LayerOutOfRange { layer: EdgeLayer, count: u32 },
    #[error("layer {layer} has {} roots: {roots:?}", roots.len())]
    MultipleRoots {
        layer: EdgeLayer,
        roots: Vec<MemberId>,
    },
    #[error("layer {0} has no edges")]
    EmptyLayer(EdgeLayer),
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("malformed topology: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MemberId(String);

impl MemberId {
    pub fn new(id: impl Into<String>) -> Self {
        MemberId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for MemberId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for MemberId {
    fn from(s: &str) -> Self {
        MemberId(s.to_string())
    }
}

impl From<String> for MemberId {
    fn from(s: String) -> Self {
        MemberId(s)
    }
}

impl std::borrow::Borrow<str> for MemberId {
    fn borrow(&self) -> &str {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MemberKind {
    Active,
    Passive,
}

impl fmt::Display for MemberKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MemberKind::Active => f.write_str("active"),
            MemberKind::Passive => f.write_str("passive"),
        }
    }
}

/// Named real-valued attributes of one member.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AttributeVector(BTreeMap<String, f64>);

impl AttributeVector {
    pub fn new() -> Self {
        Self::default()
    }

    /// All-zero vector over `fields`.
    pub fn zeros<'a>(fields: impl IntoIterator<Item = &'a str>) -> Self {
        AttributeVector(fields.into_iter().map(|f| (f.to_string(), 0.0)).collect())
    }

    pub fn with(mut self, field: &str, value: f64) -> Self {
        self.0.insert(field.to_string(), value);
        self
    }

    pub fn get(&self, field: &str) -> Option<f64> {
        self.0.get(field).copied()
    }

    pub fn set(&mut self, field: &str, value: f64) {
        self.0.insert(field.to_string(), value);
    }

    pub fn fields(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.0.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl FromIterator<(String, f64)> for AttributeVector {
    fn from_iter<T: IntoIterator<Item = (String, f64)>>(iter: T) -> Self {
        AttributeVector(iter.into_iter().collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EdgeLayer(pub u32);

impl EdgeLayer {
    pub const COMMUNICATION: EdgeLayer = EdgeLayer(0);
    /// Conventional layer for the OS process tree and component bindings.
    pub const PROCESS: EdgeLayer = EdgeLayer(1);

    fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for EdgeLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub src: MemberId,
    pub dst: MemberId,
    pub layer: EdgeLayer,
}

impl Edge {
    pub fn new(src: impl Into<MemberId>, dst: impl Into<MemberId>, layer: EdgeLayer) -> Self {
        Edge {
            src: src.into(),
            dst: dst.into(),
            layer,
        }
    }
}

/// Attribute field declarations per kind plus the fixed layer count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSchema {
    pub active: BTreeSet<String>,
    pub passive: BTreeSet<String>,
    pub layer_count: u32,
}

impl GraphSchema {
    pub fn new<'a>(
        active: impl IntoIterator<Item = &'a str>,
        passive: impl IntoIterator<Item = &'a str>,
        layer_count: u32,
    ) -> Self {
        GraphSchema {
            active: active.into_iter().map(str::to_string).collect(),
            passive: passive.into_iter().map(str::to_string).collect(),
            layer_count,
        }
    }

    pub fn fields(&self, kind: MemberKind) -> &BTreeSet<String> {
        match kind {
            MemberKind::Active => &self.active,
            MemberKind::Passive => &self.passive,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Member {
    pub id: MemberId,
    pub kind: MemberKind,
    pub attrs: AttributeVector,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Predecessors,
    Successors,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KindFilter {
    All,
    ActiveOnly,
    PassiveOnly,
}

impl KindFilter {
    fn admits(self, kind: MemberKind) -> bool {
        match self {
            KindFilter::All => true,
            KindFilter::ActiveOnly => kind == MemberKind::Active,
            KindFilter::PassiveOnly => kind == MemberKind::Passive,
        }
    }
}

type Adjacency = BTreeMap<MemberId, BTreeSet<MemberId>>;

#[derive(Debug, Clone, PartialEq)]
pub struct SystemGraph {
    schema: GraphSchema,
    members: BTreeMap<MemberId, Member>,
    edges: BTreeSet<Edge>,
    // per-layer indexes, derived from `edges`
    succ: Vec<Adjacency>,
    pred: Vec<Adjacency>,
}

impl SystemGraph {
    pub fn new(schema: GraphSchema) -> Result<Self, ModelError> {
        if schema.layer_count == 0 {
            return Err(ModelError::InvalidSchema(
                "layer_count must be at least 1".into(),
            ));
        }
        let n = schema.layer_count as usize;
        Ok(SystemGraph {
            schema,
            members: BTreeMap::new(),
            edges: BTreeSet::new(),
            succ: vec![Adjacency::new(); n],
            pred: vec![Adjacency::new(); n],
        })
    }

    pub fn schema(&self) -> &GraphSchema {
        &self.schema
    }

    pub fn layer_count(&self) -> u32 {
        self.schema.layer_count
    }

    fn check_attrs(
        &self,
        id: &MemberId,
        kind: MemberKind,
        attrs: &AttributeVector,
    ) -> Result<(), ModelError> {
        let expected = self.schema.fields(kind);
        let mismatch = |reason: String| ModelError::SchemaMismatch {
            id: id.clone(),
            kind,
            reason,
        };
        if attrs.len() != expected.len() || attrs.fields().any(|f| !expected.contains(f)) {
            let got: Vec<&str> = attrs.fields().collect();
            return Err(mismatch(format!(
                "expected fields {expected:?}, got {got:?}"
            )));
        }
        if let Some((f, v)) = attrs.iter().find(|(_, v)| !v.is_finite()) {
            return Err(mismatch(format!("field `{f}` is not finite ({v})")));
        }
        Ok(())
    }

    pub fn add_member(
        &mut self,
        id: impl Into<MemberId>,
        kind: MemberKind,
        attrs: AttributeVector,
    ) -> Result<(), ModelError> {
        let id = id.into();
        if id.as_str().is_empty() {
            return Err(ModelError::EmptyId);
        }
        if self.members.contains_key(&id) {
            return Err(ModelError::DuplicateId(id));
        }
        self.check_attrs(&id, kind, &attrs)?;
        self.members.insert(id.clone(), Member { id, kind, attrs });
        Ok(())
    }

    /// Replaces θ(id) wholesale; the new vector must match the kind schema.
    pub fn set_attributes(
        &mut self,
        id: &MemberId,
        attrs: AttributeVector,
    ) -> Result<(), ModelError> {
        let kind = self.kind(id)?;
        self.check_attrs(id, kind, &attrs)?;
        if let Some(m) = self.members.get_mut(id) {
            m.attrs = attrs;
        }
        Ok(())
    }

    /// Overwrites the listed fields of θ(id), keeping the rest.
    pub fn update_attributes(
        &mut self,
        id: &MemberId,
        partial: &AttributeVector,
    ) -> Result<(), ModelError> {
        let mut merged = self.attrs(id)?.clone();
        for (f, v) in partial.iter() {
            merged.set(f, v);
        }
        self.set_attributes(id, merged)
    }

    fn check_layer(&self, layer: EdgeLayer) -> Result<(), ModelError> {
        if layer.0 >= self.schema.layer_count {
            return Err(ModelError::LayerOutOfRange {
                layer,
                count: self.schema.layer_count,
            });
        }
        Ok(())
    }

    pub fn add_edge(
        &mut self,
        src: impl Into<MemberId>,
        dst: impl Into<MemberId>,
        layer: EdgeLayer,
    ) -> Result<(), ModelError> {
        let (src, dst) = (src.into(), dst.into());
        self.check_layer(layer)?;
        let src_kind = self.kind(&src)?;
        let dst_kind = self.kind(&dst)?;
        if src == dst {
            return Err(ModelError::SelfLoop(src));
        }
        let edge = Edge::new(src.clone(), dst.clone(), layer);
        if self.edges.contains(&edge) {
            return Ok(());
        }
        if layer == EdgeLayer::COMMUNICATION {
            if src_kind == MemberKind::Passive && dst_kind == MemberKind::Passive {
                return Err(ModelError::KindViolation { src, dst });
            }
        } else {
            if self.parent(layer, &dst).is_some() {
                return Err(ModelError::TreeViolation {
                    src,
                    dst,
                    layer,
                    reason: "destination already has a parent",
                });
            }
            // dst must not be an ancestor of src
            let mut cur = Some(src.clone());
            while let Some(c) = cur {
                if c == dst {
                    return Err(ModelError::TreeViolation {
                        src,
                        dst,
                        layer,
                        reason: "edge would close a cycle",
                    });
                }
                cur = self.parent(layer, &c).cloned();
            }
        }
        let l = layer.index();
        self.succ[l]
            .entry(src.clone())
            .or_default()
            .insert(dst.clone());
        self.pred[l]
            .entry(dst.clone())
            .or_default()
            .insert(src.clone());
        self.edges.insert(edge);
        debug_assert!(layer.0 == 0 || self.pred[l].get(&dst).map_or(0, |p| p.len()) <= 1);
        Ok(())
    }

    pub fn contains(&self, id: &MemberId) -> bool {
        self.members.contains_key(id)
    }

    pub fn member(&self, id: &MemberId) -> Result<&Member, ModelError> {
        self.members
            .get(id)
            .ok_or_else(|| ModelError::UnknownMember(id.clone()))
    }

    pub fn kind(&self, id: &MemberId) -> Result<MemberKind, ModelError> {
        self.member(id).map(|m| m.kind)
    }

    /// θ(id).
    pub fn attrs(&self, id: &MemberId) -> Result<&AttributeVector, ModelError> {
        self.member(id).map(|m| &m.attrs)
    }

    pub fn members(&self) -> impl Iterator<Item = &Member> {
        self.members.values()
    }

    pub fn member_ids(&self) -> impl Iterator<Item = &MemberId> {
        self.members.keys()
    }

    pub fn member_count(&self) -> usize {
        self.members.len()
    }

    pub fn count_kind(&self, kind: MemberKind) -> usize {
        self.members.values().filter(|m| m.kind == kind).count()
    }

    pub fn edges(&self) -> impl Iterator<Item = &Edge> {
        self.edges.iter()
    }

    pub fn edges_on(&self, layer: EdgeLayer) -> impl Iterator<Item = &Edge> {
        self.edges.iter().filter(move |e| e.layer == layer)
    }

    pub fn has_edge(&self, src: &MemberId, dst: &MemberId, layer: EdgeLayer) -> bool {
        self.succ
            .get(layer.index())
            .and_then(|adj| adj.get(src))
            .is_some_and(|s| s.contains(dst))
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    fn adjacent(
        &self,
        layer: EdgeLayer,
        id: &MemberId,
        dir: Direction,
    ) -> impl Iterator<Item = &MemberId> {
        let adj = match dir {
            Direction::Predecessors => &self.pred[layer.index()],
            Direction::Successors => &self.succ[layer.index()],
        };
        adj.get(id).into_iter().flatten()
    }

    /// Parent of `id` on a tree layer.
    pub fn parent(&self, layer: EdgeLayer, id: &MemberId) -> Option<&MemberId> {
        self.pred
            .get(layer.index())?
            .get(id)
            .and_then(|p| p.iter().next())
    }

    /// Children of `id` on a tree layer, sorted by id.
    pub fn children(&self, layer: EdgeLayer, id: &MemberId) -> Vec<MemberId> {
        match self.succ.get(layer.index()) {
            Some(adj) => adj.get(id).into_iter().flatten().cloned().collect(),
            None => Vec::new(),
        }
    }

    /// Layer-0 predecessors or successors of `id`, filtered by kind.
    pub fn neighbors(
        &self,
        id: &MemberId,
        direction: Direction,
        filter: KindFilter,
    ) -> Result<BTreeSet<MemberId>, ModelError> {
        self.member(id)?;
        Ok(self
            .adjacent(EdgeLayer::COMMUNICATION, id, direction)
            .filter(|m| filter.admits(self.members[*m].kind))
            .cloned()
            .collect())
    }

    /// Active members reachable in one hop, directly or through a single
    /// passive distributor.
    pub fn active_peers(
        &self,
        id: &MemberId,
        direction: Direction,
    ) -> Result<BTreeSet<MemberId>, ModelError> {
        if self.kind(id)? != MemberKind::Active {
            return Err(ModelError::NotActive(id.clone()));
        }
        let mut out = BTreeSet::new();
        for n in self.adjacent(EdgeLayer::COMMUNICATION, id, direction) {
            match self.members[n].kind {
                MemberKind::Active => {
                    out.insert(n.clone());
                }
                MemberKind::Passive => {
                    for m in self.adjacent(EdgeLayer::COMMUNICATION, n, direction) {
                        if self.members[m].kind == MemberKind::Active {
                            out.insert(m.clone());
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Edge-induced communication subgraph.
    pub fn comm_subgraph(&self) -> CommView {
        let mut view = CommView::default();
        for e in self.edges_on(EdgeLayer::COMMUNICATION) {
            view.members.insert(e.src.clone());
            view.members.insert(e.dst.clone());
            view.edges.insert((e.src.clone(), e.dst.clone()));
        }
        view
    }

    /// Edge-induced rooted tree on layer `layer` (≥ 1).
    pub fn tree_subgraph(&self, layer: EdgeLayer) -> Result<TreeView, ModelError> {
        self.check_layer(layer)?;
        if layer == EdgeLayer::COMMUNICATION {
            return Err(ModelError::LayerOutOfRange {
                layer,
                count: self.schema.layer_count,
            });
        }
        let mut members = BTreeSet::new();
        let mut parent = BTreeMap::new();
        let mut children: BTreeMap<MemberId, Vec<MemberId>> = BTreeMap::new();
        for e in self.edges_on(layer) {
            members.insert(e.src.clone());
            members.insert(e.dst.clone());
            parent.insert(e.dst.clone(), e.src.clone());
            children
                .entry(e.src.clone())
                .or_default()
                .push(e.dst.clone());
        }
        if members.is_empty() {
            return Err(ModelError::EmptyLayer(layer));
        }
        let roots: Vec<MemberId> = members
            .iter()
            .filter(|m| !parent.contains_key(*m))
            .cloned()
            .collect();
        if roots.len() != 1 {
            return Err(ModelError::MultipleRoots { layer, roots });
        }
        Ok(TreeView {
            layer,
            root: roots[0].clone(),
            members,
            parent,
            children,
        })
    }

    /// Full invariant check: kind typing on layer 0, forests on the other
    /// layers, attribute schemas, and index consistency.
    pub fn validate(&self) -> Result<(), ModelError> {
        for m in self.members.values() {
            self.check_attrs(&m.id, m.kind, &m.attrs)?;
        }
        let mut in_deg: BTreeMap<(EdgeLayer, &MemberId), usize> = BTreeMap::new();
        for e in &self.edges {
            self.check_layer(e.layer)?;
            let sk = self.kind(&e.src)?;
            let dk = self.kind(&e.dst)?;
            if e.src == e.dst {
                return Err(ModelError::SelfLoop(e.src.clone()));
            }
            if e.layer == EdgeLayer::COMMUNICATION {
                if sk == MemberKind::Passive && dk == MemberKind::Passive {
                    return Err(ModelError::KindViolation {
                        src: e.src.clone(),
                        dst: e.dst.clone(),
                    });
                }
            } else {
                let d = in_deg.entry((e.layer, &e.dst)).or_default();
                *d += 1;
                if *d > 1 {
                    return Err(ModelError::TreeViolation {
                        src: e.src.clone(),
                        dst: e.dst.clone(),
                        layer: e.layer,
                        reason: "destination already has a parent",
                    });
                }
            }
            if !self.has_edge(&e.src, &e.dst, e.layer) {
                return Err(ModelError::Malformed(format!("index misses edge {e:?}")));
            }
        }
        let indexed: usize = self
            .succ
            .iter()
            .flat_map(|adj| adj.values())
            .map(BTreeSet::len)
            .sum();
        if indexed != self.edges.len() {
            return Err(ModelError::Malformed("stale adjacency index".into()));
        }
        // cycles: with in-degree ≤ 1, following parents from any node must terminate
        for layer in 1..self.schema.layer_count {
            let layer = EdgeLayer(layer);
            for start in self.pred[layer.index()].keys() {
                let mut cur = start;
                let mut steps = 0usize;
                while let Some(p) = self.parent(layer, cur) {
                    steps += 1;
                    if p == start || steps > self.members.len() {
                        return Err(ModelError::TreeViolation {
                            src: p.clone(),
                            dst: cur.clone(),
                            layer,
                            reason: "cycle",
                        });
                    }
                    cur = p;
                }
            }
        }
        Ok(())
    }

    pub fn to_topology(&self) -> TopologyFile {
        TopologyFile {
            schema: self.schema.clone(),
            members: self.members.values().cloned().collect(),
            edges: self.edges.iter().cloned().collect(),
        }
    }

    pub fn from_topology(topo: TopologyFile) -> Result<Self, ModelError> {
        let mut g = SystemGraph::new(topo.schema)?;
        for m in topo.members {
            g.add_member(m.id, m.kind, m.attrs)?;
        }
        for e in topo.edges {
            g.add_edge(e.src, e.dst, e.layer)?;
        }
        Ok(g)
    }

    /// Canonical pretty JSON topology document.
    pub fn to_json(&self) -> String {
        let mut s = canonical::to_string(&self.to_topology(), true)
            .expect("topology is always serializable");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let topo: TopologyFile =
            serde_json::from_str(text).map_err(|e| ModelError::Malformed(e.to_string()))?;
        Self::from_topology(topo)
    }
}

/// Serialized form of a [`SystemGraph`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyFile {
    pub schema: GraphSchema,
    pub members: Vec<Member>,
    pub edges: Vec<Edge>,
}

/// Layer-0 edge-induced subgraph.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CommView {
    pub members: BTreeSet<MemberId>,
    pub edges: BTreeSet<(MemberId, MemberId)>,
}

/// Rooted tree over one relationship layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeView {
    pub layer: EdgeLayer,
    pub root: MemberId,
    pub members: BTreeSet<MemberId>,
    parent: BTreeMap<MemberId, MemberId>,
    children: BTreeMap<MemberId, Vec<MemberId>>,
}

impl TreeView {
    pub fn parent(&self, id: &MemberId) -> Option<&MemberId> {
        self.parent.get(id)
    }

    /// Children sorted by id.
    pub fn children(&self, id: &MemberId) -> &[MemberId] {
        self.children.get(id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn is_leaf(&self, id: &MemberId) -> bool {
        self.children(id).is_empty()
    }

    /// Members in post-order (children before parents, siblings by id).
    pub fn post_order(&self) -> Vec<MemberId> {
        let mut out = Vec::with_capacity(self.members.len());
        let mut stack = vec![(self.root.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                out.push(node);
                continue;
            }
            stack.push((node.clone(), true));
            for c in self.children(&node).iter().rev() {
                stack.push((c.clone(), false));
            }
        }
        out
    }
}

/// Single-writer, multi-reader handle. Readers take an immutable snapshot;
/// a mutation is applied to a private copy and published only if it
/// succeeds, so readers never observe half-applied changes.
#[derive(Debug, Clone)]
pub struct SharedGraph {
    inner: Arc<RwLock<Arc<SystemGraph>>>,
}

impl SharedGraph {
    pub fn new(graph: SystemGraph) -> Self {
        SharedGraph {
            inner: Arc::new(RwLock::new(Arc::new(graph))),
        }
    }

    pub fn snapshot(&self) -> Arc<SystemGraph> {
        self.inner.read().expect("graph lock poisoned").clone()
    }

    pub fn update<T, E>(&self, f: impl FnOnce(&mut SystemGraph) -> Result<T, E>) -> Result<T, E> {
        let mut guard = self.inner.write().expect("graph lock poisoned");
        let mut next = (**guard).clone();
        let out = f(&mut next)?;
        *guard = Arc::new(next);
        Ok(out)
    }
}
