//! Seeded generators and linear-scan oracles shared by the integration
//! suites. Oracles only look at the generator's own record of accepted
//! edges, never at the graph's indexes.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shadow_rca::model::{Direction, KindFilter};
use shadow_rca::{AttributeVector, EdgeLayer, GraphSchema, MemberId, MemberKind, SystemGraph};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn schema(layers: u32) -> GraphSchema {
    GraphSchema::new(["cpu", "mem"], ["queue"], layers)
}

pub fn attrs_for(kind: MemberKind, r: &mut ChaCha8Rng) -> AttributeVector {
    match kind {
        MemberKind::Active => AttributeVector::new()
            .with("cpu", r.random_range(0..100) as f64)
            .with("mem", r.random_range(0..100) as f64),
        MemberKind::Passive => AttributeVector::new().with("queue", r.random_range(0..100) as f64),
    }
}

/// A random graph plus the generator's own record of what was accepted.
pub struct Generated {
    pub graph: SystemGraph,
    pub kinds: BTreeMap<MemberId, MemberKind>,
    /// Accepted edges (src, dst, layer), no duplicates.
    pub edges: Vec<(MemberId, MemberId, u32)>,
}

impl Generated {
    pub fn layer(&self, l: u32) -> impl Iterator<Item = (&MemberId, &MemberId)> {
        self.edges
            .iter()
            .filter(move |e| e.2 == l)
            .map(|e| (&e.0, &e.1))
    }
}

/// Random members and random edge attempts across `layers` layers. Rejected
/// attempts are dropped.
pub fn random_graph(r: &mut ChaCha8Rng, max_members: usize, layers: u32) -> Generated {
    let n = r.random_range(1..=max_members);
    let mut graph = SystemGraph::new(schema(layers)).unwrap();
    let mut kinds = BTreeMap::new();
    for i in 0..n {
        let kind = if r.random_bool(0.6) {
            MemberKind::Active
        } else {
            MemberKind::Passive
        };
        let id = MemberId::new(format!("m{i}"));
        graph
            .add_member(id.clone(), kind, attrs_for(kind, r))
            .unwrap();
        kinds.insert(id, kind);
    }
    let ids: Vec<MemberId> = kinds.keys().cloned().collect();
    let mut edges = Vec::new();
    let attempts = r.random_range(0..=3 * n);
    for _ in 0..attempts {
        let s = ids[r.random_range(0..n)].clone();
        let d = ids[r.random_range(0..n)].clone();
        let l = r.random_range(0..layers);
        let dup = edges
            .iter()
            .any(|e: &(MemberId, MemberId, u32)| e.0 == s && e.1 == d && e.2 == l);
        if graph.add_edge(s.clone(), d.clone(), EdgeLayer(l)).is_ok() && !dup {
            edges.push((s, d, l));
        }
    }
    Generated {
        graph,
        kinds,
        edges,
    }
}

pub fn admits(f: KindFilter, k: MemberKind) -> bool {
    match f {
        KindFilter::All => true,
        KindFilter::ActiveOnly => k == MemberKind::Active,
        KindFilter::PassiveOnly => k == MemberKind::Passive,
    }
}

pub fn neighbors_oracle(
    g: &Generated,
    id: &MemberId,
    dir: Direction,
    f: KindFilter,
) -> BTreeSet<MemberId> {
    let mut out = BTreeSet::new();
    for (s, d) in g.layer(0) {
        let other = match dir {
            Direction::Predecessors if d == id => s,
            Direction::Successors if s == id => d,
            _ => continue,
        };
        if admits(f, g.kinds[other]) {
            out.insert(other.clone());
        }
    }
    out
}

pub fn comm_oracle(g: &Generated) -> (BTreeSet<MemberId>, BTreeSet<(MemberId, MemberId)>) {
    let mut members = BTreeSet::new();
    let mut edges = BTreeSet::new();
    for (s, d) in g.layer(0) {
        members.insert(s.clone());
        members.insert(d.clone());
        edges.insert((s.clone(), d.clone()));
    }
    (members, edges)
}

/// Join of E_pub with E_sub plus E_send, in the requested direction.
pub fn active_peers_oracle(g: &Generated, id: &MemberId, dir: Direction) -> BTreeSet<MemberId> {
    let e0: Vec<(&MemberId, &MemberId)> = g.layer(0).collect();
    let active = |m: &MemberId| g.kinds[m] == MemberKind::Active;
    let passive = |m: &MemberId| g.kinds[m] == MemberKind::Passive;
    let mut out = BTreeSet::new();
    for &(s, d) in &e0 {
        let (from, to) = match dir {
            Direction::Successors => (s, d),
            Direction::Predecessors => (d, s),
        };
        if from != id {
            continue;
        }
        if active(to) {
            out.insert(to.clone());
        } else if passive(to) {
            for &(s2, d2) in &e0 {
                let (from2, to2) = match dir {
                    Direction::Successors => (s2, d2),
                    Direction::Predecessors => (d2, s2),
                };
                if from2 == to && active(to2) {
                    out.insert(to2.clone());
                }
            }
        }
    }
    out
}

/// Parent map and root set of a tree layer by scanning the edge record.
pub fn tree_oracle(
    g: &Generated,
    l: u32,
) -> (
    BTreeMap<MemberId, MemberId>,
    BTreeSet<MemberId>,
    BTreeSet<MemberId>,
) {
    let mut parent = BTreeMap::new();
    let mut members = BTreeSet::new();
    for (s, d) in g.layer(l) {
        parent.insert(d.clone(), s.clone());
        members.insert(s.clone());
        members.insert(d.clone());
    }
    let roots = members
        .iter()
        .filter(|m| !parent.contains_key(*m))
        .cloned()
        .collect();
    (parent, members, roots)
}

/// Independent tree-layer check: in-degree ≤ 1 and no cycles.
pub fn tree_layer_ok(edges: &[(MemberId, MemberId, u32)], l: u32) -> bool {
    let mut parent: BTreeMap<&MemberId, &MemberId> = BTreeMap::new();
    for (s, d, layer) in edges {
        if *layer != l {
            continue;
        }
        if parent.insert(d, s).is_some() {
            return false;
        }
    }
    for start in parent.keys() {
        let mut seen = BTreeSet::new();
        let mut cur = *start;
        while let Some(p) = parent.get(cur) {
            if !seen.insert(*p) || p == start {
                return false;
            }
            cur = p;
        }
    }
    true
}

/// A random rooted tree on layer 1 with shuffled ids. Returns the graph and
/// the generator's child lists.
pub struct RandomTree {
    pub graph: SystemGraph,
    pub root: MemberId,
    pub children: BTreeMap<MemberId, Vec<MemberId>>,
    pub theta: BTreeMap<MemberId, AttributeVector>,
}

pub fn random_tree(r: &mut ChaCha8Rng, n: usize, integer: bool) -> RandomTree {
    let mut names: Vec<MemberId> = (0..n).map(|i| MemberId::new(format!("v{i:04}"))).collect();
    for i in (1..n).rev() {
        let j = r.random_range(0..=i);
        names.swap(i, j);
    }
    let mut graph = SystemGraph::new(schema(2)).unwrap();
    let mut theta = BTreeMap::new();
    for id in &names {
        let kind = if r.random_bool(0.7) {
            MemberKind::Active
        } else {
            MemberKind::Passive
        };
        let a = match (kind, integer) {
            (MemberKind::Active, true) => attrs_for(kind, r),
            (MemberKind::Passive, true) => attrs_for(kind, r),
            (MemberKind::Active, false) => AttributeVector::new()
                .with("cpu", r.random_range(-1e3..1e3))
                .with("mem", r.random_range(0.0..1.0)),
            (MemberKind::Passive, false) => {
                AttributeVector::new().with("queue", r.random_range(-50.0..50.0))
            }
        };
        graph.add_member(id.clone(), kind, a.clone()).unwrap();
        theta.insert(id.clone(), a);
    }
    let mut children: BTreeMap<MemberId, Vec<MemberId>> = BTreeMap::new();
    for i in 1..n {
        let p = r.random_range(0..i);
        graph
            .add_edge(names[p].clone(), names[i].clone(), EdgeLayer(1))
            .unwrap();
        children
            .entry(names[p].clone())
            .or_default()
            .push(names[i].clone());
    }
    RandomTree {
        graph,
        root: names[0].clone(),
        children,
        theta,
    }
}

/// Recursive post-order ψ: each node's value is the sum over its children of
/// (child's ψ + child's θ). Absent fields count as zero.
pub fn psi_oracle(t: &RandomTree, fields: &[&str]) -> BTreeMap<MemberId, BTreeMap<String, f64>> {
    fn go(
        t: &RandomTree,
        v: &MemberId,
        fields: &[&str],
        out: &mut BTreeMap<MemberId, BTreeMap<String, f64>>,
    ) -> BTreeMap<String, f64> {
        let mut acc: BTreeMap<String, f64> = fields.iter().map(|f| (f.to_string(), 0.0)).collect();
        let mut kids = t.children.get(v).cloned().unwrap_or_default();
        kids.sort();
        for c in kids {
            let below = go(t, &c, fields, out);
            for f in fields {
                let th = t.theta[&c].get(f).unwrap_or(0.0);
                *acc.get_mut(*f).unwrap() += below[*f] + th;
            }
        }
        out.insert(v.clone(), acc.clone());
        acc
    }
    let mut out = BTreeMap::new();
    go(t, &t.root, fields, &mut out);
    out
}

/// Direct evaluation of the three expansion equations on raw sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SetState {
    pub members: BTreeSet<MemberId>,
    pub edges: BTreeSet<(MemberId, MemberId)>,
    pub watch: BTreeSet<MemberId>,
}

pub fn expand_oracle(s: &SetState, e0: &[(MemberId, MemberId)], m: &MemberId) -> SetState {
    let mut members = s.members.clone();
    members.insert(m.clone());
    let mut edges = s.edges.clone();
    for (p, d) in e0 {
        if d == m && s.members.contains(p) {
            edges.insert((p.clone(), d.clone()));
        }
    }
    let mut watch = s.watch.clone();
    for (a, b) in e0 {
        if a == m {
            watch.insert(b.clone());
        }
    }
    SetState {
        members,
        edges,
        watch,
    }
}
