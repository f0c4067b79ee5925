//! Acceptance gate. Runs every criterion at its stated tolerance and prints
//! one PASS/FAIL line per criterion; exits non-zero if any fails.

mod common;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::*;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use shadow_rca::aggregation::accumulate;
use shadow_rca::detection::{Alert, AlertStore, PluginConfig, ThresholdDirection};
use shadow_rca::model::{Direction, KindFilter, ModelError};
use shadow_rca::pipeline::{analyze, AnalysisConfig, InitConfig, Report};
use shadow_rca::simulator::{
    self, generate_topology, run, write_event_log, FaultSpec, ScenarioSpec, TopologyKind,
};
use shadow_rca::subgraph::IterationState;
use shadow_rca::trajectory::{
    co_occurrence, rank, AlertSeries, CoOccurrenceParams, FaultTrajectory, Method,
};
use shadow_rca::{EdgeLayer, MemberId, MemberKind};

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn runner(seed: u64) -> TestRunner {
    let config = Config {
        cases: 1000,
        failure_persistence: None,
        ..Config::default()
    };
    TestRunner::new_with_rng(
        config,
        proptest::test_runner::TestRng::from_seed(
            proptest::test_runner::RngAlgorithm::ChaCha,
            &[seed as u8; 32],
        ),
    )
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn psi_oracle_equivalence() -> Check {
    let start = Instant::now();
    let fields = ["cpu", "mem", "queue"];
    for case in 0..200u64 {
        let mut r = rng(1000 + case);
        let n = r.random_range(2..=500);
        let integer = case % 2 == 0;
        let t = random_tree(&mut r, n, integer);
        let got = accumulate(&t.graph, EdgeLayer(1), &fields).map_err(|e| e.to_string())?;
        let want = psi_oracle(&t, &fields);
        ensure(got.values.len() == want.len(), || {
            format!("case {case}: node count differs")
        })?;
        for (id, vals) in &want {
            for f in fields {
                let a = got.get(id).and_then(|v| v.get(f)).unwrap_or(f64::NAN);
                let b = vals[f];
                let ok = if integer {
                    a == b
                } else {
                    (a - b).abs() <= 1e-9
                };
                ensure(ok, || format!("case {case} {id}.{f}: {a} vs {b}"))?;
            }
        }
    }
    let took = start.elapsed();
    ensure(took < Duration::from_secs(5), || format!("took {took:?}"))?;
    Ok(format!("200 trees, {took:.2?}"))
}

fn subgraph_exactness() -> Check {
    for case in 0..1000u64 {
        let mut r = rng(2000 + case);
        let g = random_graph(&mut r, 50, 2);
        let e0: Vec<(MemberId, MemberId)> =
            g.layer(0).map(|(a, b)| (a.clone(), b.clone())).collect();
        let ids: Vec<MemberId> = g.kinds.keys().cloned().collect();
        let seeds: Vec<MemberId> = (0..r.random_range(1..=3))
            .map(|_| ids[r.random_range(0..ids.len())].clone())
            .collect();
        let mut state =
            IterationState::init_from_config(&g.graph, &seeds).map_err(|e| e.to_string())?;
        let mut oracle = SetState {
            members: BTreeSet::new(),
            edges: BTreeSet::new(),
            watch: seeds.iter().cloned().collect(),
        };
        for _ in 0..r.random_range(0..=20) {
            let watched: Vec<&MemberId> = oracle.watch.iter().collect();
            let m = watched[r.random_range(0..watched.len())].clone();
            state.expand(&g.graph, &m).map_err(|e| e.to_string())?;
            oracle = expand_oracle(&oracle, &e0, &m);
            let same = state.members == oracle.members
                && state.edges == oracle.edges
                && *state.watchlist.as_set() == oracle.watch;
            ensure(same, || format!("case {case} diverged at j={}", state.j))?;
        }
    }
    Ok("1000 cases".into())
}

fn structural_queries() -> Check {
    for case in 0..1000u64 {
        let mut r = rng(3000 + case);
        let g = random_graph(&mut r, 40, 3);
        for id in g.kinds.keys() {
            for dir in [Direction::Predecessors, Direction::Successors] {
                for f in [
                    KindFilter::All,
                    KindFilter::ActiveOnly,
                    KindFilter::PassiveOnly,
                ] {
                    let got = g.graph.neighbors(id, dir, f).map_err(|e| e.to_string())?;
                    ensure(got == neighbors_oracle(&g, id, dir, f), || {
                        format!("case {case}: neighbors of {id}")
                    })?;
                }
                if g.kinds[id] == MemberKind::Active {
                    let got = g.graph.active_peers(id, dir).map_err(|e| e.to_string())?;
                    ensure(got == active_peers_oracle(&g, id, dir), || {
                        format!("case {case}: peers of {id}")
                    })?;
                }
            }
        }
        let view = g.graph.comm_subgraph();
        ensure((view.members, view.edges) == comm_oracle(&g), || {
            format!("case {case}: comm subgraph")
        })?;
        for l in 1..3 {
            let (parent, members, roots) = tree_oracle(&g, l);
            match g.graph.tree_subgraph(EdgeLayer(l)) {
                Ok(t) => {
                    let ok = roots.len() == 1
                        && roots.contains(&t.root)
                        && t.members == members
                        && members.iter().all(|m| t.parent(m) == parent.get(m));
                    ensure(ok, || format!("case {case}: tree layer {l}"))?;
                }
                Err(ModelError::EmptyLayer(_)) => ensure(members.is_empty(), || {
                    format!("case {case}: empty layer {l}")
                })?,
                Err(ModelError::MultipleRoots { roots: got, .. }) => {
                    ensure(got.into_iter().collect::<BTreeSet<_>>() == roots, || {
                        format!("case {case}: roots {l}")
                    })?
                }
                Err(e) => return Err(format!("case {case}: {e}")),
            }
        }
    }
    Ok("1000 graphs".into())
}

fn icp_offset_recovery() -> Check {
    let p = CoOccurrenceParams::default();
    let jitter = Normal::new(0.0, 0.05).unwrap();
    let mut hits = 0;
    for trial in 0..100u64 {
        let mut r = rng(4000 + trial);
        let offset = r.random_range(-5.0..=5.0);
        let mut t = 0.0;
        let a: Vec<f64> = (0..20)
            .map(|_| {
                t += r.random_range(1.0..3.0);
                t
            })
            .collect();
        let b: Vec<f64> = a
            .iter()
            .map(|x| x + offset + jitter.sample(&mut r))
            .collect();
        let v = co_occurrence(&AlertSeries::new("a", a), &AlertSeries::new("b", b), &p);
        if (v.offset_or_lag - offset).abs() <= 0.1 {
            hits += 1;
        }
    }
    ensure(hits >= 95, || format!("{hits}/100 within 0.1 s"))?;
    let same = [1.0, 2.0, 3.0];
    let v = co_occurrence(
        &AlertSeries::new("a", same.to_vec()),
        &AlertSeries::new("b", same.to_vec()),
        &p,
    );
    ensure(
        v.strength == 1.0 && v.offset_or_lag == 0.0 && v.dependent,
        || format!("identical series gave {v:?}"),
    )?;
    Ok(format!("{hits}/100 within 0.1 s; identical series exact"))
}

const E2E_KINDS: [TopologyKind; 4] = [
    TopologyKind::Chain,
    TopologyKind::Tree,
    TopologyKind::Diamond,
    TopologyKind::RandomDag,
];

fn e2e_config(seeds: Vec<MemberId>) -> AnalysisConfig {
    let threshold = |field: &str, thr: f64| PluginConfig::Threshold {
        name: format!("{field}-threshold"),
        field: field.into(),
        threshold: thr,
        direction: ThresholdDirection::Above,
        label: None,
        severity: 1.0,
    };
    AnalysisConfig::new(
        vec![
            threshold(simulator::CPU, 0.6),
            threshold(simulator::QUEUE, 30.0),
        ],
        InitConfig::Seeds { members: seeds },
    )
}

/// Simulates and analyzes scenario `i`; returns (root, event log, report).
fn e2e_scenario(i: u64) -> Result<(MemberId, String, Report), String> {
    let kind = E2E_KINDS[i as usize % 4];
    let spec = ScenarioSpec::new(5000 + i, kind, 20);
    let graph = generate_topology(&spec).map_err(|e| e.to_string())?;
    let comps: Vec<MemberId> = graph
        .member_ids()
        .filter(|m| m.as_str().starts_with('c'))
        .cloned()
        .collect();
    let root = comps[rng(6000 + i).random_range(0..comps.len())].clone();
    let mut fault = FaultSpec::new(root.clone(), 5.0);
    fault.lag_mean_s = 0.5;
    fault.lag_std_s = 0.05;
    fault.probability = 1.0;
    let (events, _) = run(&graph, &spec, &[fault]).map_err(|e| e.to_string())?;
    let log = write_event_log(&events);
    let out = analyze(graph, &events, &e2e_config(comps)).map_err(|e| e.to_string())?;
    Ok((root, log, out.report))
}

fn e2e_accuracy() -> Check {
    let mut hits = 0;
    let mut slowest = Duration::ZERO;
    for i in 0..100u64 {
        let start = Instant::now();
        let (root, _, report) = e2e_scenario(i)?;
        let took = start.elapsed();
        slowest = slowest.max(took);
        ensure(took < Duration::from_secs(10), || {
            format!("scenario {i} took {took:?}")
        })?;
        if report.top_root_causes(3).contains(&&root) {
            hits += 1;
        }
    }
    ensure(hits >= 80, || format!("{hits}/100 scenarios"))?;
    Ok(format!("{hits}/100 scenarios, slowest {slowest:.2?}"))
}

fn random_trajectory(r: &mut rand_chacha::ChaCha8Rng) -> FaultTrajectory {
    let len = r.random_range(0..4);
    let members: Vec<MemberId> = (0..=len)
        .map(|_| MemberId::new(format!("m{}", r.random_range(0..4))))
        .collect();
    let strengths: Vec<f64> = (0..len)
        .map(|_| r.random_range(0..3) as f64 / 2.0)
        .collect();
    let avg = if len == 0 {
        0.0
    } else {
        strengths.iter().sum::<f64>() / len as f64
    };
    FaultTrajectory {
        members,
        methods: vec![vec![Method::CoOccurrence]; len],
        strengths,
        avg_strength: avg,
        length: len,
    }
}

fn invariant_suite() -> Check {
    let seeds = any::<u64>();
    let fail = |name: &str, e: proptest::test_runner::TestError<u64>| format!("{name}: {e}");

    runner(1)
        .run(&seeds, |s| {
            let g = random_graph(&mut rng(s), 30, 2);
            for e in g.graph.edges_on(EdgeLayer(0)) {
                let pp = g.kinds[&e.src] == MemberKind::Passive
                    && g.kinds[&e.dst] == MemberKind::Passive;
                prop_assert!(!pp);
            }
            Ok(())
        })
        .map_err(|e| fail("layer-0 typing", e))?;

    runner(2)
        .run(&seeds, |s| {
            let g = random_graph(&mut rng(s), 30, 3);
            prop_assert!(g.graph.validate().is_ok());
            for l in 1..3 {
                prop_assert!(tree_layer_ok(&g.edges, l));
            }
            Ok(())
        })
        .map_err(|e| fail("tree layers", e))?;

    runner(3)
        .run(&seeds, |s| {
            let mut r = rng(s);
            let mut store = AlertStore::new();
            let mut log = Vec::new();
            for _ in 0..r.random_range(0..100) {
                let a = Alert {
                    origin: MemberId::new(format!("m{}", r.random_range(0..5))),
                    timestamp: r.random_range(0..100) as f64 / 4.0,
                    label: "x".into(),
                    severity: 1.0,
                };
                let prefix = store.all().to_vec();
                store.record(a.clone());
                log.push(a);
                prop_assert_eq!(&store.all()[..prefix.len()], &prefix[..]);
            }
            prop_assert_eq!(store.all(), &log[..]);
            for m in 0..5 {
                let ts = store.series(&MemberId::new(format!("m{m}")), None, None);
                prop_assert!(ts.windows(2).all(|w| w[0] <= w[1]));
            }
            Ok(())
        })
        .map_err(|e| fail("alert store", e))?;

    runner(4)
        .run(&seeds, |s| {
            let mut r = rng(s);
            let g = random_graph(&mut r, 40, 1);
            let ids: Vec<MemberId> = g.kinds.keys().cloned().collect();
            let first = ids[r.random_range(0..ids.len())].clone();
            let mut state = IterationState::init_from_config(&g.graph, &[first]).unwrap();
            for _ in 0..r.random_range(0..=20) {
                let watched: Vec<MemberId> = state.watchlist.iter().cloned().collect();
                let before = state.clone();
                state
                    .expand(&g.graph, &watched[r.random_range(0..watched.len())])
                    .unwrap();
                prop_assert!(state.is_closed());
                prop_assert!(before.members.is_subset(&state.members));
                prop_assert!(before.edges.is_subset(&state.edges));
                prop_assert!(before.watchlist.is_subset(&state.watchlist));
            }
            Ok(())
        })
        .map_err(|e| fail("subgraph closure/monotonicity", e))?;

    runner(5)
        .run(&seeds, |s| {
            let mut r = rng(s);
            let trajs: Vec<FaultTrajectory> = (0..r.random_range(0..25))
                .map(|_| random_trajectory(&mut r))
                .collect();
            let ranked = rank(trajs.clone());
            let mut shuffled = trajs;
            for i in (1..shuffled.len()).rev() {
                shuffled.swap(i, r.random_range(0..=i));
            }
            prop_assert_eq!(rank(shuffled), ranked);
            Ok(())
        })
        .map_err(|e| fail("rank", e))?;

    Ok("5 properties x 1000 cases".into())
}

fn determinism() -> Check {
    for i in 0..100u64 {
        let (_, log_a, report_a) = e2e_scenario(i)?;
        let (_, log_b, report_b) = e2e_scenario(i)?;
        ensure(log_a == log_b, || {
            format!("scenario {i}: event logs differ")
        })?;
        ensure(report_a.to_json() == report_b.to_json(), || {
            format!("scenario {i}: reports differ")
        })?;
    }
    Ok("100 scenarios repeated byte-identically".into())
}

fn main() {
    let criteria: [Criterion; 7] = [
        ("AC1 psi oracle equivalence", psi_oracle_equivalence),
        ("AC2 subgraph rule exactness", subgraph_exactness),
        ("AC3 structural queries", structural_queries),
        ("AC4 1D-ICP offset recovery", icp_offset_recovery),
        ("AC5 end-to-end RCA accuracy", e2e_accuracy),
        ("AC6 invariant suite", invariant_suite),
        ("AC7 determinism", determinism),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let outcome =
            catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
