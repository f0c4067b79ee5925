use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use shadow_rca::aggregation::is_process_member;
use shadow_rca::pipeline::{self, TriggerMode};
use shadow_rca::simulator::{self, write_event_log};
use shadow_rca::subgraph::IterationState;
use shadow_rca::trajectory::MethodSelection;
use shadow_rca::{EdgeLayer, MemberKind, SystemGraph};

use crate::config::RunConfig;
use crate::error::{create_dir, read, write, CliError};
use crate::{Methods, Trigger};

pub const TOPOLOGY_FILE: &str = "topology.json";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";

pub fn simulate(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let Some(mut scenario) = cfg.scenario else {
        return Err(CliError::invalid(config, "`simulate` needs a `scenario`"));
    };
    if let Some(s) = seed {
        scenario.seed = s;
    }
    let graph =
        simulator::generate_topology(&scenario).map_err(|e| CliError::invalid(config, e))?;
    let (events, truth) =
        simulator::run(&graph, &scenario, &cfg.faults).map_err(|e| CliError::invalid(config, e))?;

    let out = out.unwrap_or(cfg.out_dir);
    create_dir(&out)?;
    write(&out.join(TOPOLOGY_FILE), &graph.to_json())?;
    write(&out.join(EVENTS_FILE), &write_event_log(&events))?;
    write(&out.join(GROUND_TRUTH_FILE), &truth.to_json())?;
    println!(
        "wrote {} events for {} members to {}",
        events.len(),
        graph.member_count(),
        out.display()
    );
    Ok(())
}

pub struct AnalyzeArgs {
    pub config: PathBuf,
    pub topology: Option<PathBuf>,
    pub events: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub trigger: Option<Trigger>,
    pub methods: Option<Methods>,
}

pub fn analyze(args: AnalyzeArgs) -> Result<(), CliError> {
    let cfg = RunConfig::load(&args.config)?;
    let Some(mut analysis) = cfg.analysis else {
        return Err(CliError::invalid(
            &args.config,
            "`analyze` needs an `analysis` block",
        ));
    };
    if let Some(t) = args.trigger {
        analysis.trigger.mode = match t {
            Trigger::Demand => TriggerMode::Demand,
            Trigger::Quiescence => TriggerMode::Quiescence,
        };
    }
    if let Some(m) = args.methods {
        analysis.trace.methods = match m {
            Methods::Cooccurrence => MethodSelection::CoOccurrence,
            Methods::Timelag => MethodSelection::TimeLag,
            Methods::Both => MethodSelection::Both,
        };
    }
    let out = args.out.unwrap_or_else(|| cfg.out_dir.clone());

    let graph = match args.topology.or(cfg.topology) {
        Some(path) => load_topology(&path)?,
        None => match cfg.scenario {
            Some(mut scenario) => {
                if let Some(s) = args.seed {
                    scenario.seed = s;
                }
                simulator::generate_topology(&scenario)
                    .map_err(|e| CliError::invalid(&args.config, e))?
            }
            None => load_topology(&cfg.out_dir.join(TOPOLOGY_FILE))?,
        },
    };
    let events_path = args
        .events
        .or(cfg.events)
        .unwrap_or_else(|| cfg.out_dir.join(EVENTS_FILE));
    let events = pipeline::parse_event_log(&read(&events_path)?)
        .map_err(|e| CliError::invalid(&events_path, e))?;

    let outcome = pipeline::analyze(graph, &events, &analysis)
        .map_err(|e| CliError::invalid(&events_path, e))?;
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    create_dir(&out)?;
    let table = outcome.report.render_table();
    write(&out.join("report.json"), &outcome.report.to_json())?;
    write(&out.join("report.txt"), &table)?;
    write(&out.join("state.json"), &outcome.state.to_json())?;
    write(&out.join("alerts.jsonl"), &outcome.alerts.to_jsonl())?;
    print!("{table}");
    if outcome.report.has_symptoms() {
        Ok(())
    } else {
        Err(CliError::NoSymptoms)
    }
}

fn load_topology(path: &Path) -> Result<SystemGraph, CliError> {
    SystemGraph::from_json(&read(path)?).map_err(|e| CliError::invalid(path, e))
}

pub fn inspect(path: &Path) -> Result<(), CliError> {
    let text = read(path)?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::invalid(path, e))?;
    // a state dump carries its iteration counter, a topology its schema
    let summary = if value.get("j").is_some() {
        let state = IterationState::from_json(&text).map_err(|e| CliError::invalid(path, e))?;
        describe_state(&state)
    } else if value.get("schema").is_some() {
        describe_topology(&load_topology(path)?)
    } else {
        return Err(CliError::invalid(
            path,
            "neither a state dump nor a topology",
        ));
    };
    print!("{summary}");
    Ok(())
}

fn join<'a>(items: impl Iterator<Item = &'a shadow_rca::MemberId>) -> String {
    items.map(|m| m.as_str()).collect::<Vec<_>>().join(", ")
}

fn describe_state(s: &IterationState) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "j={}, members={}, edges={}",
        s.j,
        s.members.len(),
        s.edges.len()
    );
    let _ = writeln!(
        out,
        "watchlist ({}): {}",
        s.watchlist.len(),
        join(s.watchlist.iter())
    );
    let _ = writeln!(
        out,
        "initial watchlist ({}): {}",
        s.initial_watchlist.len(),
        join(s.initial_watchlist.iter())
    );
    let _ = writeln!(out, "history ({} events):", s.history.len());
    for ev in &s.history {
        let _ = writeln!(out, "  j={} {}", ev.j, ev.member);
    }
    if !s.edges.is_empty() {
        let _ = writeln!(out, "edges:");
        for (a, b) in &s.edges {
            let _ = writeln!(out, "  {a} -> {b}");
        }
    }
    out
}

fn describe_topology(g: &SystemGraph) -> String {
    let mut out = String::new();
    let (mut active, mut passive, mut procs) = (0, 0, 0);
    for m in g.members() {
        if is_process_member(&m.id) {
            procs += 1;
        } else if m.kind == MemberKind::Active {
            active += 1;
        } else {
            passive += 1;
        }
    }
    let _ = writeln!(
        out,
        "members={} ({active} active, {passive} passive)",
        active + passive
    );
    if procs > 0 {
        let _ = writeln!(out, "processes={procs}");
    }
    for l in 0..g.layer_count() {
        let _ = writeln!(out, "layer {l}: {} edges", g.edges_on(EdgeLayer(l)).count());
    }
    out
}
