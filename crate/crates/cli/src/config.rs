use std::path::{Path, PathBuf};

use serde::Deserialize;
use shadow_rca::pipeline::AnalysisConfig;
use shadow_rca::simulator::{FaultSpec, ScenarioSpec};

use crate::error::{read, CliError};

/// One run, as read from `--config`. Relative paths resolve against the
/// config file's directory.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Scenario to simulate; also used by `analyze` when no topology file
    /// is given.
    #[serde(default)]
    pub scenario: Option<ScenarioSpec>,
    #[serde(default)]
    pub faults: Vec<FaultSpec>,
    /// Existing topology file, instead of generating one from `scenario`.
    #[serde(default)]
    pub topology: Option<PathBuf>,
    /// Event log for `analyze`; defaults to `<out_dir>/events.jsonl`.
    #[serde(default)]
    pub events: Option<PathBuf>,
    #[serde(default)]
    pub analysis: Option<AnalysisConfig>,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = read(path)?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| CliError::invalid(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.topology, &mut cfg.events].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if cfg.out_dir.is_relative() {
            cfg.out_dir = base.join(&cfg.out_dir);
        }
        if let Some(t) = &cfg.topology {
            if !t.is_file() {
                return Err(CliError::invalid(
                    path,
                    format!("topology file {} does not exist", t.display()),
                ));
            }
        }
        if cfg.scenario.is_some() && cfg.topology.is_some() {
            return Err(CliError::invalid(
                path,
                "give either `scenario` or `topology`, not both",
            ));
        }
        Ok(cfg)
    }
}
