//! Scenario configuration in TOML.
//!
//! ```toml
//! scenario = "system_id"      # or "gridworld"
//! N = 10
//! d = 5
//! seed = 1
//! horizon = 100000
//! stride = 100
//! noise_clip = 3.0
//! topology = "line"           # "ring", "complete", "star" or { edges = [[0, 1], ...] }
//!
//! [step]
//! kind = "diminishing"        # or "constant"
//! eps = 1.0
//! shift = 50.0
//!
//! [time_varying]              # optional; replaces `topology`
//! period_B = 2
//! frames = [[[0, 1]], [[1, 2]]]
//! ```
//!
//! Gridworld runs add `mazes = ["a.txt", ...]` (one per agent, relative to
//! the config file), `gamma` and `eval_batch`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::algorithm::{StepKind, StepSchedule};
use crate::graph::Graph;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{0}")]
    Syntax(String),
    #[error("{0}")]
    Semantic(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    SystemId,
    Gridworld,
}

/// Named topology or explicit edge list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TopologySpec {
    Named(String),
    Edges { edges: Vec<[usize; 2]> },
}

impl TopologySpec {
    pub fn build(&self, n: usize) -> Result<Graph, ConfigError> {
        let graph = match self {
            TopologySpec::Named(name) => match name.as_str() {
                "line" => Graph::line(n),
                "ring" => Graph::ring(n),
                "complete" => Graph::complete(n),
                "star" => Graph::star(n),
                other => return Err(ConfigError::Semantic(format!(
                    "topology must be line, ring, complete, star or an edge table, got \"{other}\""
                ))),
            },
            TopologySpec::Edges { edges } => Graph::new(n, edges.iter().map(|e| (e[0], e[1]))),
        };
        graph.map_err(|e| ConfigError::Semantic(format!("topology: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeVaryingSpec {
    #[serde(rename = "period_B")]
    pub period_b: usize,
    /// Edge list of each frame.
    pub frames: Vec<Vec<[usize; 2]>>,
}

impl TimeVaryingSpec {
    pub fn build(&self, n: usize) -> Result<Vec<Graph>, ConfigError> {
        self.frames
            .iter()
            .enumerate()
            .map(|(idx, edges)| {
                Graph::new(n, edges.iter().map(|e| (e[0], e[1])))
                    .map_err(|e| ConfigError::Semantic(format!("time_varying.frames[{idx}]: {e}")))
            })
            .collect()
    }
}

fn default_n() -> usize {
    10
}
fn default_d() -> usize {
    5
}
fn default_horizon() -> usize {
    100_000
}
fn default_stride() -> usize {
    100
}
fn default_clip() -> f64 {
    3.0
}
fn default_topology() -> TopologySpec {
    TopologySpec::Named("line".into())
}
fn default_step() -> StepSchedule {
    StepSchedule {
        kind: StepKind::Diminishing,
        eps: 1.0,
        shift: 50.0,
    }
}
fn default_grid() -> Vec<f64> {
    vec![0.1, 0.01, 0.001]
}
fn default_gamma() -> f64 {
    0.9
}
fn default_eval_batch() -> usize {
    200
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: ScenarioKind,
    #[serde(rename = "N", default = "default_n")]
    pub n_agents: usize,
    #[serde(default = "default_d")]
    pub d: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default = "default_clip")]
    pub noise_clip: f64,
    /// ε grid over which the mixing constant β is fitted.
    #[serde(default = "default_grid")]
    pub mixing_grid: Vec<f64>,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default)]
    pub mazes: Vec<PathBuf>,
    #[serde(default = "default_eval_batch")]
    pub eval_batch: usize,
    #[serde(default = "default_topology")]
    pub topology: TopologySpec,
    #[serde(default = "default_step")]
    pub step: StepSchedule,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_varying: Option<TimeVaryingSpec>,
    /// Directory that relative maze paths are resolved against.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl ScenarioConfig {
    /// Defaults for a scenario kind.
    pub fn new(scenario: ScenarioKind) -> Self {
        Self {
            scenario,
            n_agents: default_n(),
            d: default_d(),
            seed: 0,
            horizon: default_horizon(),
            stride: default_stride(),
            noise_clip: default_clip(),
            mixing_grid: default_grid(),
            gamma: default_gamma(),
            mazes: Vec::new(),
            eval_batch: default_eval_batch(),
            topology: default_topology(),
            step: default_step(),
            time_varying: None,
            base_dir: None,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: &str| Err(ConfigError::Semantic(msg.to_string()));
        if self.n_agents < 1 {
            return fail("N must be ≥ 1");
        }
        if self.d < 1 {
            return fail("d must be ≥ 1");
        }
        if self.stride < 1 {
            return fail("stride must be ≥ 1");
        }
        if !(self.noise_clip >= 0.0 && self.noise_clip.is_finite()) {
            return fail("noise_clip must be a non-negative number");
        }
        if !(self.step.eps > 0.0 && self.step.eps.is_finite()) {
            return fail("step.eps must be positive");
        }
        if !(self.step.shift >= 0.0 && self.step.shift.is_finite()) {
            return fail("step.shift must be non-negative");
        }
        if self.mixing_grid.is_empty() || self.mixing_grid.iter().any(|&e| !(e > 0.0 && e < 1.0)) {
            return fail("mixing_grid must be a non-empty list of values in (0, 1)");
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return fail("gamma must lie in (0, 1)");
        }
        if self.eval_batch < 1 {
            return fail("eval_batch must be ≥ 1");
        }
        if self.scenario == ScenarioKind::Gridworld {
            if self.mazes.is_empty() {
                return fail("mazes must list one maze file per agent");
            }
            if self.mazes.len() != self.n_agents {
                return Err(ConfigError::Semantic(format!(
                    "N must equal the number of mazes ({} vs {})",
                    self.n_agents,
                    self.mazes.len()
                )));
            }
        }
        if let Some(tv) = &self.time_varying {
            if tv.period_b < 1 {
                return fail("time_varying.period_B must be ≥ 1");
            }
            if tv.frames.is_empty() {
                return fail("time_varying.frames must not be empty");
            }
            tv.build(self.n_agents)?;
        } else {
            self.topology.build(self.n_agents)?;
        }
        Ok(())
    }

    /// Maze path resolved against the config directory.
    pub fn maze_path(&self, idx: usize) -> PathBuf {
        let p = &self.mazes[idx];
        match &self.base_dir {
            Some(dir) if p.is_relative() => dir.join(p),
            _ => p.clone(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Parses and validates a config.
pub fn parse_config(text: &str) -> Result<ScenarioConfig, ConfigError> {
    let cfg: ScenarioConfig =
        toml::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads a config file; relative maze paths resolve against its directory.
pub fn load_config(path: &Path) -> Result<ScenarioConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut cfg = parse_config(&text)?;
    cfg.base_dir = path.parent().map(Path::to_path_buf);
    Ok(cfg)
}
