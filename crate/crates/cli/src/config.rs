//! Run configuration file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use xlpolicy_core::learn::TrainConfig;
use xlpolicy_core::model::ModelConfig;
use xlpolicy_core::policy::{ActionSpec, ActionVec};
use xlpolicy_core::sim::{Env, SimConfig, Task};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Drives every command; replaces `train.seed` when training.
    pub seed: u64,
    pub paths: PathsConfig,
    pub sim: SimConfig,
    pub model: ModelConfig,
    pub action: ActionConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
}

/// Default locations; `--in` and `--out` override them per command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
    /// Directory that receives every command's outputs.
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { dataset: "runs/episodes.jsonl".into(), checkpoint: "runs/model.ckpt".into(), out_dir: "runs".into() }
    }
}

/// Either an explicit vocabulary or the standard grid built from step sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ActionConfig {
    /// Translation per move; the sim cell size when absent.
    pub step: Option<f64>,
    pub yaw_step: f64,
    pub vocabulary: Option<Vec<ActionVec>>,
}

impl Default for ActionConfig {
    fn default() -> Self {
        Self { step: None, yaw_step: std::f64::consts::FRAC_PI_2, vocabulary: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub episodes: usize,
    pub tasks: Vec<Task>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { episodes: 200, tasks: Task::ALL.to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Episodes per task.
    pub episodes: usize,
    pub tasks: Vec<Task>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { episodes: 100, tasks: Task::ALL.to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub seq_lengths: Vec<usize>,
    /// Window used by the sparse mode.
    pub window: usize,
    pub warmup: usize,
    pub reps: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { seq_lengths: vec![64, 128, 256, 512], window: 32, warmup: 5, reps: 30 }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Usage(msg) => CliError::Usage(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Usage(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config always serializes")
    }

    pub fn action_spec(&self) -> CliResult<ActionSpec> {
        let spec = match &self.action.vocabulary {
            Some(v) => ActionSpec::new(v.clone())?,
            None => ActionSpec::grid(self.action.step.unwrap_or(self.sim.cell_size), self.action.yaw_step),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn env(&self) -> CliResult<Env> {
        Ok(Env::new(self.sim.clone(), self.model.fusion.clone(), self.action_spec()?)?)
    }

    /// Checks each section and the ways they constrain one another.
    pub fn validate(&self) -> CliResult<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.sim.validate(&self.model.fusion)?;
        self.action_spec()?;
        if self.data.tasks.is_empty() || self.eval.tasks.is_empty() {
            return Err(CliError::Usage("data.tasks and eval.tasks must list at least one task".into()));
        }
        if self.bench.window == 0 || self.bench.reps == 0 || self.bench.seq_lengths.contains(&0) {
            return Err(CliError::Usage("bench.window, bench.reps and bench.seq_lengths must be positive".into()));
        }
        Ok(())
    }
}
