//! Expert episodes and their line-delimited file format.
//!
//! The first line is the version header; every following line is one JSON
//! episode record. Floats are written in shortest round-trip form.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::Observation;
use crate::numerics::{derive_seed, Tensor};
use crate::policy::ActionVec;

use super::world::{Env, Task};

pub const EPISODE_HEADER: &str = "XLPOLICY-EPISODES v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub obs: Observation,
    pub action: ActionVec,
    pub reward: f64,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub seed: u64,
    pub task: Task,
    pub success: bool,
    pub steps: Vec<Step>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn total_return(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.steps.len();
        if n == 0 {
            return Err(Error::Format(format!("episode {} has no steps", self.seed)));
        }
        if self.steps.iter().filter(|s| s.done).count() != 1 || !self.steps[n - 1].done {
            return Err(Error::Format(format!("episode {} must end with exactly one terminal step", self.seed)));
        }
        if self.steps.iter().any(|s| !s.reward.is_finite() || s.action.iter().any(|v| !v.is_finite())) {
            return Err(Error::Format(format!("episode {} has non-finite values", self.seed)));
        }
        Ok(())
    }
}

/// Runs the scripted expert from a fresh reset.
pub fn record_expert_episode(env: &Env, task: Task, seed: u64) -> Result<Episode> {
    let (mut state, mut obs) = env.reset(task, seed);
    let mut steps = Vec::new();
    loop {
        let action = env.expert_action(&state)?;
        let r = env.step(&state, &action)?;
        steps.push(Step { obs, action, reward: r.reward, done: r.done });
        state = r.state;
        obs = r.obs;
        if r.done {
            break;
        }
    }
    Ok(Episode { seed, task, success: state.success, steps })
}

/// `n` expert episodes, tasks assigned round-robin, seeds derived from `seed`.
pub fn gen_dataset(env: &Env, n: usize, tasks: &[Task], seed: u64) -> Result<Vec<Episode>> {
    if n == 0 {
        return Err(Error::contract("dataset needs at least one episode"));
    }
    if tasks.is_empty() {
        return Err(Error::contract("dataset needs at least one task"));
    }
    (0..n)
        .map(|i| {
            let task = tasks[i % tasks.len()];
            let ep = record_expert_episode(env, task, derive_seed(seed, i as u64))?;
            if !ep.success {
                return Err(Error::State(format!("expert failed {task} episode {i}")));
            }
            Ok(ep)
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorRecord {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TensorRecord {
    fn from_opt(t: &Option<Tensor>) -> Result<Self> {
        let t = t.as_ref().ok_or_else(|| Error::contract("cannot store an observation with a missing modality"))?;
        Ok(Self { shape: t.shape().to_vec(), data: t.data().to_vec() })
    }

    fn into_tensor(self) -> Result<Tensor> {
        Tensor::new(self.shape, self.data).map_err(|e| Error::Format(e.to_string()))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StepRecord {
    rgbd: TensorRecord,
    lidar: TensorRecord,
    touch: TensorRecord,
    action: ActionVec,
    reward: f64,
    done: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EpisodeRecord {
    seed: u64,
    task: Task,
    success: bool,
    steps: Vec<StepRecord>,
}

fn to_record(ep: &Episode) -> Result<EpisodeRecord> {
    let steps = ep
        .steps
        .iter()
        .map(|s| {
            Ok(StepRecord {
                rgbd: TensorRecord::from_opt(&s.obs.rgbd)?,
                lidar: TensorRecord::from_opt(&s.obs.lidar)?,
                touch: TensorRecord::from_opt(&s.obs.touch)?,
                action: s.action,
                reward: s.reward,
                done: s.done,
            })
        })
        .collect::<Result<_>>()?;
    Ok(EpisodeRecord { seed: ep.seed, task: ep.task, success: ep.success, steps })
}

fn from_record(r: EpisodeRecord) -> Result<Episode> {
    let steps = r
        .steps
        .into_iter()
        .map(|s| {
            Ok(Step {
                obs: Observation::new(s.rgbd.into_tensor()?, s.lidar.into_tensor()?, s.touch.into_tensor()?),
                action: s.action,
                reward: s.reward,
                done: s.done,
            })
        })
        .collect::<Result<_>>()?;
    let ep = Episode { seed: r.seed, task: r.task, success: r.success, steps };
    ep.validate()?;
    Ok(ep)
}

pub fn encode_episodes(episodes: &[Episode]) -> Result<String> {
    let mut out = String::from(EPISODE_HEADER);
    out.push('\n');
    for ep in episodes {
        ep.validate()?;
        out.push_str(&serde_json::to_string(&to_record(ep)?).map_err(|e| Error::Format(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path.file_name().ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = name.to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn save_episodes(path: &Path, episodes: &[Episode]) -> Result<()> {
    write_atomic(path, encode_episodes(episodes)?.as_bytes())
}

pub fn load_episodes(path: &Path) -> Result<Vec<Episode>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header = match lines.next() {
        Some(line) => line.map_err(|e| Error::io(path, e))?,
        None => return Err(Error::Format(format!("{} is empty", path.display()))),
    };
    if header.trim_end() != EPISODE_HEADER {
        return Err(Error::Format(format!("{}: unsupported episode file version {header:?}", path.display())));
    }
    let mut episodes = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EpisodeRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{} line {}: {e}", path.display(), i + 2)))?;
        episodes.push(from_record(rec)?);
    }
    Ok(episodes)
}
