use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "phase,batch,actor_loss,critic_loss,return,mse";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Bc,
    Ppo,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Bc => "bc",
            Phase::Ppo => "ppo",
        })
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bc" => Ok(Phase::Bc),
            "ppo" => Ok(Phase::Ppo),
            other => Err(Error::Format(format!("unknown phase {other:?}"))),
        }
    }
}

/// One optimizer step's losses.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub phase: Phase,
    pub batch: usize,
    pub actor_loss: f64,
    pub critic_loss: f64,
    /// Mean rollout return (PPO only).
    pub ret: Option<f64>,
    /// Action mean squared error (BC only).
    pub mse: Option<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn metrics_to_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{},{}", r.phase, r.batch, r.actor_loss, r.critic_loss, opt(r.ret), opt(r.mse));
    }
    out
}

pub fn metrics_from_csv(text: &str) -> Result<Vec<MetricRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Format("metrics header mismatch".into()));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Format(format!("bad number {s:?}: {e}")));
    let opt_num = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(Error::Format(format!("metrics row {line:?} has {} fields", f.len())));
            }
            Ok(MetricRow {
                phase: f[0].parse()?,
                batch: f[1].parse().map_err(|e| Error::Format(format!("bad batch {:?}: {e}", f[1])))?,
                actor_loss: num(f[2])?,
                critic_loss: num(f[3])?,
                ret: opt_num(f[4])?,
                mse: opt_num(f[5])?,
            })
        })
        .collect()
}

/// Means of the first and last `width` entries.
pub fn window_ends(values: &[f64], width: usize) -> Option<(f64, f64)> {
    if width == 0 || values.len() < width {
        return None;
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Some((mean(&values[..width]), mean(&values[values.len() - width..])))
}
