//! Training: losses, advantage estimation, augmentation, the behaviour
//! cloning and PPO loops, and evaluation.

mod augment;
mod bc;
mod eval;
mod gae;
mod losses;
mod metrics;
mod ppo;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::Task;

pub use augment::{augment, crop_resize, rotate, translate, AugmentConfig, AugmentParams};
pub use bc::train_bc;
pub use eval::{evaluate, Controller, EvalReport, ExpertController, ModelController};
pub use gae::{discounted_returns, gae, Advantage};
pub use losses::{bc_loss, bc_loss_graph, critic_loss, critic_loss_graph, ppo_loss_graph, ppo_term};
pub use metrics::{metrics_from_csv, metrics_to_csv, window_ends, MetricRow, Phase, METRICS_HEADER};
pub use ppo::{train_ppo, PpoOutcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Adam step size for behaviour cloning.
    pub lr: f64,
    /// Adam step size for PPO fine-tuning.
    pub ppo_lr: f64,
    pub clip_eps: f64,
    pub gamma: f64,
    pub lam: f64,
    /// Minimum timesteps per minibatch; whole episodes are packed until reached.
    pub batch_size: usize,
    /// PPO passes over each rollout.
    pub epochs: usize,
    pub seed: u64,
    /// Behaviour cloning optimizer steps.
    pub bc_steps: usize,
    pub ppo_iterations: usize,
    /// Minimum environment steps collected per PPO iteration.
    pub rollout_steps: usize,
    /// Weight of the critic loss added to the actor loss.
    pub value_coef: f64,
    /// Tasks cycled through by PPO rollouts.
    pub tasks: Vec<Task>,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            ppo_lr: 0.0001,
            clip_eps: 0.2,
            gamma: 0.99,
            lam: 0.95,
            batch_size: 32,
            epochs: 4,
            seed: 0,
            bc_steps: 8000,
            ppo_iterations: 20,
            rollout_steps: 1024,
            value_coef: 0.5,
            tasks: Task::ALL.to_vec(),
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.ppo_lr >= 0.0 && self.ppo_lr.is_finite()) {
            return Err(Error::Config("train.lr and train.ppo_lr must be non-negative".into()));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(Error::Config("train.clip_eps must lie in (0, 1)".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config("train.gamma must lie in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.lam) {
            return Err(Error::Config("train.lam must lie in [0, 1]".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.rollout_steps == 0 {
            return Err(Error::Config("train.batch_size, epochs and rollout_steps must be positive".into()));
        }
        if !(self.value_coef >= 0.0 && self.value_coef.is_finite()) {
            return Err(Error::Config("train.value_coef must be non-negative".into()));
        }
        if self.tasks.is_empty() {
            return Err(Error::Config("train.tasks must list at least one task".into()));
        }
        self.augment.validate()
    }
}

/// Groups shuffled episode indices into minibatches of at least `min_steps`
/// timesteps (the final group may be smaller).
pub(crate) fn pack_batches(order: &[usize], lens: &[usize], min_steps: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    let mut steps = 0;
    for &i in order {
        cur.push(i);
        steps += lens[i];
        if steps >= min_steps {
            out.push(std::mem::take(&mut cur));
            steps = 0;
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}
