use crate::error::{Error, Result};

/// Per-timestep advantage estimates for one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Advantage {
    pub a_hat: Vec<f64>,
}

/// Generalised advantage estimation.
///
/// `values` has one more entry than `rewards`: the bootstrap value after the
/// last step, 0 when the episode ended.
pub fn gae(rewards: &[f64], values: &[f64], gamma: f64, lam: f64) -> Result<Advantage> {
    if values.len() != rewards.len() + 1 {
        return Err(Error::contract(format!("{} rewards need {} values, got {}", rewards.len(), rewards.len() + 1, values.len())));
    }
    if rewards.iter().chain(values).any(|v| !v.is_finite()) {
        return Err(Error::contract("rewards and values must be finite"));
    }
    let mut a_hat = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        let delta = rewards[t] + gamma * values[t + 1] - values[t];
        acc = delta + gamma * lam * acc;
        a_hat[t] = acc;
    }
    Ok(Advantage { a_hat })
}

/// `G_t = Σ_k γ^k r_{t+k}` for a trajectory that ends after the last reward.
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}
