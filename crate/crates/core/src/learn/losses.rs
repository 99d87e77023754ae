use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::policy::ActionVec;

/// `(1/N) Σ ‖â_i − a_i‖²` over 7-vectors.
pub fn bc_loss(pred: &[ActionVec], expert: &[ActionVec]) -> Result<f64> {
    if pred.len() != expert.len() {
        return Err(Error::contract(format!("{} predictions for {} expert actions", pred.len(), expert.len())));
    }
    if pred.is_empty() {
        return Err(Error::contract("bc_loss needs at least one action"));
    }
    let total: f64 = pred
        .iter()
        .zip(expert)
        .map(|(p, e)| p.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum();
    Ok(total / pred.len() as f64)
}

/// `min(r·Â, clip(r, 1−ε, 1+ε)·Â)` for one sample.
pub fn ppo_term(ratio: f64, a_hat: f64, eps: f64) -> Result<f64> {
    if !(ratio > 0.0) || !ratio.is_finite() {
        return Err(Error::contract(format!("probability ratio must be positive, got {ratio}")));
    }
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::contract(format!("clip epsilon must lie in (0, 1), got {eps}")));
    }
    if !a_hat.is_finite() {
        return Err(Error::contract("advantage is not finite"));
    }
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps);
    Ok((ratio * a_hat).min(clipped * a_hat))
}

/// Mean squared error between predicted values and return targets.
pub fn critic_loss(values: &[f64], returns: &[f64]) -> Result<f64> {
    if values.len() != returns.len() {
        return Err(Error::contract(format!("{} values for {} returns", values.len(), returns.len())));
    }
    if values.is_empty() {
        return Err(Error::contract("critic_loss needs at least one value"));
    }
    Ok(values.iter().zip(returns).map(|(v, r)| (v - r) * (v - r)).sum::<f64>() / values.len() as f64)
}

/// Behaviour cloning loss on the expected action `π · A` where `A` is the
/// `[K, 7]` vocabulary matrix.
pub fn bc_loss_graph(g: &mut Graph<'_>, q: Var, vocab: &Tensor, expert: Tensor) -> Result<Var> {
    let n = g.value(q).rows();
    if expert.shape() != [n, vocab.cols()] {
        return Err(Error::contract(format!("expert actions {:?} for {n} predictions", expert.shape())));
    }
    if n == 0 {
        return Err(Error::contract("bc_loss needs at least one action"));
    }
    let pi = g.softmax(q)?;
    let a = g.constant(vocab.clone());
    let pred = g.matmul(pi, a)?;
    let target = g.constant(expert);
    let diff = g.sub(pred, target)?;
    let sq = g.mul(diff, diff)?;
    let total = g.sum(sq);
    Ok(g.scale(total, 1.0 / n as f64))
}

/// Negated clipped surrogate, averaged over the batch.
pub fn ppo_loss_graph(g: &mut Graph<'_>, logp: Var, logp_old: &[f64], adv: &[f64], eps: f64) -> Result<Var> {
    let n = g.value(logp).numel();
    if logp_old.len() != n || adv.len() != n || n == 0 {
        return Err(Error::contract(format!("{n} log-probs, {} old log-probs, {} advantages", logp_old.len(), adv.len())));
    }
    let old = g.constant(Tensor::new(vec![n, 1], logp_old.to_vec())?);
    let a = g.constant(Tensor::new(vec![n, 1], adv.to_vec())?);
    let delta = g.sub(logp, old)?;
    let ratio = g.exp(delta);
    let unclipped = g.mul(ratio, a)?;
    let clipped = g.clamp(ratio, 1.0 - eps, 1.0 + eps);
    let clipped = g.mul(clipped, a)?;
    let surrogate = g.minimum(unclipped, clipped)?;
    let mean = g.mean(surrogate)?;
    Ok(g.neg(mean))
}

pub fn critic_loss_graph(g: &mut Graph<'_>, values: Var, returns: &[f64]) -> Result<Var> {
    let n = g.value(values).numel();
    if returns.len() != n || n == 0 {
        return Err(Error::contract(format!("{n} values for {} returns", returns.len())));
    }
    let target = g.constant(Tensor::new(vec![n, 1], returns.to_vec())?);
    let diff = g.sub(values, target)?;
    let sq = g.mul(diff, diff)?;
    g.mean(sq)
}
