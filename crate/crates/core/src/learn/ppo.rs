use rand::seq::SliceRandom;
use rand::Rng as _;

use super::gae::gae;
use super::losses::{critic_loss_graph, ppo_loss_graph};
use super::metrics::{MetricRow, Phase};
use super::{pack_batches, TrainConfig};
use crate::error::{Error, Result};
use crate::fusion::Observation;
use crate::model::Model;
use crate::numerics::{derive_seed, rng_from_seed, AdamConfig, AdamState, Graph, Rng};
use crate::sim::Env;

const PPO_STREAM: u64 = 0x990;

struct Rollout {
    obs: Vec<Observation>,
    actions: Vec<usize>,
    rewards: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PpoOutcome {
    pub model: Model,
    pub metrics: Vec<MetricRow>,
    /// Mean episode return of each iteration's rollout.
    pub iteration_returns: Vec<f64>,
    /// Largest `|ratio − 1|` on the first minibatch of each iteration.
    pub first_batch_ratio_dev: Vec<f64>,
    /// Set when training stopped on a non-finite loss or gradient; `model`
    /// is then the last parameters that were still finite.
    pub diverged: Option<String>,
}

fn sample(pi: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in pi.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    pi.len() - 1
}

fn collect(model: &Model, env: &Env, cfg: &TrainConfig, iteration: usize, rng: &mut Rng) -> Result<Vec<Rollout>> {
    let base = derive_seed(derive_seed(cfg.seed, PPO_STREAM), iteration as u64);
    let spec = model.action_spec();
    let mut out = Vec::new();
    let mut steps = 0;
    while steps < cfg.rollout_steps {
        let task = cfg.tasks[out.len() % cfg.tasks.len()];
        let (mut state, mut obs) = env.reset(task, derive_seed(base, out.len() as u64));
        let mut stream = model.stream();
        let mut ro = Rollout { obs: Vec::new(), actions: Vec::new(), rewards: Vec::new() };
        while !state.done() {
            let p = stream.step(&obs)?;
            let a = sample(&p.pi, rng);
            let r = env.step(&state, &spec.decode(a)?)?;
            ro.obs.push(obs);
            ro.actions.push(a);
            ro.rewards.push(r.reward);
            state = r.state;
            obs = r.obs;
        }
        steps += ro.actions.len();
        out.push(ro);
    }
    Ok(out)
}

/// Clipped-surrogate policy optimisation starting from `model`.
///
/// Each iteration samples fresh episodes with the current stochastic policy,
/// freezes their log-probabilities and values, estimates advantages and then
/// runs `cfg.epochs` passes of minibatch Adam on
/// `−L_PPO + value_coef · critic_loss`.
///
/// A non-finite value anywhere in an iteration stops training; the outcome
/// then carries the parameters from the start of that iteration.
pub fn train_ppo(model: Model, env: &Env, cfg: &TrainConfig) -> Result<PpoOutcome> {
    cfg.validate()?;
    if model.action_spec() != env.action_spec() {
        return Err(Error::contract("model and environment use different action vocabularies"));
    }
    let mut run = Run {
        rng: rng_from_seed(derive_seed(cfg.seed, PPO_STREAM)),
        adam: AdamState::new(AdamConfig::with_lr(cfg.ppo_lr), model.params())?,
        batch_index: 0,
        outcome: PpoOutcome {
            model: model.clone(),
            metrics: Vec::new(),
            iteration_returns: Vec::new(),
            first_batch_ratio_dev: Vec::new(),
            diverged: None,
        },
    };
    let mut model = model;
    for it in 0..cfg.ppo_iterations {
        let last_good = model.clone();
        match run.iteration(&mut model, env, cfg, it) {
            Ok(()) => {}
            Err(Error::NonFinite(msg)) => {
                run.outcome.model = last_good;
                run.outcome.diverged = Some(format!("iteration {it}, batch {}: {msg}", run.batch_index));
                return Ok(run.outcome);
            }
            Err(e) => return Err(e),
        }
    }
    run.outcome.model = model;
    Ok(run.outcome)
}

struct Run {
    rng: Rng,
    adam: AdamState,
    batch_index: usize,
    outcome: PpoOutcome,
}

impl Run {
    fn iteration(&mut self, model: &mut Model, env: &Env, cfg: &TrainConfig, it: usize) -> Result<()> {
        let rollouts = collect(model, env, cfg, it, &mut self.rng)?;
        let mean_return = rollouts.iter().map(|r| r.rewards.iter().sum::<f64>()).sum::<f64>() / rollouts.len() as f64;
        self.outcome.iteration_returns.push(mean_return);

        // frozen log-probabilities and values under the sampling policy
        let refs: Vec<Vec<&Observation>> = rollouts.iter().map(|r| r.obs.iter().collect()).collect();
        let all_actions: Vec<usize> = rollouts.iter().flat_map(|r| r.actions.iter().copied()).collect();
        let (logp_old, values) = {
            let mut g = Graph::new();
            let bound = model.params().bind(&mut g, false);
            let out = model.forward(&mut g, &bound, &refs)?;
            let lsm = g.log_softmax(out.q)?;
            let lp = g.pick(lsm, &all_actions)?;
            (g.value(lp).data().to_vec(), g.value(out.v).data().to_vec())
        };
        if logp_old.iter().chain(&values).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("log-probabilities or values of the rollout".into()));
        }
        let mut offsets = vec![0];
        for r in &rollouts {
            offsets.push(offsets.last().unwrap() + r.actions.len());
        }
        let mut adv = Vec::with_capacity(all_actions.len());
        let mut returns = Vec::with_capacity(all_actions.len());
        for (i, r) in rollouts.iter().enumerate() {
            let mut v = values[offsets[i]..offsets[i + 1]].to_vec();
            v.push(0.0);
            let a = gae(&r.rewards, &v, cfg.gamma, cfg.lam)?.a_hat;
            returns.extend(a.iter().zip(&v).map(|(a, v)| a + v));
            adv.extend(a);
        }

        let lens: Vec<usize> = rollouts.iter().map(|r| r.actions.len()).collect();
        let mut first = true;
        for _ in 0..cfg.epochs {
            let mut order: Vec<usize> = (0..rollouts.len()).collect();
            order.shuffle(&mut self.rng);
            for batch in pack_batches(&order, &lens, cfg.batch_size) {
                let refs: Vec<Vec<&Observation>> = batch.iter().map(|&i| rollouts[i].obs.iter().collect()).collect();
                let pick = |src: &[f64]| -> Vec<f64> {
                    batch.iter().flat_map(|&i| src[offsets[i]..offsets[i + 1]].iter().copied()).collect()
                };
                let (b_old, b_adv, b_ret) = (pick(&logp_old), pick(&adv), pick(&returns));
                let b_actions: Vec<usize> = batch.iter().flat_map(|&i| rollouts[i].actions.iter().copied()).collect();

                let params = model.params();
                let mut g = Graph::new();
                let bound = params.bind(&mut g, true);
                let out = model.forward(&mut g, &bound, &refs)?;
                let lsm = g.log_softmax(out.q)?;
                let logp = g.pick(lsm, &b_actions)?;
                if first {
                    let dev = g.value(logp).data().iter().zip(&b_old).map(|(n, o)| ((n - o).exp() - 1.0).abs()).fold(0.0, f64::max);
                    self.outcome.first_batch_ratio_dev.push(dev);
                    first = false;
                }
                let actor = ppo_loss_graph(&mut g, logp, &b_old, &b_adv, cfg.clip_eps)?;
                let critic = critic_loss_graph(&mut g, out.v, &b_ret)?;
                let weighted = g.scale(critic, cfg.value_coef);
                let loss = g.add(actor, weighted)?;
                let actor_loss = g.value(actor).data()[0];
                let critic_loss = g.value(critic).data()[0];
                g.backward(loss)?;
                let grads = bound.grads(&g);
                drop(g);
                let params = model.params_mut();
                params.set_grads(grads)?;
                self.adam.step(params)?;
                params.zero_grad();

                self.outcome.metrics.push(MetricRow {
                    phase: Phase::Ppo,
                    batch: self.batch_index,
                    actor_loss,
                    critic_loss,
                    ret: Some(mean_return),
                    mse: None,
                });
                self.batch_index += 1;
            }
        }
        if model.params().tensors().iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite("parameters after the update".into()));
        }
        Ok(())
    }
}
