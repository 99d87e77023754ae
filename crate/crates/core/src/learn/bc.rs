use rand::seq::SliceRandom;

use super::augment::augment;
use super::gae::discounted_returns;
use super::losses::{bc_loss_graph, critic_loss_graph};
use super::metrics::{MetricRow, Phase};
use super::{pack_batches, TrainConfig};
use crate::error::{Error, Result};
use crate::fusion::Observation;
use crate::model::Model;
use crate::numerics::{derive_seed, rng_from_seed, AdamConfig, AdamState, Graph, Tensor};
use crate::sim::Episode;

const BC_STREAM: u64 = 0xbc;

/// Minibatch Adam on the cloning loss plus the critic regression to
/// discounted returns. Deterministic given `cfg.seed`.
pub fn train_bc(mut model: Model, episodes: &[Episode], cfg: &TrainConfig) -> Result<(Model, Vec<MetricRow>)> {
    cfg.validate()?;
    if episodes.is_empty() || episodes.iter().any(Episode::is_empty) {
        return Err(Error::contract("behaviour cloning needs a non-empty dataset"));
    }
    let spec = model.action_spec().clone();
    for ep in episodes {
        for s in &ep.steps {
            if spec.decode(spec.nearest(&s.action))? != s.action {
                return Err(Error::contract(format!("episode {} has an action outside the vocabulary", ep.seed)));
            }
        }
    }
    let vocab = spec.as_tensor();
    let returns: Vec<Vec<f64>> = episodes
        .iter()
        .map(|ep| discounted_returns(&ep.steps.iter().map(|s| s.reward).collect::<Vec<_>>(), cfg.gamma))
        .collect();
    let lens: Vec<usize> = episodes.iter().map(Episode::len).collect();

    let mut rng = rng_from_seed(derive_seed(cfg.seed, BC_STREAM));
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr), model.params())?;
    let mut queue: Vec<Vec<usize>> = Vec::new();
    let mut rows = Vec::with_capacity(cfg.bc_steps);

    for step in 0..cfg.bc_steps {
        if queue.is_empty() {
            let mut order: Vec<usize> = (0..episodes.len()).collect();
            order.shuffle(&mut rng);
            queue = pack_batches(&order, &lens, cfg.batch_size);
            queue.reverse();
        }
        let batch = queue.pop().expect("queue refilled above");

        let mut obs: Vec<Vec<Observation>> = Vec::with_capacity(batch.len());
        let mut expert = Vec::new();
        let mut targets = Vec::new();
        for &i in &batch {
            let mut frames = Vec::with_capacity(lens[i]);
            for s in &episodes[i].steps {
                let (o, a, _) = augment(&s.obs, &s.action, &cfg.augment, &mut rng)?;
                frames.push(o);
                expert.extend_from_slice(&a);
            }
            obs.push(frames);
            targets.extend_from_slice(&returns[i]);
        }
        let n = targets.len();
        let refs: Vec<Vec<&Observation>> = obs.iter().map(|ep| ep.iter().collect()).collect();

        let params = model.params();
        let mut g = Graph::new();
        let bound = params.bind(&mut g, true);
        let out = model.forward(&mut g, &bound, &refs)?;
        let actor = bc_loss_graph(&mut g, out.q, &vocab, Tensor::new(vec![n, vocab.cols()], expert)?)?;
        let critic = critic_loss_graph(&mut g, out.v, &targets)?;
        let weighted = g.scale(critic, cfg.value_coef);
        let loss = g.add(actor, weighted)?;
        let actor_loss = g.value(actor).data()[0];
        let critic_loss = g.value(critic).data()[0];
        g.backward(loss)?;
        let grads = bound.grads(&g);
        drop(g);
        let params = model.params_mut();
        params.set_grads(grads)?;
        adam.step(params)?;
        params.zero_grad();

        rows.push(MetricRow { phase: Phase::Bc, batch: step, actor_loss, critic_loss, ret: None, mse: Some(actor_loss) });
    }
    Ok((model, rows))
}
