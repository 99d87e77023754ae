use serde::Serialize;

use crate::error::Result;
use crate::fusion::Observation;
use crate::model::{Model, PolicyStream};
use crate::numerics::derive_seed;
use crate::policy::ActionIndex;
use crate::sim::{Env, Task, WorldState};

const EVAL_STREAM: u64 = 0xe7a1;

/// Anything that picks a vocabulary index frame by frame within an episode.
pub trait Controller {
    fn reset(&mut self);
    fn act(&mut self, state: &WorldState, obs: &Observation) -> Result<ActionIndex>;
}

/// Greedy (argmax) policy of a trained model.
pub struct ModelController<'m> {
    stream: PolicyStream<'m>,
    model: &'m Model,
}

impl<'m> ModelController<'m> {
    pub fn new(model: &'m Model) -> Self {
        Self { stream: model.stream(), model }
    }
}

impl Controller for ModelController<'_> {
    fn reset(&mut self) {
        self.stream = self.model.stream();
    }

    fn act(&mut self, _state: &WorldState, obs: &Observation) -> Result<ActionIndex> {
        Ok(self.stream.step(obs)?.action_index)
    }
}

/// The scripted expert, reading the true state.
pub struct ExpertController<'e> {
    env: &'e Env,
}

impl<'e> ExpertController<'e> {
    pub fn new(env: &'e Env) -> Self {
        Self { env }
    }
}

impl Controller for ExpertController<'_> {
    fn reset(&mut self) {}

    fn act(&mut self, state: &WorldState, _obs: &Observation) -> Result<ActionIndex> {
        self.env.expert_index(state)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub task: Task,
    pub episodes: usize,
    /// Fraction of greedy episodes that reached the goal.
    pub success_rate: f64,
    /// Fraction of expert-visited frames where the controller picks the
    /// expert's action.
    pub accuracy: f64,
    pub mean_return: f64,
    pub mean_length: f64,
}

/// Runs `n` greedy episodes of `task` and `n` expert-driven episodes on the
/// same layouts for the accuracy count.
pub fn evaluate(env: &Env, ctrl: &mut dyn Controller, task: Task, n: usize, seed: u64) -> Result<EvalReport> {
    let base = derive_seed(seed, EVAL_STREAM);
    let (mut successes, mut total_return, mut total_len) = (0usize, 0.0, 0usize);
    let (mut agree, mut frames) = (0usize, 0usize);
    for i in 0..n {
        let ep_seed = derive_seed(base, i as u64);

        ctrl.reset();
        let (mut state, mut obs) = env.reset(task, ep_seed);
        while !state.done() {
            let a = ctrl.act(&state, &obs)?;
            let r = env.step(&state, &env.action_spec().decode(a)?)?;
            total_return += r.reward;
            state = r.state;
            obs = r.obs;
        }
        successes += state.success as usize;
        total_len += state.step_count;

        ctrl.reset();
        let (mut state, mut obs) = env.reset(task, ep_seed);
        while !state.done() {
            let expert = env.expert_index(&state)?;
            agree += (ctrl.act(&state, &obs)? == expert) as usize;
            frames += 1;
            let r = env.step(&state, &env.action_spec().decode(expert)?)?;
            state = r.state;
            obs = r.obs;
        }
    }
    let nf = n.max(1) as f64;
    Ok(EvalReport {
        task,
        episodes: n,
        success_rate: successes as f64 / nf,
        accuracy: if frames == 0 { 0.0 } else { agree as f64 / frames as f64 },
        mean_return: total_return / nf,
        mean_length: total_len as f64 / nf,
    })
}
