//! Scripted demonstrator: walks a Manhattan path to the next subgoal.

use crate::error::{Error, Result};
use crate::policy::{ActionIndex, ActionSpec, ActionVec, GRASP};

use super::world::{Env, Task, WorldState};

/// Motion primitive the expert can ask for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Primitive {
    Move { axis: usize, positive: bool },
    Grasp,
}

impl Primitive {
    fn matches(self, a: &ActionVec) -> bool {
        let mut want = [0i8; 7];
        match self {
            Primitive::Move { axis, positive } => want[axis] = if positive { 1 } else { -1 },
            Primitive::Grasp => want[GRASP] = 1,
        }
        a.iter().zip(want).all(|(v, w)| (if *v > 0.0 { 1 } else if *v < 0.0 { -1 } else { 0 }) == w)
    }

    /// Vocabulary entry that performs this primitive and nothing else.
    pub fn index(self, spec: &ActionSpec) -> Result<ActionIndex> {
        spec.vocabulary
            .iter()
            .position(|a| self.matches(a))
            .ok_or_else(|| Error::Config(format!("action vocabulary has no entry for {self:?}")))
    }
}

fn toward(axis: usize, from: usize, to: usize) -> Option<Primitive> {
    (from != to).then_some(Primitive::Move { axis, positive: to > from })
}

/// Next primitive on the expert path from `state`.
pub fn expert_primitive(state: &WorldState, levels: usize) -> Result<Primitive> {
    if state.done() {
        return Err(Error::State("expert asked to act in a finished episode".into()));
    }
    let [gx, gy, gz] = state.gripper;
    match state.held {
        None => {
            let a = state.object(0).pos;
            if state.object_at([a[0], a[1], a[2] + 1]).is_some() {
                return Err(Error::State("target object is buried under another object".into()));
            }
            if state.task == Task::Stack && state.stacked_on(1).is_some() {
                return Err(Error::State("base object is not on the table".into()));
            }
            Ok(toward(0, gx, a[0]).or(toward(1, gy, a[1])).or(toward(2, gz, a[2])).unwrap_or(Primitive::Grasp))
        }
        Some(0) => match state.goal_xy() {
            None => toward(2, gz, levels - 1).ok_or_else(|| Error::State("pick already complete".into())),
            Some([tx, ty]) => {
                if gz < 1 {
                    return Ok(Primitive::Move { axis: 2, positive: true });
                }
                Ok(toward(0, gx, tx).or(toward(1, gy, ty)).unwrap_or(Primitive::Grasp))
            }
        },
        Some(_) => Err(Error::State("gripper holds the wrong object".into())),
    }
}

impl Env {
    pub fn expert_index(&self, state: &WorldState) -> Result<ActionIndex> {
        expert_primitive(state, self.sim_config().levels)?.index(self.action_spec())
    }

    /// Deterministic scripted action for `state`.
    pub fn expert_action(&self, state: &WorldState) -> Result<ActionVec> {
        self.action_spec().decode(self.expert_index(state)?)
    }

    /// Number of steps the expert needs from a fresh reset.
    pub fn expert_path_len(&self, state: &WorldState) -> usize {
        let [gx, gy, gz] = state.gripper;
        let a = state.object(0).pos;
        let reach = gx.abs_diff(a[0]) + gy.abs_diff(a[1]) + gz.abs_diff(a[2]);
        match state.goal_xy() {
            None => reach + 1 + (self.sim_config().levels - 1 - a[2]),
            Some([tx, ty]) => reach + 1 + 1usize.saturating_sub(a[2]) + a[0].abs_diff(tx) + a[1].abs_diff(ty) + 1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::FusionConfig;
    use crate::sim::world::SimConfig;

    fn env() -> Env {
        Env::new(SimConfig::default(), FusionConfig::default(), ActionSpec::grid(0.5, std::f64::consts::FRAC_PI_2)).unwrap()
    }

    #[test]
    fn expert_solves_every_task_on_the_predicted_path() {
        let env = env();
        for task in Task::ALL {
            for seed in 0..100 {
                let (mut s, _) = env.reset(task, seed);
                let predicted = env.expert_path_len(&s);
                let mut ret = 0.0;
                while !s.done() {
                    let r = env.step(&s, &env.expert_action(&s).unwrap()).unwrap();
                    ret += r.reward;
                    s = r.state;
                }
                assert!(s.success, "{task} seed {seed}");
                assert_eq!(s.step_count, predicted, "{task} seed {seed}");
                assert!((ret - (1.0 - 0.01 * s.step_count as f64)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn place_at_target_releases() {
        let env = env();
        let (mut s, _) = env.reset(Task::Place, 5);
        let [tx, ty] = s.target.unwrap();
        s.gripper = [tx, ty, 1];
        s.objects[0].pos = s.gripper;
        s.held = Some(0);
        assert_eq!(expert_primitive(&s, 3).unwrap(), Primitive::Grasp);
    }

    #[test]
    fn expert_is_deterministic_and_refuses_finished_states() {
        let env = env();
        let (mut s, _) = env.reset(Task::Stack, 9);
        assert_eq!(env.expert_action(&s).unwrap(), env.expert_action(&s).unwrap());
        s.success = true;
        assert!(matches!(env.expert_action(&s), Err(Error::State(_))));
    }
}
