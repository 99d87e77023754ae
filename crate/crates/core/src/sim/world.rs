use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, Observation};
use crate::numerics::{derive_seed, rng_from_seed};
use crate::policy::{ActionSpec, ActionVec, GRASP};

use super::render;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Pick,
    Place,
    Stack,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Pick, Task::Place, Task::Stack];

    fn stream(self) -> u64 {
        match self {
            Task::Pick => 1,
            Task::Place => 2,
            Task::Stack => 3,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Pick => "pick",
            Task::Place => "place",
            Task::Stack => "stack",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pick" => Ok(Task::Pick),
            "place" => Ok(Task::Place),
            "stack" => Ok(Task::Stack),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    /// Cells per side of the square table.
    pub grid: usize,
    /// Height levels, including the table surface at level 0.
    pub levels: usize,
    /// Edge length of one cell in meters.
    pub cell_size: f64,
    pub pixels_per_cell: usize,
    pub max_steps: usize,
    /// Charged on every step.
    pub step_penalty: f64,
    /// Paid on the step that completes the task.
    pub success_reward: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self { grid: 5, levels: 3, cell_size: 0.5, pixels_per_cell: 3, max_steps: 40, step_penalty: 0.01, success_reward: 1.0 }
    }
}

impl SimConfig {
    pub fn validate(&self, fusion: &FusionConfig) -> Result<()> {
        if self.grid < 2 {
            return Err(Error::Config("sim.grid must be at least 2".into()));
        }
        if self.levels < 2 {
            return Err(Error::Config("sim.levels must be at least 2".into()));
        }
        if !(self.cell_size > 0.0 && self.cell_size.is_finite()) {
            return Err(Error::Config("sim.cell_size must be positive".into()));
        }
        if self.pixels_per_cell < 2 {
            return Err(Error::Config("sim.pixels_per_cell must be at least 2".into()));
        }
        let side = self.grid * self.pixels_per_cell;
        if side > fusion.image_height || side > fusion.image_width {
            return Err(Error::Config(format!(
                "a {0}x{0} grid at {1} px per cell does not fit a {2}x{3} image",
                self.grid, self.pixels_per_cell, fusion.image_height, fusion.image_width
            )));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("sim.max_steps must be positive".into()));
        }
        if !self.step_penalty.is_finite() || !self.success_reward.is_finite() {
            return Err(Error::Config("sim rewards must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Object {
    pub id: usize,
    pub pos: [usize; 3],
}

/// Full simulator state. Object 0 is the one the task is about; in a stack
/// task object 1 is the base.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    pub task: Task,
    pub gripper: [usize; 3],
    /// Quarter turns, 0..4.
    pub yaw: u8,
    pub held: Option<usize>,
    pub objects: Vec<Object>,
    /// Place target cell; `None` for other tasks.
    pub target: Option<[usize; 2]>,
    pub step_count: usize,
    pub max_steps: usize,
    pub success: bool,
}

impl WorldState {
    pub fn grasp(&self) -> bool {
        self.held.is_some()
    }

    pub fn done(&self) -> bool {
        self.success || self.step_count >= self.max_steps
    }

    pub fn object(&self, id: usize) -> &Object {
        &self.objects[id]
    }

    pub fn object_at(&self, cell: [usize; 3]) -> Option<usize> {
        self.objects.iter().find(|o| o.pos == cell).map(|o| o.id)
    }

    /// Object directly underneath `id`, if any.
    pub fn stacked_on(&self, id: usize) -> Option<usize> {
        let [x, y, z] = self.objects[id].pos;
        if z == 0 || self.held == Some(id) {
            return None;
        }
        self.object_at([x, y, z - 1])
    }

    /// Cell the task wants object 0 to end up in (xy), if it has one.
    pub fn goal_xy(&self) -> Option<[usize; 2]> {
        match self.task {
            Task::Pick => None,
            Task::Place => self.target,
            Task::Stack => {
                let [x, y, _] = self.objects[1].pos;
                Some([x, y])
            }
        }
    }

    /// Number of resting (not held) objects in column `(x, y)`.
    pub fn column_height(&self, x: usize, y: usize) -> usize {
        self.objects.iter().filter(|o| self.held != Some(o.id) && o.pos[0] == x && o.pos[1] == y).count()
    }

    fn is_success(&self, levels: usize) -> bool {
        let a = &self.objects[0];
        match self.task {
            Task::Pick => self.held == Some(0) && self.gripper[2] == levels - 1,
            Task::Place => self.held.is_none() && Some([a.pos[0], a.pos[1]]) == self.target && a.pos[2] == 0,
            Task::Stack => {
                let b = &self.objects[1];
                self.held.is_none() && a.pos == [b.pos[0], b.pos[1], 1] && b.pos[2] == 0
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub state: WorldState,
    pub obs: Observation,
    pub reward: f64,
    pub done: bool,
}

/// Grid manipulation environment bound to a fusion layout and action vocabulary.
#[derive(Debug, Clone)]
pub struct Env {
    sim: SimConfig,
    fusion: FusionConfig,
    spec: ActionSpec,
}

impl Env {
    pub fn new(sim: SimConfig, fusion: FusionConfig, spec: ActionSpec) -> Result<Self> {
        fusion.validate()?;
        sim.validate(&fusion)?;
        spec.validate()?;
        Ok(Self { sim, fusion, spec })
    }

    pub fn sim_config(&self) -> &SimConfig {
        &self.sim
    }

    pub fn fusion_config(&self) -> &FusionConfig {
        &self.fusion
    }

    pub fn action_spec(&self) -> &ActionSpec {
        &self.spec
    }

    pub fn reset(&self, task: Task, seed: u64) -> (WorldState, Observation) {
        let state = self.layout(task, seed);
        let obs = self.render(&state);
        (state, obs)
    }

    fn layout(&self, task: Task, seed: u64) -> WorldState {
        let mut rng = rng_from_seed(derive_seed(seed, task.stream()));
        let n = self.sim.grid;
        let mut cells: Vec<[usize; 2]> = Vec::with_capacity(3);
        while cells.len() < 3 {
            let c = [rng.random_range(0..n), rng.random_range(0..n)];
            if !cells.contains(&c) {
                cells.push(c);
            }
        }
        let gripper = [rng.random_range(0..n), rng.random_range(0..n), self.sim.levels - 1];
        let yaw = 0;
        let mut objects = vec![Object { id: 0, pos: [cells[0][0], cells[0][1], 0] }];
        let mut target = None;
        match task {
            Task::Pick => {}
            Task::Place => target = Some(cells[1]),
            Task::Stack => objects.push(Object { id: 1, pos: [cells[1][0], cells[1][1], 0] }),
        }
        WorldState {
            task,
            gripper,
            yaw,
            held: None,
            objects,
            target,
            step_count: 0,
            max_steps: self.sim.max_steps,
            success: false,
        }
    }

    pub fn render(&self, state: &WorldState) -> Observation {
        render::render(&self.sim, &self.fusion, state)
    }

    pub fn step(&self, state: &WorldState, action: &ActionVec) -> Result<StepResult> {
        if state.done() {
            return Err(Error::State("step called on a finished episode".into()));
        }
        if action.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("action is not finite"));
        }
        let a = self.spec.decode(self.spec.nearest(action))?;
        let mut next = state.clone();
        next.step_count += 1;

        let sign = |v: f64| if v > 0.0 { 1i64 } else if v < 0.0 { -1 } else { 0 };
        let bounds = [self.sim.grid, self.sim.grid, self.sim.levels];
        let mut cell = next.gripper;
        for axis in 0..3 {
            let c = cell[axis] as i64 + sign(a[axis]);
            if c >= 0 && (c as usize) < bounds[axis] {
                cell[axis] = c as usize;
            }
        }
        if cell != next.gripper {
            let blocked = match next.held {
                Some(h) => next.objects.iter().any(|o| o.id != h && o.pos == cell),
                None => false,
            };
            if !blocked {
                next.gripper = cell;
                if let Some(h) = next.held {
                    next.objects[h].pos = cell;
                }
            }
        }
        next.yaw = ((next.yaw as i64 + sign(a[5])).rem_euclid(4)) as u8;

        if a[GRASP] == 1.0 {
            match next.held {
                Some(h) => {
                    let [x, y, _] = next.gripper;
                    let z = next.column_height(x, y);
                    next.objects[h].pos = [x, y, z];
                    next.held = None;
                }
                None => {
                    let [x, y, z] = next.gripper;
                    if let Some(id) = next.object_at([x, y, z]) {
                        if next.object_at([x, y, z + 1]).is_none() {
                            next.held = Some(id);
                        }
                    }
                }
            }
        }

        let mut reward = -self.sim.step_penalty;
        if next.is_success(self.sim.levels) {
            next.success = true;
            reward += self.sim.success_reward;
        }
        let obs = self.render(&next);
        let done = next.done();
        Ok(StepResult { state: next, obs, reward, done })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn env() -> Env {
        Env::new(SimConfig::default(), FusionConfig::default(), ActionSpec::grid(0.5, std::f64::consts::FRAC_PI_2)).unwrap()
    }

    #[test]
    fn reset_is_deterministic() {
        let env = env();
        for task in Task::ALL {
            let (s1, o1) = env.reset(task, 7);
            let (s2, o2) = env.reset(task, 7);
            assert_eq!(s1, s2);
            assert_eq!(o1, o2);
            assert_eq!(o1.rgbd.as_ref().unwrap().shape(), &[16, 16, 4]);
            o1.validate(env.fusion_config()).unwrap();
        }
    }

    #[test]
    fn noop_only_counts_a_step() {
        let env = env();
        let (s, _) = env.reset(Task::Place, 3);
        let r = env.step(&s, &[0.0; 7]).unwrap();
        assert_eq!(r.reward, -0.01);
        assert!(!r.done);
        let mut expect = s.clone();
        expect.step_count = 1;
        assert_eq!(r.state, expect);
    }

    #[test]
    fn walls_clamp_movement() {
        let env = env();
        let (mut s, _) = env.reset(Task::Pick, 0);
        s.gripper = [0, 4, 2];
        let minus_x = env.action_spec().decode(2).unwrap();
        let plus_y = env.action_spec().decode(3).unwrap();
        let plus_z = env.action_spec().decode(5).unwrap();
        for a in [minus_x, plus_y, plus_z] {
            assert_eq!(env.step(&s, &a).unwrap().state.gripper, [0, 4, 2]);
        }
    }

    #[test]
    fn grasp_toggles_pick_and_release() {
        let env = env();
        let (mut s, _) = env.reset(Task::Place, 11);
        let a = s.objects[0].pos;
        s.gripper = a;
        let grasp = env.action_spec().decode(9).unwrap();
        let r = env.step(&s, &grasp).unwrap();
        assert_eq!(r.state.held, Some(0));
        assert!(r.obs.touch.as_ref().unwrap().data().iter().all(|&v| v == 1.0));
        let r2 = env.step(&r.state, &grasp).unwrap();
        assert_eq!(r2.state.held, None);
        assert_eq!(r2.state.objects[0].pos, a);
    }

    #[test]
    fn finished_episode_rejects_step() {
        let env = env();
        let (mut s, _) = env.reset(Task::Pick, 1);
        s.step_count = s.max_steps;
        assert!(matches!(env.step(&s, &[0.0; 7]), Err(Error::State(_))));
    }

    #[test]
    fn continuous_actions_snap_to_vocabulary() {
        let env = env();
        let (s, _) = env.reset(Task::Pick, 2);
        let snapped = env.step(&s, &[0.0, 0.0, -0.38, 0.0, 0.0, 0.0, 0.1]).unwrap();
        let exact = env.step(&s, &env.action_spec().decode(6).unwrap()).unwrap();
        assert_eq!(snapped.state, exact.state);
    }
}
