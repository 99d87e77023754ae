//! Deterministic grid manipulation world with pick, place and stack tasks.
//!
//! A gripper moves one cell at a time over a square table with a few height
//! levels. Each frame is rendered into the three sensor modalities the
//! fusion encoder expects. A scripted expert produces demonstrations.

mod dataset;
mod expert;
mod render;
mod world;

pub use dataset::{
    encode_episodes, gen_dataset, load_episodes, record_expert_episode, save_episodes, write_atomic, Episode, Step,
    EPISODE_HEADER,
};
pub use expert::{expert_primitive, Primitive};
pub use world::{Env, Object, SimConfig, StepResult, Task, WorldState};
