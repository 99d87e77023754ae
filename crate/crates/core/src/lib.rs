//! Transformer-XL policy learning from multimodal demonstrations.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: tensors, reverse-mode gradients, Adam.
//! - [`fusion`]: per-modality encoders and the concatenated feature vector.
//! - [`xl`]: segment-recurrent encoder with relative-offset attention bias
//!   and optional local windows.
//! - [`policy`]: Q-values, softmax policy, greedy action, critic value.
//! - [`model`]: the full stack and a streaming runner for closed-loop control.
//! - [`learn`]: losses, advantage estimation, augmentation, BC and PPO loops.
//! - [`sim`]: a deterministic grid manipulation world, scripted expert and
//!   the episode file format.

pub mod error;
pub mod fusion;
pub mod learn;
pub mod model;
pub mod numerics;
pub mod policy;
pub mod sim;
pub mod xl;

pub use error::{Error, Result};
