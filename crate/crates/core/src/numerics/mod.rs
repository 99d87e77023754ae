//! Dense tensor kernel: row-major `f64` arrays, a recorded graph with
//! reverse-mode gradients, and an Adam optimizer.

mod adam;
mod graph;
mod layers;
pub mod ops;
mod params;
mod rng;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use layers::Dense;
pub use graph::{AttentionLayout, ConvGeometry, Graph, Var};
pub use params::{Bound, ParamId, Params};
pub use rng::{derive_seed, rng_from_seed, Rng};
pub use tensor::Tensor;
