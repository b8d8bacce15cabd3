//! Deterministic 64-bit numerical substrate.

pub mod adam;
pub mod array;
pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod rng;

pub use adam::{adam_step, AdamConfig, OptState};
pub use array::{Array, GradStore, ParamStore};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use graph::{value_and_grad, value_only, Graph, ParamVars, Var};
pub use rng::Rng;
