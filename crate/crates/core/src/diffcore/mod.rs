//! Minimal reverse-mode differentiation engine: parameter storage, a tape of
//! dense-matrix operations, MLPs, and Adam with step decay.

mod checkpoint;
mod matrix;
mod mlp;
mod params;
mod real;
mod tape;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use matrix::Matrix;
pub use mlp::{Activation, Init, Mlp, MlpSpec};
pub use params::{lr_schedule, AdamConfig, Gradients, ParamBlock, ParamId, ParamStore};
pub use real::Real;
pub use tape::{SparseMap, Tape, Var};
