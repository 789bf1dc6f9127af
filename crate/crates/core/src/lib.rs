//! Dynamic-scene multi-plane images built from a static color volume and a
//! learned temporal basis.
//!
//! The crate covers the whole offline pipeline: a small reverse-mode engine
//! ([`diffcore`]), camera geometry and plane warps ([`geometry`]), explicit
//! MPI volumes and compositing ([`mpi`]), the temporal basis/coefficient
//! fields and their baking ([`temporal_field`]), training and evaluation
//! ([`training`]) and datasets, including a synthetic scene generator with an
//! exact renderer ([`dataio`]).

pub mod dataio;
pub mod diffcore;
pub mod error;
pub mod geometry;
pub mod imaging;
pub mod mpi;
pub mod temporal_field;
pub mod training;

pub use error::{Error, Result};
