//! Command-line pipeline and HTTP service for baked temporal MPIs.
//!
//! The service is read-only: it owns a [`BakedCoefficients`] volume and
//! answers metadata, plane-stack and server-side render requests, baking
//! time instances on demand into a small LRU cache.
//!
//! [`BakedCoefficients`]: temporal_mpi::temporal_field::BakedCoefficients

pub mod cli;
pub mod http;
mod state;

pub use state::{ServeState, DEFAULT_CACHE_SIZE};
