//! Desk-scale searchable face detector: differentiable cell search for
//! feature-enhance modules, a dual-shot anchor pipeline, a distance/margin
//! multi-task loss, and a compound-scaled model family with exact cost
//! accounting.

pub mod ablate;
pub mod autofem;
pub mod boxes;
pub mod detector;
pub mod error;
pub mod eval;
pub mod graph;
pub mod kernels;
pub mod losses;
pub mod nas;
pub mod nn;
pub mod par;
pub mod scaling;
pub mod schedule;
pub mod search;
pub mod synth;
pub mod train;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
