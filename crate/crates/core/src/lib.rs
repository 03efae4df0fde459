//! Subequivariant graph neural network simulator.

pub mod baselines;
pub mod error;
pub mod graph;
pub mod io;
pub mod math;
pub mod model;
pub mod reduction;
pub mod rigid;
pub mod rollout;
pub mod scenes;
pub mod somp;
pub mod subeq;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
