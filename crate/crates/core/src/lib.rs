//! Numerical laboratory for supercritical multitype continuous-state
//! branching processes.

pub mod classifier;
pub mod error;
pub mod fixtures;
pub mod fluctlab;
pub mod model;
pub mod moments;
pub mod pipeline;
pub mod quadrature;
pub mod semigroup;
pub mod simulator;
pub mod stats;

pub use error::{Error, Result};
