//! Gradient-flow simulation of the value-softmax model `β = V σ(a)` and
//! mechanical checks of its polarization behavior.

pub mod cli;
pub mod design;
pub mod error;
pub mod flow;
pub mod losses;
pub mod metrics;
pub mod simplex;
pub mod theory;

pub use error::{Error, Result};
