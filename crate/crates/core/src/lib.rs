//! Proximal residual flows.
//!
//! Normalizing flows whose residual blocks `x ↦ x + γΨ(x)` use proximal
//! neural networks `Ψ`. Because `Ψ` is averaged, a block stays invertible
//! for `γ` up to `(κ+1)/(κ−1)`, beyond the Lipschitz-1 limit of ordinary
//! residual flows.

pub mod checkpoint;
pub mod conditional;
pub mod diff;
pub mod error;
pub mod flow;
pub mod io;
pub mod metrics;
pub mod linalg;
pub mod pnn;
pub mod problems;
pub mod train;

pub use error::{Error, Result};
