//! Guided diffusion sampling for PDE inverse problems.
//!
//! A diffusion prior over concatenated coefficient/solution fields is
//! steered toward sparse observations and PDE residuals, either along a
//! single reverse-time chain or inside a sequential Monte Carlo population.

pub mod data;
pub mod error;
pub mod experiments;
pub mod grid;
pub mod guidance;
pub mod prior;
pub mod residuals;
pub mod samplers;
pub mod smc;
pub mod solvers;

pub use error::{Error, Result};
