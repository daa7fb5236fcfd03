//! Simulation and verification toolkit for jump-diffusions with rough
//! coefficients and the nonlocal Fokker-Planck equations their marginal
//! laws satisfy.

pub mod cli;
pub mod empirical;
pub mod error;
pub mod model;
pub mod oracle;
pub mod rng;
pub mod simulate;
pub mod verify;

pub use error::{Error, Result};
