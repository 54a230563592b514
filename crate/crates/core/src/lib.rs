//! Mixed-spectrum time-series modelling: functional and stochastic model
//! fitting, memory models, stable distributions, and the N-step Levy-process
//! classifier.

pub mod campaign;
pub mod error;
pub mod functional;
pub mod memory;
pub mod mle;
pub mod noise;
pub mod nstep;
pub mod optim;
pub mod oracles;
pub mod series;
pub mod stable;
pub mod stats;
pub mod whiten;

pub use error::{Error, Result};
