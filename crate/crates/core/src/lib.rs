//! Transformer deep-kernel Bayesian optimization with a soft actor-critic
//! acquisition.

pub mod baselines;
pub mod checkpoint;
pub mod domain;
pub mod env;
pub mod error;
pub mod gp;
pub mod harness;
pub mod instrument;
pub mod linalg;
pub mod nn;
pub mod objectives;
pub mod sac;
pub mod tdkl;

pub use error::{Error, Result};
