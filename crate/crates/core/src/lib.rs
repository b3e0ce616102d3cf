//! Workbench for training soft actor-critic agents behind input
//! transformations (bit-depth reduction, vector quantization, denoisers) and
//! measuring how they hold up against bounded state-perturbation attacks.

pub mod attacks;
pub mod diffcore;
pub mod envs;
pub mod error;
pub mod harness;
pub mod rng;
pub mod sac;
pub mod theory;
pub mod transforms;

pub use error::{Error, Result};
