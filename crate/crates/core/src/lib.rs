//! Meta-unlearning for conditional diffusion models on a synthetic 2-D
//! concept world.

pub mod attack;
pub mod concepts;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod io;
pub mod meta;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod train;
pub mod unlearn;
pub mod verify;

pub use error::{Error, Result};
