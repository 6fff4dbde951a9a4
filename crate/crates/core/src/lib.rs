//! Multi-stage rectified-flow generation with a latent-token visual prior.

mod error;
pub mod backbone;
pub mod data;
pub mod eval;
pub mod io;
pub mod flow;
pub mod lem;
pub mod model;
mod nn;
pub mod numerics;
pub mod sampler;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
