pub mod contact;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod geometry;
pub mod hand;
pub mod language;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod objects;
pub mod real;
pub mod synth;

pub use error::{Error, Result};
