pub mod coils;
pub mod diffusion;
pub mod error;
pub mod experiment;
pub mod forward;
pub mod fourier;
pub mod image;
pub mod inr;
pub mod mask;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod samplers;
pub mod scalar;
pub mod tensorio;

pub use error::{Error, Result};
pub use scalar::Scalar;
