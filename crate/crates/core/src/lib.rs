//! KL diffusion: diffusion-model training and sampling where the forward
//! process is driven by a truncated Karhunen-Loève expansion of Brownian
//! motion instead of the full Brownian path.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod denoiser;
pub mod error;
pub mod eval;
pub mod forward;
pub mod kl_basis;
pub mod loss;
pub mod matrix;
pub mod quadrature;
pub mod sampler;
pub mod schedule;
pub mod trainer;

pub use error::{Error, Result};
pub use kl_basis::{Basis, KlBasis};
pub use schedule::NoiseSchedule;
