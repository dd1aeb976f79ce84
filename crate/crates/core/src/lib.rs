//! Diffusion-enhanced transformer neural operator (DETNO) for first-order
//! traffic flow forecasting.
//!
//! The crate covers the whole pipeline: Godunov data generation ([`lwr`]),
//! windowed samples and the dataset file ([`dataset`]), a small reverse-mode
//! autodiff engine with the network blocks ([`nn`]), the DETNO network
//! ([`model`]), v-parameterised diffusion with DDIM refinement
//! ([`diffusion`]), training ([`training`]), autoregressive rollout
//! ([`rollout`]) and metrics ([`evaluation`]).

mod binio;
pub mod config;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod lwr;
pub mod model;
pub mod nn;
pub mod rollout;
pub mod training;

pub use error::{Error, Result};
