//! Command line driver for the DETNO pipeline.

pub mod app;
pub mod checks;
