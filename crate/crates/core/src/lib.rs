//! Gaussian-process calendar-ageing model for lithium-ion cells.

pub mod config;
pub mod dataset;
pub mod error;
pub mod forecast;
pub mod gp;
pub mod kernel;
pub mod metrics;
pub mod preprocess;
pub mod report;
pub mod study;
pub mod synth;

pub use error::{Error, Result};
