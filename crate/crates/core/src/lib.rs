//! Input-adaptive vision transformer with block, head and token skipping.

pub mod analytics;
pub mod backbone;
pub mod cli;
pub mod config;
pub mod controller;
pub mod cost;
pub mod data;
pub mod error;
pub mod geometry;
pub mod model;
pub mod numerics;
pub mod parallel;
pub mod train;
pub mod params;
pub mod robust;

pub use config::{MiaConfig, RunConfig, ValidConfig};
pub use error::{MiaError, Result};
