pub mod association;
pub mod commands;
pub mod error;
pub mod geometry;
pub mod gsaf;
pub mod io;
pub mod metrics;
pub mod model;
pub mod motion;
pub mod pipeline;
pub mod reid;
pub mod simulator;
pub mod tracker;

pub use error::{Error, Result};
