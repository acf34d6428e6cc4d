//! Experiment harness: configuration, the `generate`, `train`, `evaluate`
//! and `case-study` commands, and SVG output.

pub mod commands;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod svg;

pub use config::RunConfig;
pub use error::CliError;
