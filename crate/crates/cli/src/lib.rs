//! Experiment driver for self-confidence post-training on toy worlds.
//!
//! Each subcommand resolves an [`config::ExperimentConfig`], writes a
//! [`manifest::RunManifest`] into its output directory, and then emits
//! line-delimited metrics, CSV tables and SVG charts next to it.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod metrics;
pub mod stats;
pub mod svg;

pub use config::ExperimentConfig;
pub use error::CliError;
