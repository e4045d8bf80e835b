//! Command-line pipelines over the `invariance` toolkit.

pub mod checks;
pub mod commands;
pub mod config;
pub mod pipeline;
pub mod reports;
