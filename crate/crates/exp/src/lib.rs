//! Experiment drivers, configuration and output formats for the `dropens`
//! command-line tool.

pub mod config;
pub mod error;
pub mod experiments;
pub mod records;
pub mod search;
pub mod seed;

pub use error::{ExpError, Result};
