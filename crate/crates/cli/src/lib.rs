//! Library surface of the command-line driver: scenario configuration,
//! embedded scenario catalog, task runner, and report assembly.
//!
//! The binary in `main.rs` is a thin shell over these modules; everything
//! testable lives here.

pub mod config;
pub mod report;
pub mod runner;
pub mod scenarios;
