//! Library half of the command-line frontend: run-configuration parsing
//! and per-class feature-map export. The binary in `main.rs` is a thin
//! dispatcher over these modules and the engine crate.

pub mod config;
pub mod features;
