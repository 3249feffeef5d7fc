//! Command implementations behind the `mfc` binary.
//!
//! Split out as a library so integration tests can drive commands
//! in-process; `main.rs` adds only flag parsing and exit-code mapping.

pub mod commands;
pub mod config;
