//! Library surface of the `clmorph` command-line tool; the binary in
//! `main.rs` is a thin wrapper so integration tests can drive commands
//! in-process.

pub mod commands;
pub mod config;

pub use commands::{exit_code, run, Cli};
