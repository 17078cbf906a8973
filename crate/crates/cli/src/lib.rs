//! Library surface of the command-line tool: configuration, the command
//! implementations, and the plot renderer. The binary in `main.rs` only
//! parses arguments and forwards here, which keeps every code path
//! reachable from integration tests.

pub mod commands;
pub mod config;
pub mod plot;
