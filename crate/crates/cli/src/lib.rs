//! Library side of the `spherediff` binary: run configuration, exit codes,
//! subcommand implementations and the diagnostic reports.

pub mod commands;
pub mod config;
pub mod diagnose;
pub mod exit;
