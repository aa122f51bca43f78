//! Library side of the `mmc` command: configuration, reports, and the subcommands.

pub mod ablate;
pub mod commands;
pub mod config;
pub mod report;
