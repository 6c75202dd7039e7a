//! Command-line front end: experiment configs, the plan / simulate / run /
//! report subcommands, and the file formats they exchange.

pub mod args;
pub mod commands;
pub mod config;
