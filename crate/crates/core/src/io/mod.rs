//! Configuration, artifact dumps and the subcommand bodies of the
//! command-line front end.

pub mod commands;
pub mod config;
pub mod dump;
