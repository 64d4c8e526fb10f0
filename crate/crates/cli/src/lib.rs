//! `hear` command line and HTTP session service.

pub mod commands;
pub mod config;
pub mod run;
pub mod server;

pub use commands::run_cli;
