//! IO, configuration and the command-line driver around `forge-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod eval;
pub mod manifest;
pub mod selftest;

pub use cli::run_command;
pub use config::ForgeConfig;
