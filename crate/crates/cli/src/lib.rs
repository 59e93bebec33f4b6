//! Orchestration for the `modctx` binary: run configuration, the on-disk
//! run layout, one function per subcommand, and the scoring service.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod serve;
