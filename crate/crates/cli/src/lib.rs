//! Library surface of the `ossd` binary: run configuration, matrix files,
//! and the subcommand implementations. Kept as a lib so integration tests
//! can exercise the same code paths the binary runs.

pub mod commands;
pub mod config;
pub mod error;
pub mod matfile;
