//! Library surface of the `rensynth` binary: configuration schemas and the
//! subcommand implementations, exposed so integration tests can drive them
//! without going through a shell.

pub mod commands;
pub mod config;
