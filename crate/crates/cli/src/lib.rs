//! Command-line front end: JSON documents and the `analyze`, `synth`,
//! `verify` and `freq` commands.

pub mod commands;
pub mod doc;

pub use commands::{run, Cli, Outcome};
