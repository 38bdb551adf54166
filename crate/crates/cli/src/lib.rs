//! Command implementations behind the `g3dk` binary.

pub mod commands;
pub mod error;
