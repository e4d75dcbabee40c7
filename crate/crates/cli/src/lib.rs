//! Configuration loading and command implementations behind the `budgeted`
//! binary.

pub mod commands;
pub mod config;
