//! Command-line front end: run configuration and the operator verbs.

pub mod commands;
pub mod config;
