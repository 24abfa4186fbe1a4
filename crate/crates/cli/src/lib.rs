//! Experiment runner behind the `forchestra` command.

pub mod commands;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod run;
