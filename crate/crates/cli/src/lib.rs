//! File formats and workflows behind the `dsarf` command.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
