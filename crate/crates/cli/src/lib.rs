//! Library half of the `disentangle` command: experiment configs, the four
//! commands and figure rendering.

pub mod commands;
pub mod config;
pub mod generate;
