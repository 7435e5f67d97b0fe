//! Configuration and stage orchestration for the `flowcc` command-line tool.

pub mod config;
pub mod pipeline;
