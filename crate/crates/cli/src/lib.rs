//! Experiment configuration, output handling and the study drivers behind
//! the `crossdiff` binary.

pub mod app;
pub mod config;
pub mod manifest;
pub mod output;
pub mod studies;
