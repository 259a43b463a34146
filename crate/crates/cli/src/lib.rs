//! Command-line front-end for the open-world detection engine: ingest and
//! align teacher labels, train and evaluate the synthetic benchmark, and run
//! the full multi-episode protocol.

pub mod commands;
pub mod config;
pub mod overlay;
pub mod pipeline;
