//! Orchestration around `promo-core`: configuration, checkpoints, JSONL
//! datasets, the end-to-end pipeline, export and the `promo` command line.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod export;
pub mod pipeline;
