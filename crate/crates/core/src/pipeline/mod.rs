//! Batch pipeline: configuration, persistence, synthetic corpora and the
//! command implementations behind the `didkit` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod runlog;
pub mod synth;

pub use checkpoint::Checkpoint;
pub use config::PipelineConfig;
