//! Two-stage distillation from a vision-language model through an
//! intermediate teacher into a small student: configuration, data
//! ingestion, checkpoints, training pipelines, reporting and analysis.

pub mod adapters;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod io;
pub mod pipeline;
pub mod plot;
pub mod report;

pub use dait_core;
pub use error::{DaitError, Result};
