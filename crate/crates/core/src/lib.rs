//! Numerical core for two-stage distillation from a frozen vision-language
//! model, through a trainable intermediate teacher, into a lightweight
//! student.
//!
//! Everything here is pure computation over heap buffers: no files, no
//! clocks, no threads. The `dait` crate layers IO, checkpoints and the CLI
//! on top.
#![no_std]

#[cfg(test)]
extern crate std;

extern crate alloc;

pub mod analysis;
pub mod data;
pub mod encoders;
mod error;
pub mod losses;
pub mod math;
pub mod nn;
pub mod rng;
pub mod schedule;
pub mod tensor;

pub use error::{Error, Result};
pub use losses::{ClassAnchors, KlOrder, LossGrad, Temperature};
pub use schedule::ScheduleParams;
pub use tensor::{FeatureBatch, FeatureMap, LogitBatch, Matrix};
