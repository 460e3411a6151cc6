//! Self-supervised video representation learning for group activity
//! recognition: multi-rate view sampling, teacher/student self-distillation
//! over a divided space-time attention transformer, linear probing, and the
//! group-activity evaluation metrics.

pub mod backbone;
pub mod checkpoint;
pub mod dataset;
pub mod distill;
pub mod error;
pub mod frames;
pub mod metrics;
pub mod optim;
pub mod probe;
pub mod provenance;
pub mod schedule;
pub mod trainer;
pub mod views;
pub mod viz;

pub use error::{Error, Result};
