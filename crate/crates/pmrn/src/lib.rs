//! Few-shot image classification built on mined visual primitives.
//!
//! The crate trains a small convolutional backbone episodically, groups its
//! feature channels into spatial primitives, reasons over them with a graph
//! layer stack, and classifies queries with a task-weighted primitive-level
//! cosine metric. A jigsaw pretext task regularizes the backbone toward
//! part-aware channels. Everything runs on a hand-rolled f64 tensor graph
//! with reverse-mode differentiation so gradients are checkable against
//! finite differences.

pub mod acg;
pub mod backbone;
pub(crate) mod byteio;
pub mod config;
pub mod crn;
pub mod data;
pub mod error;
pub mod imgproc;
pub mod jigsaw;
pub mod metric;
pub mod model;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
