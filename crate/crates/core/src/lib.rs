//! Instrumented style-based image synthesis for studying feature
//! proliferation: rare per-channel activations that spread through later
//! layers and corrupt the output.
//!
//! The crate is organised as a pipeline:
//!
//! * [`generator`] runs the forward pass and exposes every intermediate map
//!   to a [`generator::FeatureHook`].
//! * [`stats`] estimates per-channel activation statistics over many latents.
//! * [`detector`] scores maps against those statistics.
//! * [`cure`] rewrites flagged channels during generation and injects
//!   synthetic outliers.
//! * [`metrics`] compares images.
//! * [`weight_io`] reads and writes the weight container.

pub mod cure;
pub mod detector;
pub mod error;
pub mod generator;
pub mod metrics;
pub mod rng;
pub mod stats;
pub mod tensor;
pub mod weight_io;

pub use error::{ContainerError, Error, Result};
pub use tensor::Tensor;
