//! Per-input explanations for feed-forward networks.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`io`], [`rng`]: dense tensors, binary formats, seeded randomness.
//! - [`model`]: layer DAG, forward pass with retained activations, manifest I/O,
//!   reference models.
//! - [`autodiff`]: per-layer vector-Jacobian products, input gradients and a
//!   finite-difference oracle.
//! - [`backend`]: conditional backward mappings compiled into reusable
//!   analysis plans.
//! - [`sample`]: Input x Gradient, Integrated Gradients, SmoothGrad,
//!   occlusion and LIME.
//! - [`prop`]: Guided Backprop, DeconvNet, Deep Taylor, LRP rules,
//!   PatternNet and PatternAttribution.
//! - [`analyzer`]: one build/analyze interface over all methods.
//! - [`viz`]: heatmaps and the other renderers, PNG output.

pub mod analyzer;
pub mod autodiff;
pub mod backend;
pub mod error;
pub mod io;
pub mod model;
pub mod prop;
pub mod rng;
pub mod sample;
pub mod saliency;
pub mod tensor;
pub mod viz;

pub use error::{Error, Result};
pub use saliency::Saliency;
pub use tensor::Tensor;
