//! Network transplanting: connect a frozen pre-trained category module to a
//! frozen pre-trained task module by learning only a small adapter.
//!
//! The adapter is optimized with a gradient-level distillation loss: instead
//! of matching outputs, teacher and student are forced to agree on
//! feature-agnostic pseudo-gradients at the junction between modules. Because
//! pseudo-gradients need no input images, the adapter can be learned with few
//! or zero labeled samples.
//!
//! Crate layout, bottom up:
//! - [`tensor`]: dense row-major tensors and the seeded generator.
//! - [`layers`]: the layer zoo with forward, true backward and pseudo-backward
//!   rules per layer.
//! - [`graph`]: role-tagged modules, teacher nets, transplant nets, grafting.
//! - [`checkpoint`]: manifest-plus-blob serialization, hash verified.
//! - [`backback`]: reified pseudo-backward graphs and differentiation of the
//!   distillation loss through them.
//! - [`train`]: the back-distill / direct-learn / distill strategies and the
//!   optimizers, all updating adapter parameters only.
//! - [`shapeworld`]: deterministic synthetic glyph datasets with exact masks.
//! - [`experiments`]: architecture presets, teacher pretraining, sweep plans
//!   and metric evaluation.

pub mod backback;
pub mod checkpoint;
pub mod error;
pub mod experiments;
pub mod graph;
pub mod layers;
pub mod parallel;
pub mod shapeworld;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{axpy_norms, Element, Precision, Rng, Shape, Tensor};
