//! Speaker-based multi-task learning for sequence recognition.
//!
//! The crate trains a tappable block-stack sequence recognizer under a CTC
//! objective and studies auxiliary speaker objectives attached to
//! intermediate blocks:
//!
//! - **speaker enhancing**: a focal-scaled cross-entropy speaker classifier
//!   on a lower block, increasing speaker discriminability;
//! - **speaker adversarial**: a classifier behind a gradient reversal layer
//!   on a higher block, suppressing speaker variance — with either a fixed
//!   reversal scale or the adaptive scale that tracks the discriminator's
//!   batch-mean target posterior;
//! - **joint and sequential combinations** of the two;
//! - a **probing harness** that measures per-block speaker identification
//!   accuracy of a frozen backbone.
//!
//! Everything is `f64` and deterministic: fixed seeds reproduce training
//! logs and checkpoints bit for bit, with or without the `parallel` feature.

pub mod checkpoint;
pub mod ctc;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod objectives;
pub mod par;
pub mod params;
pub mod probe;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
