//! Desk-scale laboratory for contrastive sentence-embedding distillation.
//!
//! The crate trains tiny contrastive encoders on synthetic topic corpora,
//! distills them into students through temperature-scaled logit matching
//! (optionally shuffling or ensemble-averaging the teacher logits first),
//! iterates teacher/student rounds, and measures the variance phenomena that
//! motivate those interventions. Everything is seeded and bit-deterministic:
//! the same seed yields byte-identical metrics across runs and thread counts.

// Validation guards are written `!(x > 0.0)` on purpose: NaN fails the inner
// comparison and is rejected, where `x <= 0.0` would let it through.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod diagnostics;
pub mod encoder;
pub mod error;
pub mod logit_transform;
pub mod numeric;
pub mod objectives;
pub mod training;

pub use error::{Error, Result};

/// Concrete scalar used by every pipeline stage. The numeric core is generic
/// over [`numeric::Scalar`]; everything above it runs in f64 because desk
/// scale makes precision cheap and keeps gradient checks tight.
pub type Real = f64;
