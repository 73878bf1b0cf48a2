//! Deterministic numeric core: dense matrices, seedable random streams, a
//! reverse-mode tape, and finite-difference gradient validation.

pub mod gradcheck;
pub mod graph;
pub mod matrix;
pub mod rng;
pub mod scalar;

pub use gradcheck::{finite_diff_check, Evaluation};
pub use graph::{Graph, NodeId};
pub use matrix::{softmax_row, Matrix, EPS_NORM};
pub use rng::RngStream;
pub use scalar::Scalar;
