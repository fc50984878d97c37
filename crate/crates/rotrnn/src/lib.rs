//! Rotation-based linear recurrent sequence modeling.
//!
//! The recurrent state matrix is constrained to the rotation group SO(N)
//! via `A = exp(M - Mᵀ)` and factored as `A = P·Θ·Pᵀ` so that matrix powers
//! cost O(N) per step. A scalar decay `γ ∈ (0, 1)` and an exact input
//! rescaling keep the expected hidden-state norm constant over arbitrarily
//! long sequences. The crate provides:
//!
//! - [`rotor`]: rotation algebra (skew construction, matrix exponential and
//!   its Fréchet derivative, block-rotation application and powers)
//! - [`scan`]: the associative rotation-decay scan, sequential and parallel
//! - [`layer`]: the recurrent layer with multi-head decay and normalization
//! - [`model`]: residual sequence-classification network around the layer
//! - [`lru_ref`]: reference diagonal complex linear RNN and the exact
//!   embedding of two-dimensional heads into it
//! - [`grad`]: hand-written reverse-mode gradients and the Adam optimizer
//! - [`tasks`]: deterministic synthetic datasets
//! - [`oracle`]: slow dense reference implementations for tests

pub mod error;
pub mod grad;
pub mod layer;
pub mod linalg;
pub mod lru_ref;
pub mod model;
pub mod oracle;
pub mod rotor;
pub mod scan;
pub mod tasks;

pub use error::{Error, Result};
