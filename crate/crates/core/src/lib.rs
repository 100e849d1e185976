//! Fast-weight test-time-training sequence layers and their closed-form
//! linear-attention equivalents.
//!
//! The crate is organized around one claim, checked numerically throughout:
//! a TTT layer whose inner loop does gradient steps on a key-value binding
//! loss computes the same outputs as a linear-attention operator built from
//! effective queries, keys and values. Modules:
//!
//! - [`numerics`] — matrices, activations, Newton–Schulz orthogonalization,
//!   weight normalization and the finite-difference gradient oracle.
//! - [`fastweight`] — the sequential SwiGLU fast-weight inner loop with
//!   learning rate, momentum, orthogonalization and weight normalization,
//!   recording full trajectories.
//! - [`linear_form`] — closed-form reconstructions of recurrent outputs from
//!   trajectory snapshots, plus the plain causal linear-attention operator.
//! - [`parallel`] — chunk-parallel execution for static-kernel,
//!   unnormalized configurations: masked bilinear form and associative
//!   prefix scan.
//! - [`vittt`] — the GLU and depthwise-convolution fast-weight components
//!   with their linear-attention forms.
//! - [`variants`] — the six-step reduction ladder from the full inner loop
//!   down to standard linear attention.

pub mod error;
pub mod fastweight;
pub mod linear_form;
pub mod numerics;
pub mod parallel;
pub mod variants;
pub mod vittt;

pub use error::{Error, Result};
pub use numerics::{Mat, Rng};
