//! Learning ODE vector fields from trajectory samples with sparse Gaussian
//! processes.
//!
//! The learning procedure has two steps. Scalar GPs over time smooth each
//! state component and supply derivative observations ([`dense_gp`]). A
//! FITC sparse GP with a matrix-valued kernel is then fitted to the
//! state/derivative pairs ([`sparse_gp`]). Structural knowledge enters
//! through known fixed points, rotation-equivariant kernels evaluated on a
//! quotient section, and second-order models that learn only accelerations
//! ([`pipeline`]).
//!
//! The crate is `no_std` and needs only `alloc`.

#![no_std]
// `!(x > 0.0)` is the intended spelling: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod dense_gp;
pub mod dynamics;
pub mod error;
pub mod kernels;
pub mod numerics;
pub mod optimize;
pub mod pipeline;
pub mod sparse_gp;

pub use error::{Error, Result};
