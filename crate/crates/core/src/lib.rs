//! Nonlinear splittings of fibre bundles in adapted coordinates.

// NaN-rejecting comparisons and index loops over jet buffers are deliberate.
#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::suspicious_arithmetic_impl
)]

pub mod bundle;
pub mod error;
pub mod expr;
pub mod jet;
pub mod lagrangian;
pub mod nonholonomic;
pub mod numerics;
pub mod reduction;
pub mod sampling;
pub mod splitting;

pub use error::{Error, Result};
