//! Gravitational allocation of the sphere to finite point sets.
//!
//! Sources act as wells of the logarithmic potential `U(x) = Σ log|x − z|`
//! on the sphere of area `n`. Every point flows along `F = −∇U` into a
//! source, and each basin of attraction has area one.

// Negated comparisons are used on purpose so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod critical;
pub mod error;
pub mod field;
pub mod flow;
pub mod geometry;
pub mod matching;
pub mod process;
pub mod report;
pub mod stats;
pub mod study;

pub use error::{Error, Result};
pub use field::{Configuration, TangentVector};
pub use geometry::{PlanarPoint, Rotation, SphereParams, SpherePoint};
pub use process::Seed;
