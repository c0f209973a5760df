//! Numerical toolkit for slicings of vector fields and their
//! Hamilton–Jacobi theory on symplectic, Poisson and tangent-bundle
//! structures.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod corpus;
pub mod dynamics;
pub mod error;
pub mod expr;
pub mod geometry;
pub mod linalg;
pub mod poisson;
pub mod report;
pub mod runner;
pub mod slicing;
pub mod sode;
pub mod symplectic;
pub mod sysdef;
pub mod tolerances;

pub use error::{Error, Result};
