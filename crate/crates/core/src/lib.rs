//! Sequence-based deformable 2D registration: a recurrent network that emits
//! Gaussian local deformations, a multi-resolution B-spline baseline and an
//! evaluation harness.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod baseline;
pub mod data;
pub mod deform;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod io;
pub mod net;
pub mod objectives;
pub mod optim;
pub mod train;

pub use error::{Error, Result};
pub use geometry::{make_grid, warp, DisplacementField, Grid2D, Image2D};
