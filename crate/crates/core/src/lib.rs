//! Sparse-input local implicit image function (SpLIIF) downscaling of
//! station weather observations onto topography-aware continuous fields.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod fsutil;
pub mod interp;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, FormatError, Result};
