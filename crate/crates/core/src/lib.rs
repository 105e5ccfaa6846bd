#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibration;
pub mod cli;
pub mod error;
pub mod evaluate;
pub mod glob;
pub mod model;
pub mod nnls;
pub mod predict;
pub mod profile;
pub mod synth;
pub mod trace;

pub use error::{Error, Result};
