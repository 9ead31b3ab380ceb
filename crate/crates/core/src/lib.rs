// `!(x > 0.0)` style checks are deliberate: NaN must fail them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod features;
pub mod global;
pub mod index;
pub mod matcher;
pub mod mser;
pub mod query;
pub mod svg;
pub mod synth;
pub mod tensor;

pub use error::{DsmError, Result};
