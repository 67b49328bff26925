//! DMD-acquisition simulator and trainer for learnable under-sampling masks
//! on vision transformers.

// `!(x >= 0.0)` is deliberate throughout: it rejects NaN too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod config;
pub mod data;
pub mod dmd;
pub mod embed;
pub mod error;
pub mod mask;
pub mod model;
pub mod par;
pub mod params;
pub mod schedule_file;
pub mod tensor;
pub mod train;
pub mod vit;
pub mod viz;

pub use error::{Error, Result};
