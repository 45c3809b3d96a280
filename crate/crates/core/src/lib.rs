// Guards such as `!(x > 0.0)` are negated on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod error;

pub mod diffusion;
pub mod grid;
pub mod harness;
pub mod integrator;
pub mod limit;
pub mod modulation;
pub mod noise;
pub mod soliton;
pub mod stats;

pub use error::{Error, Result};
