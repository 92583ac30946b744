// `!(a <= b)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Frozen reference values in tests keep every digit they were computed with.
#![cfg_attr(test, allow(clippy::excessive_precision))]

pub mod config;
pub mod data;
pub mod denoise;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod mixalg;
pub mod rng;
pub mod sample;
pub mod sde;
pub mod train;

pub use error::{Error, Result};
pub use mixalg::{Permutation, StackedSignal};
pub use sde::{NoiseScales, SdeParams};
