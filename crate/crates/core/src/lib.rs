// Negated comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bridges;
pub mod datasets;
pub mod error;
pub mod flows;
pub mod geometry;
pub mod precompute;
pub mod predictor;
pub mod rng;
pub mod rnormal;
pub mod sampling_eval;
pub mod schedules;
pub mod training;

pub use error::{Error, Result};
