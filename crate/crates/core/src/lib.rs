//! Normalize-then-scale softmax training, von Mises-Fisher utilities,
//! quality-aware template pooling and face-matching evaluation metrics.

// `!(x > 0.0)` is used deliberately so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregation;
pub mod config;
pub mod error;
pub mod eval;
pub mod io;
pub mod loss;
pub mod math;
pub mod trainer;
pub mod vmf;

pub use error::{Error, Result};
pub use loss::{
    alpha_lower_bound, avg_class_probability, crystal_backward, crystal_forward, CrystalHead,
};
pub use math::{DenseMatrix, DenseVector};
