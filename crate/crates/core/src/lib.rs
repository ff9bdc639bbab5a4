// Validation is written `!(x > y)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod field;
pub mod kernel;
pub mod kernel_learn;
pub mod kv;
pub mod linalg;
pub mod matching;
pub mod model_io;
pub mod operator;
pub mod parametric;
pub mod pipeline;
pub mod simulate;
pub mod smoother;
pub mod sparse;
pub mod timeseries;
