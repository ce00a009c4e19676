#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod autodiff;
pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
pub mod geometry;
pub mod detector;
pub mod graph;
pub mod matcher;
pub mod losses;
pub mod decode;
pub mod eval;
pub mod config;
pub mod pipeline;
pub mod train;
pub mod io;
pub mod render;
