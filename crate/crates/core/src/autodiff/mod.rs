//! Dense tensor ops with reverse-mode differentiation and an Adam optimizer.

pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tape;

pub use gradcheck::{grad_check, op_suite, GradCheckReport, OpCase};
pub use optim::{adam_step, AdamConfig};
pub use params::{Initializer, ParamStore};
pub use tape::{CustomOp, Gradients, Tape, Var};
