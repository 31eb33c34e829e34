//! Dense differentiable building blocks with hand-written backward passes.

pub mod check;
pub mod dense;
pub mod loss;
pub mod matrix;

pub use check::{gradcheck, Fragment, GradcheckReport, Probe};
pub use dense::{dense_backward, dense_forward, Activation, DenseGrads, DenseLayer, GradTape, Sequential, SequentialTape};
pub use loss::{softmax_xent, squared_error};
pub use matrix::Matrix;
