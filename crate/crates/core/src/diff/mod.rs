//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every primitive as it executes. Leaves are created
//! with [`Tape::param`] (trainable) or [`Tape::constant`]; after
//! [`Tape::backward`] the gradient of each trainable leaf is available via
//! [`Tape::grad`].
//!
//! ```
//! use spglift::diff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::scalar(3.0));
//! let y = tape.mul(x, x).unwrap();
//! tape.backward(y).unwrap();
//! assert_eq!(tape.grad(x).unwrap().item().unwrap(), 6.0);
//! ```
//!
//! Binary elementwise operations broadcast with numpy rules. Convolution
//! and batch normalization use a channels-last layout (`[batch, time,
//! channels]`).

mod tape;
mod tensor;

pub use tape::{BnMode, BnRunning, Tape, Var, BN_EPS, BN_MOMENTUM};
pub use tensor::Tensor;


use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: domain error: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("{0}")]
    Contract(String),
}
