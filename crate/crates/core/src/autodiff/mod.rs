//! Tape-based reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records every operation as it is evaluated. Calling
//! [`Tape::backward`] on a scalar node sweeps the tape once in reverse and
//! accumulates gradients into every node that requires one. Tapes are cheap
//! and meant to be rebuilt for each training step.
//!
//! ```
//! use ncpwatt::autodiff::{Array, Tape};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Array::scalar(3.0));
//! let y = tape.mul(x, x).unwrap();
//! tape.backward(y).unwrap();
//! assert_eq!(tape.grad(x).unwrap().item(), Some(6.0));
//! ```

mod array;
mod tape;

pub use array::Array;
pub use tape::{sigmoid, softplus, softplus_inverse, NodeId, Tape};
