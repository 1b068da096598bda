//! Tape-based reverse-mode automatic differentiation over dense CPU tensors.
//!
//! ```
//! use autodiff::{Tape, Tensor};
//!
//! let tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::new([1], vec![3.0]).unwrap(), true);
//! let y = x.mul(x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
//! ```

mod checkpoint;
mod error;
mod gradcheck;
mod kernels;
mod primitive;
mod tape;
mod tensor;

pub use checkpoint::{Stored, TensorPack};
pub use error::{Error, Result};
pub use gradcheck::{grad_check, grad_check_fn, reference_cases};
pub use primitive::{forward_eval, Primitive};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{fast_expf, DType, Element, Tensor};
