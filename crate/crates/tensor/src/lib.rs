//! Dense tensors and a tape-based reverse-mode differentiator.
//!
//! Values are plain [`Tensor`]s. Computations that need gradients are
//! recorded on a [`Tape`]: every primitive returns a [`Var`] handle and
//! pushes a node holding its output plus whatever its adjoint needs.
//! [`Tape::backward`] replays adjoints in reverse execution order.
//!
//! ```
//! use sfda_tensor::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.param(Tensor::new([2], vec![3.0, 4.0]).unwrap());
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[6.0, 8.0]);
//! ```

mod backward;
mod error;
pub mod gradcheck;
pub mod kernels;
mod ops;
mod real;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use kernels::ConvGeom;
pub use ops::{BatchStats, NormMode};
pub use real::Real;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
