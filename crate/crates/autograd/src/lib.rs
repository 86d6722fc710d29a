//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The crate is deliberately small: a [`Tensor`] is a shape plus a flat
//! row-major buffer, a [`Tape`] records every operation applied to registered
//! tensors, and [`Tape::backward`] replays the record once in reverse to
//! produce exact gradients. There is no broadcasting engine, no lazy
//! evaluation, and no SIMD — just the operations a convolutional policy
//! network needs, each written as a plain loop so results are reproducible
//! bit for bit across runs and thread counts.
//!
//! ```
//! use autograd::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(&Tensor::new(&[2], vec![1.0, -3.0]).unwrap());
//! let y = tape.mul(&x, &x).unwrap();
//! let loss = tape.reduce_sum(&y, &[0]).unwrap();
//! let grads = tape.backward(&loss).unwrap();
//! assert_eq!(grads.of(&x).data(), &[2.0, -6.0]);
//! ```

mod tape;
mod tensor;

pub use tape::{Gradients, Tape};
pub use tensor::{NodeId, Tensor, TensorError};
