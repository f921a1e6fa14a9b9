//! Dense channels-last tensors with tape-based reverse-mode differentiation.
//!
//! The op set is deliberately small: exactly what a plain ViT encoder and
//! its dense decoders need (matmuls, convolutions, bilinear sampling and
//! resizing, softmax, layer norm, GELU and elementwise arithmetic). Every
//! backward rule is checked against central finite differences in the
//! test suite.
//!
//! ```
//! use vpnext_tensor::{Graph, Tensor};
//!
//! let mut g = Graph::<f64>::new();
//! let a = g.param(&Tensor::new([1, 2], vec![1.0, 2.0]).unwrap());
//! let b = g.constant(&Tensor::new([2, 1], vec![3.0, 4.0]).unwrap());
//! let y = g.matmul(a, b).unwrap();
//! assert_eq!(g.value(y), &[11.0]);
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.get(a).data(), &[3.0, 4.0]);
//! ```

mod error;
pub mod gradcheck;
mod graph;
mod kernels;
mod ops;
mod scalar;
mod tensor;
pub mod tolerance;

pub use error::{Result, TensorError};
pub use graph::{Gradients, Graph, OpKind, OpRecord, Var};
pub use ops::{conv_out_len, Padding};
pub use scalar::Scalar;
pub use tensor::{numel, Tensor};
