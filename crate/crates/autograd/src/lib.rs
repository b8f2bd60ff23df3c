//! Minimal dense tensor kernel with tape-based reverse-mode differentiation.
//!
//! The crate provides exactly the operations a hybrid CNN + Transformer depth
//! network needs (matmul, grouped conv2d, pooling, normalization, softmax,
//! activations, reshaping) together with a central finite-difference oracle
//! for checking every backward rule, and an Adam optimizer.
//!
//! ```
//! use himode_autograd::{Graph, Tensor};
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.input(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap(), true);
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
//! ```

pub mod adam;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod scalar;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use error::{Result, TensorError};
pub use gradcheck::{
    check_gradients, finite_diff_gradient, relative_error, GradCheckConfig, TensorCheck,
};
pub use graph::{activate, Activation, Graph, LossKind, OpKind, Var};
pub use scalar::{lit, Float};
pub use tensor::{numel, Tensor};
