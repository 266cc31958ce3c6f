//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Build a [`Graph`] by registering parameters and constants and chaining
//! ops; every op evaluates immediately. [`Graph::backward`] returns the
//! gradient of a scalar root with respect to every parameter, and
//! [`Graph::grad`] returns gradient *nodes* that can be differentiated again.
//!
//! ```
//! use autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param("x", Tensor::scalar(3.0));
//! let y = g.mul(x, x).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.get("x").unwrap().item(), 6.0);
//! ```

pub mod check;
pub mod error;
pub mod graph;
pub mod optim;
pub mod tensor;

pub use check::{grad_check, GradCheckReport};
pub use error::{AdError, Result};
pub use graph::{Gradients, Graph, NodeId, SparseMap};
pub use optim::{Adam, Optimizer, Sgd};
pub use tensor::Tensor;
