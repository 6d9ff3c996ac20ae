//! Dense `f64` tensors, a tape-based reverse-mode differentiation graph, and
//! the Adam optimizer.
//!
//! ```
//! use ndgrad::{Graph, Tensor};
//!
//! let g = Graph::new();
//! let x = g.param(Tensor::from_slice(&[2], &[1.0, -2.0]).unwrap());
//! let y = g.sum(g.relu(x));
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[1.0, 0.0]);
//! ```

mod adam;
mod error;
pub mod gradcheck;
mod graph;
mod kernels;
mod tensor;

pub use adam::{AdamConfig, AdamState, ParamMap};
pub use error::{NdError, Result};
pub use graph::{smooth_l1, softmax_rows, Gradients, Graph, Var};
pub use kernels::CellRegion;
pub use tensor::Tensor;
