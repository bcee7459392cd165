//! A small dynamic-graph reverse-mode differentiation engine.
//!
//! Values live in dense row-major [`Tensor`]s. A [`Graph`] records every
//! primitive applied to its [`Var`] handles; [`Graph::backward`] replays the
//! record in reverse and returns [`Gradients`]. Trainable state is kept in a
//! [`ParamStore`] and updated by [`Adam`].
//!
//! ```
//! use dgf_grad::{Graph, Tensor};
//!
//! let g = Graph::new();
//! let x = g.variable(Tensor::vector(vec![1.0, 2.0, 3.0]));
//! let loss = x.square().sum();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.wrt(x).unwrap(), &[2.0, 4.0, 6.0]);
//! ```

mod adam;
mod check;
mod error;
mod graph;
mod params;
mod tensor;

pub use adam::{Adam, AdamConfig, AdamState};
pub use check::{grad_check, grad_check_params};
pub use error::{GradError, Result};
pub use graph::{Gradients, Graph, Var};
pub use params::{Param, ParamId, ParamStore};
pub use tensor::Tensor;
