//! Small reverse-mode automatic differentiation engine with the handful of
//! layers needed by convolutional summary networks and masked autoregressive
//! flows.
//!
//! A [`Graph`] records every operation of one forward pass. Calling
//! [`Graph::backward`] on a scalar node walks the record in reverse and
//! returns [`Grads`], from which parameter gradients are read by
//! [`ParamId`]. Parameters live in a [`ParamSet`] that outlives graphs and is
//! updated in place by [`Adam`].
//!
//! ```
//! use centro_nn::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.input(Tensor::scalar(3.0));
//! let y = g.mul(x, x).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.wrt(x).unwrap()[0], 6.0);
//! ```

mod adam;
mod error;
mod graph;
mod layers;
mod linalg;
mod params;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use error::{NnError, Result};
pub use graph::{Grads, Graph, Var};
pub use layers::{Conv2d, Dense, MaskedDense};
pub use params::{Checkpoint, ParamId, ParamSet};
pub use tensor::Tensor;
