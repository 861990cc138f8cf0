//! Dense `f64` tensors with a reverse-mode tape, an Adam optimizer and
//! seeded random streams. Sized for models of a few hundred thousand
//! parameters on the CPU.

mod adam;
mod error;
mod gradcheck;
mod graph;
mod ops;
mod params;
mod rng;

pub use adam::{AdamConfig, AdamState, OptimError};
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckReport, REL_FLOOR};
pub use graph::{broadcast_shape, Array, CustomOp, Gradients, Graph, Var};
pub use ops::{softplus, MASK_NEG};
pub use params::{Bound, ParamId, ParamStore};
pub use rng::Rng;

pub use ndarray;
