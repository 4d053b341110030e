//! Dimension recommendation for cloud monitors with heterogeneous graph
//! attention, random-walk path attention and a composite ranking objective.

pub mod autograd;
pub mod error;
pub mod eval;
pub mod tensor;

pub use autograd::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod losses;
pub mod model;
pub mod sampling;
pub mod train;
