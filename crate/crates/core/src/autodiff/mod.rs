//! Small double-precision reverse-mode engine: tensors, a recording tape,
//! counter-based random streams and two optimizers.

pub mod gradcheck;
mod optim;
mod params;
mod rng;
mod tape;
mod tensor;

pub use optim::{OptimizerHyper, OptimizerKind, OptimizerState};
pub use params::{ParamId, ParamStore};
pub use rng::{streams, RngStream, RNG_ALGORITHM};
pub use tape::{dropout, dropout_mask, Gradients, Mode, Primitive, Tape, Var};
pub use tensor::Tensor;
