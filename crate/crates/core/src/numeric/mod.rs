//! Dense `f64` tensors, a reverse-mode tape, parameter stores, optimizers and checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use optim::{Adam, Optimizer, Sgd};
pub use params::{Bound, Parameter, ParameterStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{matmul_plain, Tensor};
