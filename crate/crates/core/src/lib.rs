//! Progressive image deraining networks — PRN, PReNet and their
//! recursive-ResBlock variants — together with the minimal differentiable
//! tensor engine, training objectives, ADAM trainer, and data pipeline they
//! need. Everything runs on the CPU and is deterministic for a fixed seed.

pub mod data;
pub mod error;
pub mod loss;
pub mod net;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{BackwardStatus, FilterKernel, Scalar, Shape, Tape, Tensor, Var};
