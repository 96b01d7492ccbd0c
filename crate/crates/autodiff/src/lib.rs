//! Dense 64-bit tensors with a record-then-backward differentiation tape,
//! an AdamW optimizer with parameter groups, a finite-difference gradient
//! oracle and a binary checkpoint format.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use error::{AutodiffError, Result};
pub use gradcheck::{finite_difference_at, finite_difference_gradient, max_relative_error, relative_error};
pub use optim::{AdamW, ParamGroup};
pub use params::{Bindings, Param, ParamId, ParamSet};
pub use tape::{Tape, Var, LOG_CLAMP};
pub use tensor::Tensor;
