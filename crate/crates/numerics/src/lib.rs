//! Numerical substrate for KRLM: dense row-major matrices, a reverse-mode
//! tape, named parameters with a frozen/trainable split, AdamW and a binary
//! checkpoint container.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod real;
pub mod tape;
pub mod tensor;

pub use checkpoint::{Checkpoint, Manifest};
pub use error::{NumericsError, Result};
pub use gradcheck::{check_params, GradCheckOptions, GradCheckReport};
pub use optim::{AdamW, AdamWConfig, OptimizerState};
pub use params::{Binding, ParamId, ParamStore, Parameter, Scope};
pub use real::Real;
pub use tape::{EdgeIndex, Gradients, Mask, Tape, Var};
pub use tensor::Tensor;
