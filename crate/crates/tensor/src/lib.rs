//! Dense tensor compute for the world-model training stack: a define-by-run
//! autodiff tape, AdamW, value schedules and EMA updates.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod schedule;
pub mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Gradients, Graph, OpKind, Var};
pub use optim::{adamw_step, AdamWConfig, AdamWState};
pub use params::{ema_update, Binder, ParamStore};
pub use scalar::{DType, Scalar};
pub use schedule::{schedule_value, ScheduleKind, ScheduleSpec};
pub use tensor::Tensor;
