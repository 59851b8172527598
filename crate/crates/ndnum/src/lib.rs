//! Small dense-array toolkit: tensors, a reverse-mode tape, AdamW and
//! gradient clipping. Generic over `f32` (training) and `f64` (gradient checks).

mod error;
mod optim;
mod scalar;
mod tape;
mod tensor;

pub use error::{NdError, Result};
pub use optim::{clip_grad_norm, cosine_lr, AdamW, AdamWConfig, CosineSchedule};
pub use scalar::Scalar;
pub use tape::{cross_entropy_smoothed, log_softmax, softmax_in_place, Grads, Tape, Var, LAYERNORM_EPS};
pub use tensor::Tensor;
