//! The tiny differentiable language model, its exact gradients, the optimizer
//! and the checkpoint format.

pub mod checkpoint;
pub mod grad;
pub mod model;
pub mod optim;
pub mod tensor;

pub use grad::{grad_params, grad_wrt_state, jacobian_at, jacobian_wrt_state, Gradients, OutputRep, Tape, TraceId, Trainable};
pub use model::{continuation_logprob, Head, InjectMode, Injection, Layer, Nonlinearity, TinyLM, Trace};
pub use optim::{adamw_step, step_model, AdamWConfig, OptimizerState};
pub use tensor::Tensor;
