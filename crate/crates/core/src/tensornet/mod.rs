//! Minimal differentiable network core: convolution, dense, rectifier and
//! average-pool layers with hand-written reverse passes for both weights and
//! input pixels, plain SGD, and a binary checkpoint format.

pub mod checkpoint;
mod network;
mod sgd;
mod spec;
mod tensor;

pub use network::{argmax, log_sum_exp, softmax, GuideModel, Network, Normalization, Objective, Trace};
pub use sgd::{Batch, EpochReport, StepReport};
pub use spec::{InputShape, LayerSpec, NetworkSpec};
pub use tensor::{l2_norm, Scalar, Tensor};
