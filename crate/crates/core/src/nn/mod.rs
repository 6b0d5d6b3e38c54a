//! Minimal dense neural-network kernel: convolution, max pooling, fully
//! connected layers and activations with exact backpropagation, trained by
//! SGD with momentum.

mod layer;
mod network;
mod tensor;
mod train;

pub use layer::{sigmoid, LayerSpec, MAX_PROB};
pub use network::{chain_shapes, Cache, Gradients, Network, ParamGrads};
pub use tensor::{Shape, Tensor};
pub use train::{bce, bce_with_logit, sgd_step, train, Schedule, TrainConfig, TrainOutcome, Trainer};
