//! Minimal feedforward image-network engine: dense, conv2d, ReLU, max-pool and flatten
//! layers with activation tracing, SGD training, evaluation and a binary model format.

pub mod io;
pub mod layer;
pub mod network;
pub mod tensor;
pub mod train;

pub use layer::{Conv2d, Dense, Layer, LayerKind, MaxPool, ParamGrads};
pub use network::{ActivationTrace, Network, Prediction, Task};
pub use tensor::{argmax, softmax, Tensor};
pub use train::{
    evaluate, evaluate_with, loss_and_grad, train, train_with_history, AccuracyReport, EvalConfig,
    LabeledDataset, Sample, Target, TrainConfig,
};
