//! Minimal dense/convolutional network substrate: tensors, a parameter
//! store with SGD, sequential layer graphs with reverse-mode gradients,
//! soft-target cross-entropy, and analysis helpers.

pub mod graph;
pub mod loss;
pub mod params;
pub mod stats;
pub mod tensor;

pub use graph::{Activations, Graph, LayerKind, LayerSpec};
pub use loss::{cross_entropy, cross_entropy_grad, PROB_EPS};
pub use params::{Param, ParamStore};
pub use stats::{pca2, pearson, Pca2};
pub use tensor::Tensor;
