//! Text-classification CNNs built on a small reverse-mode autograd.
//!
//! Three architectures share one layer vocabulary: the classic multi-width
//! TextCNN, a slimmer variant with fewer and smaller filters, and a
//! lightweight network of depthwise, pointwise and dilated convolutions with
//! batch normalization. Training supports Adam, SGD with momentum, and a
//! switch from the former to the latter at a fixed step.

pub mod arch;
pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod layers;
pub mod optim;
pub mod tensor;

pub use autograd::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use tensor::{init, Init, Rng, Tensor};
