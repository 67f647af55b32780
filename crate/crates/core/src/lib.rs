//! DeepLIFT-guided compression for small convolutional networks.

pub mod data;
pub mod deeplift;
pub mod error;
pub mod export;
pub mod mask;
pub mod mpq;
pub mod net;
pub mod profiler;
pub mod pruner;
pub mod sensitivity;
pub mod tensor;
pub mod trainer;
pub mod wsq;
pub mod zoo;

pub use error::{Error, Result};
pub use net::{Layer, LayerKind, Model};
pub use tensor::Tensor;
