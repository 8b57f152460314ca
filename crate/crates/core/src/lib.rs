pub mod augment;
pub mod config;
pub mod error;
pub mod formats;
pub mod gradcam;
pub mod metrics;
pub mod mmode;
pub mod model;
pub mod ops;
pub mod optim;
pub mod pairs;
pub mod ssl;
pub mod synth;
pub mod tape;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{ComputationTape, Gradients, NodeId};
pub use tensor::Tensor;
