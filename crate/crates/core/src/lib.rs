pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod metrics;
pub mod mca;
pub mod network;
pub mod ops;
pub mod params;
pub mod pipeline;
pub mod tensor;
pub mod train;
pub mod wavelet;
pub mod wtbc;

pub use error::{Error, Result};
pub use tensor::Tensor;
