//! Forward and backward tensor kernels. These are plain functions on
//! [`Tensor`](crate::Tensor); the [`autograd`](crate::autograd) graph wires them together.

pub mod activation;
pub mod conv;
pub mod linear;
pub mod norm;
pub mod pool;

pub use activation::{relu, sigmoid, softmax_classes, softmax_cross_entropy, IGNORE_LABEL};
pub use conv::{conv2d, conv3d, conv_transpose2d, Conv2dSpec, Conv3dSpec, Padding};
pub use linear::{linear, mlp2};
pub use norm::{batch_norm, RunningStats};
pub use pool::{channel_pool, global_pool, pool2d, PoolMode};
