//! Primitive layers: forward passes for both networks, and the backward
//! passes the classifier trainer needs.

pub mod activation;
pub mod conv;
pub mod linear;
pub mod norm;
pub mod pool;

pub use activation::{relu, relu_backward, sigmoid, sigmoid_scalar, softmax};
pub use conv::{conv2d, conv2d_backward, conv_param_count, output_extent, ConvGrads, ConvParams, Padding};
pub use linear::{add_backward, fully_connected, fully_connected_backward, LinearGrads};
pub use norm::{
    batchnorm_infer, batchnorm_train_backward, batchnorm_train_forward, update_running_stats,
    BatchNormGrads, BatchNormParams, BatchStats, BN_EPSILON, BN_MOMENTUM,
};
pub use pool::{global_avgpool, global_avgpool_backward, maxpool, maxpool_backward, upsample_nearest_2x};
