//! Two-stage weld-sign recognition: an orientation classifier built from
//! grouped-convolution residual blocks, a compact detector with a spatial and
//! channel enhancement block, and the tooling around them (cost analysis,
//! decoding, evaluation, training, synthetic data and the end-to-end pipeline).

pub mod cost;
pub mod detect;
pub mod error;
pub mod graph;
pub mod imageops;
pub mod metrics;
pub mod ops;
pub mod pipeline;
pub mod sce;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod weights;

pub use error::{Error, Result, WeightFileError};
pub use graph::{build_grnet, build_gynet, execute, infer_shapes, Executor, LayerKind, LayerSpec, NetGraph};
pub use tensor::{concat_channels, elementwise_add, Tensor};
pub use weights::WeightStore;
