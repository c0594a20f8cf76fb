//! Declarative network graphs, the two network builders, shape inference and
//! the forward executor.

mod builders;
mod exec;
mod layer;
mod shapes;

pub use builders::{
    build_grnet, build_grnet_with, build_gynet, build_gynet_with, build_named, gcd, GrnetWidths, GynetConfig, GynetVariant, MODEL_NAMES,
    ANCHORS_PER_HEAD, GRNET_INPUT, GYNET_INPUT, ORIENTATION_CLASSES, SIGN_CLASSES,
};
pub use exec::{execute, forward_layer, Executor};
pub use layer::{LayerKind, LayerSpec, NetGraph, GRAPH_INPUT};
pub use shapes::{infer_shapes, layer_output_shape, param_name, param_specs, ParamRole, ParamSpec, ShapeMap};
