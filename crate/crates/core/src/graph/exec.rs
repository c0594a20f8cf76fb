use indexmap::IndexMap;

use super::layer::{LayerKind, LayerSpec, NetGraph, GRAPH_INPUT};
use super::shapes::{infer_shapes, param_name, ShapeMap};
use crate::error::{Error, Result};
use crate::ops::{
    batchnorm_infer, conv2d, fully_connected, global_avgpool, maxpool, relu, sigmoid, softmax, upsample_nearest_2x,
    BatchNormParams, ConvParams,
};
use crate::sce::{sce_forward, SceParams};
use crate::tensor::{concat_channels, elementwise_add, Tensor};
use crate::weights::WeightStore;

fn weight<'w>(weights: &'w WeightStore, layer: &LayerSpec, suffix: &str) -> Result<&'w Tensor> {
    let name = param_name(&layer.id, suffix);
    weights.get(&name).ok_or_else(|| Error::MissingWeight {
        layer: layer.id.clone(),
        name,
    })
}

fn named(layer: &LayerSpec, e: Error) -> Error {
    match e {
        Error::Graph { .. } | Error::MissingWeight { .. } | Error::WeightShape { .. } => e,
        other => Error::graph(&layer.id, other.to_string()),
    }
}

/// Inference-mode forward pass of a single layer.
pub fn forward_layer(layer: &LayerSpec, inputs: &[&Tensor], weights: &WeightStore) -> Result<Tensor> {
    let x = inputs[0];
    let out = match &layer.kind {
        LayerKind::Conv {
            stride,
            padding,
            groups,
            bias,
            ..
        } => {
            let kernel = weight(weights, layer, "weight")?;
            let bias = if *bias { Some(weight(weights, layer, "bias")?) } else { None };
            conv2d(
                x,
                &ConvParams {
                    kernel,
                    bias,
                    stride: *stride,
                    padding: *padding,
                    groups: *groups,
                },
            )
        }
        LayerKind::BatchNorm { eps } => batchnorm_infer(
            x,
            &BatchNormParams {
                gamma: weight(weights, layer, "gamma")?,
                beta: weight(weights, layer, "beta")?,
                running_mean: weight(weights, layer, "running_mean")?,
                running_var: weight(weights, layer, "running_var")?,
                eps: *eps,
            },
        ),
        LayerKind::Relu => Ok(relu(x)),
        LayerKind::MaxPool {
            kernel,
            stride,
            padding,
        } => maxpool(x, *kernel, *stride, *padding),
        LayerKind::GlobalAvgPool => global_avgpool(x),
        LayerKind::Fc { bias, .. } => {
            let w = weight(weights, layer, "weight")?;
            let b = if *bias { Some(weight(weights, layer, "bias")?) } else { None };
            fully_connected(x, w, b)
        }
        LayerKind::Softmax => Ok(softmax(x)),
        LayerKind::Sigmoid => Ok(sigmoid(x)),
        LayerKind::Upsample2x => upsample_nearest_2x(x),
        LayerKind::Concat => concat_channels(inputs),
        LayerKind::Add => elementwise_add(inputs[0], inputs[1]),
        LayerKind::Sce { pyramid, bias, .. } => {
            let (b1, b2) = if *bias {
                (Some(weight(weights, layer, "fc1.bias")?), Some(weight(weights, layer, "fc2.bias")?))
            } else {
                (None, None)
            };
            sce_forward(
                x,
                &SceParams {
                    pyramid,
                    w1: weight(weights, layer, "fc1.weight")?,
                    b1,
                    w2: weight(weights, layer, "fc2.weight")?,
                    b2,
                },
            )
        }
        LayerKind::YoloHead { .. } => Ok(x.clone()),
    };
    out.map_err(|e| named(layer, e))
}

/// A graph bound to a weight store and an input shape, validated once.
#[derive(Debug)]
pub struct Executor<'a> {
    graph: &'a NetGraph,
    weights: &'a WeightStore,
    input_shape: Vec<usize>,
    shapes: ShapeMap,
    /// Index of the last layer reading each layer's output.
    last_use: Vec<usize>,
}

impl<'a> Executor<'a> {
    pub fn new(graph: &'a NetGraph, weights: &'a WeightStore, input_shape: &[usize]) -> Result<Self> {
        graph.validate()?;
        let shapes = infer_shapes(graph, input_shape)?;
        weights.check_against(graph, input_shape)?;
        let mut last_use: Vec<usize> = (0..graph.layers.len()).collect();
        for (i, layer) in graph.layers.iter().enumerate() {
            for id in &layer.inputs {
                if let Some(j) = graph.index_of(id) {
                    last_use[j] = i;
                }
            }
        }
        for id in &graph.outputs {
            let j = graph.index_of(id).expect("validated output");
            last_use[j] = usize::MAX;
        }
        Ok(Self {
            graph,
            weights,
            input_shape: input_shape.to_vec(),
            shapes,
            last_use,
        })
    }

    pub fn shapes(&self) -> &ShapeMap {
        &self.shapes
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        if input.shape() != self.input_shape {
            return Err(Error::ShapeMismatch {
                op: "execute",
                left: self.input_shape.clone(),
                right: input.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn forward(&self, input: &Tensor, keep_all: bool) -> Result<Vec<Option<Tensor>>> {
        self.check_input(input)?;
        let n = self.graph.layers.len();
        let mut acts: Vec<Option<Tensor>> = vec![None; n];
        for (i, layer) in self.graph.layers.iter().enumerate() {
            let ins = layer
                .inputs
                .iter()
                .map(|id| {
                    if id == GRAPH_INPUT {
                        input
                    } else {
                        let j = self.graph.index_of(id).expect("validated input");
                        acts[j].as_ref().expect("activation alive until last use")
                    }
                })
                .collect::<Vec<_>>();
            let out = forward_layer(layer, &ins, self.weights)?;
            debug_assert_eq!(out.shape(), self.shapes[&layer.id].as_slice(), "{}", layer.id);
            acts[i] = Some(out);
            if !keep_all {
                for id in &layer.inputs {
                    if let Some(j) = self.graph.index_of(id) {
                        if self.last_use[j] == i {
                            acts[j] = None;
                        }
                    }
                }
            }
        }
        Ok(acts)
    }

    /// Graph outputs, keyed by layer id in declaration order.
    pub fn run(&self, input: &Tensor) -> Result<IndexMap<String, Tensor>> {
        let mut acts = self.forward(input, false)?;
        Ok(self
            .graph
            .outputs
            .iter()
            .map(|id| {
                let j = self.graph.index_of(id).expect("validated output");
                (id.clone(), acts[j].take().expect("outputs are retained"))
            })
            .collect())
    }

    /// Every layer's activation, for inspection and tests.
    pub fn run_all(&self, input: &Tensor) -> Result<IndexMap<String, Tensor>> {
        let acts = self.forward(input, true)?;
        Ok(self
            .graph
            .layers
            .iter()
            .zip(acts)
            .map(|(l, t)| (l.id.clone(), t.expect("kept")))
            .collect())
    }
}

pub fn execute(graph: &NetGraph, weights: &WeightStore, input: &Tensor) -> Result<IndexMap<String, Tensor>> {
    Executor::new(graph, weights, input.shape())?.run(input)
}
