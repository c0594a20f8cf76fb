use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::layer::{LayerKind, LayerSpec, NetGraph, GRAPH_INPUT};
use crate::error::{Error, Result};
use crate::ops::conv::output_hw;

/// Layer id → output shape, in graph order.
pub type ShapeMap = IndexMap<String, Vec<usize>>;

fn input_shape<'a>(shapes: &'a ShapeMap, input: &'a [usize], id: &str) -> &'a [usize] {
    if id == GRAPH_INPUT {
        input
    } else {
        &shapes[id]
    }
}

fn hwc(layer: &LayerSpec, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(Error::graph(
            &layer.id,
            format!("{} needs an H×W×C input, got {shape:?}", layer.kind.name()),
        )),
    }
}

/// Output shape of one layer given its input shapes.
pub fn layer_output_shape(layer: &LayerSpec, inputs: &[&[usize]]) -> Result<Vec<usize>> {
    let err = |reason: String| Error::graph(&layer.id, reason);
    let first = inputs[0];
    Ok(match &layer.kind {
        LayerKind::Conv {
            filters,
            kernel,
            stride,
            padding,
            groups,
            ..
        } => {
            let (h, w, c) = hwc(layer, first)?;
            if c % groups != 0 || filters % groups != 0 {
                return Err(err(format!(
                    "groups {groups} must divide input channels {c} and filters {filters}"
                )));
            }
            let (oh, ow) = output_hw(h, w, *kernel, *stride, *padding).map_err(|e| err(e.to_string()))?;
            vec![oh, ow, *filters]
        }
        LayerKind::MaxPool {
            kernel,
            stride,
            padding,
        } => {
            let (h, w, c) = hwc(layer, first)?;
            let (oh, ow) = output_hw(h, w, *kernel, *stride, *padding).map_err(|e| err(e.to_string()))?;
            vec![oh, ow, c]
        }
        LayerKind::BatchNorm { .. } => {
            hwc(layer, first)?;
            first.to_vec()
        }
        LayerKind::Relu | LayerKind::Sigmoid | LayerKind::Softmax => first.to_vec(),
        LayerKind::GlobalAvgPool => {
            let (_, _, c) = hwc(layer, first)?;
            vec![1, 1, c]
        }
        LayerKind::Fc { units, .. } => match first {
            [1, 1, _] => vec![1, 1, *units],
            _ => vec![*units],
        },
        LayerKind::Upsample2x => {
            let (h, w, c) = hwc(layer, first)?;
            vec![2 * h, 2 * w, c]
        }
        LayerKind::Concat => {
            let (h, w, _) = hwc(layer, first)?;
            let mut total = 0;
            for s in inputs {
                let (sh, sw, sc) = hwc(layer, s)?;
                if (sh, sw) != (h, w) {
                    return Err(err(format!("concat of {first:?} and {s:?}: spatial mismatch")));
                }
                total += sc;
            }
            vec![h, w, total]
        }
        LayerKind::Add => {
            if inputs[0] != inputs[1] {
                return Err(err(format!("add of {:?} and {:?}", inputs[0], inputs[1])));
            }
            first.to_vec()
        }
        LayerKind::Sce {
            pyramid, reduction, ..
        } => {
            let (h, w, c) = hwc(layer, first)?;
            let wide = c * pyramid.len();
            if wide % reduction != 0 {
                return Err(err(format!("reduction {reduction} does not divide {wide} channels")));
            }
            vec![h, w, wide]
        }
        LayerKind::YoloHead { anchors, classes } => {
            let (_, _, c) = hwc(layer, first)?;
            if c != anchors * (5 + classes) {
                return Err(err(format!(
                    "{c} channels, expected {anchors}×(5+{classes}) = {}",
                    anchors * (5 + classes)
                )));
            }
            first.to_vec()
        }
    })
}

pub fn infer_shapes(graph: &NetGraph, input: &[usize]) -> Result<ShapeMap> {
    if input.len() != 3 || input.contains(&0) {
        return Err(Error::InvalidShape {
            shape: input.to_vec(),
            reason: "graph input must be a non-empty H×W×C shape".into(),
        });
    }
    let mut shapes = ShapeMap::with_capacity(graph.layers.len());
    for layer in &graph.layers {
        let ins: Vec<&[usize]> = layer
            .inputs
            .iter()
            .map(|id| input_shape(&shapes, input, id))
            .collect();
        let out = layer_output_shape(layer, &ins)?;
        shapes.insert(layer.id.clone(), out);
    }
    Ok(shapes)
}

/// Role of a stored tensor; running statistics are state, not parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    Weight,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl ParamRole {
    pub fn learnable(self) -> bool {
        !matches!(self, ParamRole::RunningMean | ParamRole::RunningVar)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub layer: String,
    pub name: String,
    pub shape: Vec<usize>,
    pub role: ParamRole,
    /// Inputs feeding one output unit; 0 for non-weight tensors.
    pub fan_in: usize,
}

pub fn param_name(layer: &str, suffix: &str) -> String {
    format!("{layer}.{suffix}")
}

/// Every tensor a weight store must hold for `graph`, in graph order.
pub fn param_specs(graph: &NetGraph, input: &[usize]) -> Result<Vec<ParamSpec>> {
    let shapes = infer_shapes(graph, input)?;
    let mut specs = Vec::new();
    for layer in &graph.layers {
        let in_shape = input_shape(&shapes, input, &layer.inputs[0]);
        let channels = *in_shape.last().expect("rank ≥ 1");
        let mut add = |suffix: &str, shape: Vec<usize>, role: ParamRole, fan_in: usize| {
            specs.push(ParamSpec {
                layer: layer.id.clone(),
                name: param_name(&layer.id, suffix),
                shape,
                role,
                fan_in,
            })
        };
        match &layer.kind {
            LayerKind::Conv {
                filters,
                kernel,
                groups,
                bias,
                ..
            } => {
                let cin_g = channels / groups;
                add(
                    "weight",
                    vec![*kernel, *kernel, cin_g, *filters],
                    ParamRole::Weight,
                    kernel * kernel * cin_g,
                );
                if *bias {
                    add("bias", vec![*filters], ParamRole::Bias, 0);
                }
            }
            LayerKind::BatchNorm { .. } => {
                add("gamma", vec![channels], ParamRole::Gamma, 0);
                add("beta", vec![channels], ParamRole::Beta, 0);
                add("running_mean", vec![channels], ParamRole::RunningMean, 0);
                add("running_var", vec![channels], ParamRole::RunningVar, 0);
            }
            LayerKind::Fc { units, bias } => {
                let n: usize = in_shape.iter().product();
                add("weight", vec![n, *units], ParamRole::Weight, n);
                if *bias {
                    add("bias", vec![*units], ParamRole::Bias, 0);
                }
            }
            LayerKind::Sce {
                pyramid,
                reduction,
                bias,
            } => {
                let wide = channels * pyramid.len();
                let hidden = wide / reduction;
                add("fc1.weight", vec![wide, hidden], ParamRole::Weight, wide);
                if *bias {
                    add("fc1.bias", vec![hidden], ParamRole::Bias, 0);
                }
                add("fc2.weight", vec![hidden, wide], ParamRole::Weight, hidden);
                if *bias {
                    add("fc2.bias", vec![wide], ParamRole::Bias, 0);
                }
            }
            _ => {}
        }
    }
    Ok(specs)
}
