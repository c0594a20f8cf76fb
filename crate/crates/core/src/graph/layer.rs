use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{Padding, BN_EPSILON};

/// Reserved id naming the graph's single input tensor.
pub const GRAPH_INPUT: &str = "input";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerKind {
    Conv {
        filters: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        groups: usize,
        bias: bool,
    },
    #[serde(rename = "bn")]
    BatchNorm { eps: f32 },
    Relu,
    #[serde(rename = "maxpool")]
    MaxPool {
        kernel: usize,
        stride: usize,
        padding: Padding,
    },
    #[serde(rename = "avgpool-global")]
    GlobalAvgPool,
    Fc { units: usize, bias: bool },
    Softmax,
    Sigmoid,
    #[serde(rename = "upsample2x")]
    Upsample2x,
    Concat,
    Add,
    Sce {
        pyramid: Vec<usize>,
        reduction: usize,
        bias: bool,
    },
    /// Marks a raw detection map; identity in the forward pass.
    YoloHead { anchors: usize, classes: usize },
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv { groups, .. } if *groups > 1 => "group-conv",
            LayerKind::Conv { .. } => "conv",
            LayerKind::BatchNorm { .. } => "bn",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool { .. } => "maxpool",
            LayerKind::GlobalAvgPool => "avgpool-global",
            LayerKind::Fc { .. } => "fc",
            LayerKind::Softmax => "softmax",
            LayerKind::Sigmoid => "sigmoid",
            LayerKind::Upsample2x => "upsample2x",
            LayerKind::Concat => "concat",
            LayerKind::Add => "add",
            LayerKind::Sce { .. } => "sce",
            LayerKind::YoloHead { .. } => "yolo-head",
        }
    }

    pub fn batch_norm() -> Self {
        LayerKind::BatchNorm { eps: BN_EPSILON }
    }

    /// Allowed number of inputs, as an inclusive range.
    fn arity(&self) -> (usize, usize) {
        match self {
            LayerKind::Concat => (1, usize::MAX),
            LayerKind::Add => (2, 2),
            _ => (1, 1),
        }
    }

    /// Conv and fc layers: the ones counted toward network depth.
    pub fn is_weighted(&self) -> bool {
        matches!(self, LayerKind::Conv { .. } | LayerKind::Fc { .. })
    }

    fn check_attributes(&self) -> std::result::Result<(), String> {
        match self {
            LayerKind::Conv {
                filters,
                kernel,
                stride,
                groups,
                ..
            } => {
                if *filters == 0 || *kernel == 0 || *stride == 0 || *groups == 0 {
                    return Err("filters, kernel, stride and groups must be positive".into());
                }
            }
            LayerKind::BatchNorm { eps } if !(*eps >= 0.0) => {
                return Err(format!("epsilon {eps} must be non-negative"));
            }
            LayerKind::MaxPool { kernel, stride, .. } if *kernel == 0 || *stride == 0 => {
                return Err("kernel and stride must be positive".into());
            }
            LayerKind::Fc { units, .. } if *units == 0 => return Err("units must be positive".into()),
            LayerKind::Sce {
                pyramid, reduction, ..
            } => {
                crate::sce::check_pyramid(pyramid).map_err(|e| e.to_string())?;
                if *reduction == 0 {
                    return Err("reduction must be positive".into());
                }
            }
            LayerKind::YoloHead { anchors, classes } if *anchors == 0 || *classes == 0 => {
                return Err("anchors and classes must be positive".into());
            }
            _ => {}
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub id: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    pub inputs: Vec<String>,
}

/// A topologically ordered layer list with named outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetGraph {
    pub name: String,
    pub layers: Vec<LayerSpec>,
    pub outputs: Vec<String>,
}

impl NetGraph {
    pub fn new(name: impl Into<String>, layers: Vec<LayerSpec>, outputs: Vec<String>) -> Result<Self> {
        let g = Self {
            name: name.into(),
            layers,
            outputs,
        };
        g.validate()?;
        Ok(g)
    }

    /// Unique ids, inputs defined before use (so no cycles), valid attributes,
    /// and outputs that exist.
    pub fn validate(&self) -> Result<()> {
        let mut seen: HashSet<&str> = HashSet::new();
        for layer in &self.layers {
            if layer.id == GRAPH_INPUT || !seen.insert(layer.id.as_str()) {
                return Err(Error::graph(&layer.id, "duplicate or reserved id"));
            }
            let (lo, hi) = layer.kind.arity();
            if layer.inputs.len() < lo || layer.inputs.len() > hi {
                return Err(Error::graph(
                    &layer.id,
                    format!("{} takes {lo}..={hi} inputs, got {}", layer.kind.name(), layer.inputs.len()),
                ));
            }
            for input in &layer.inputs {
                if input != GRAPH_INPUT && (input == &layer.id || !seen.contains(input.as_str())) {
                    return Err(Error::graph(&layer.id, format!("input `{input}` is not defined earlier")));
                }
            }
            layer
                .kind
                .check_attributes()
                .map_err(|reason| Error::graph(&layer.id, reason))?;
        }
        if self.outputs.is_empty() && !self.layers.is_empty() {
            return Err(Error::graph(&self.name, "graph has no outputs"));
        }
        for out in &self.outputs {
            if !seen.contains(out.as_str()) {
                return Err(Error::graph(out, "output is not a layer"));
            }
        }
        Ok(())
    }

    pub fn layer(&self, id: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.id == id)
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.id == id)
    }

    pub fn conv_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::Conv { .. }))
            .count()
    }

    /// Largest number of conv/fc layers on any path from the input to an
    /// output, the way residual networks are conventionally named by depth.
    pub fn weighted_depth(&self) -> usize {
        let mut depth = vec![0usize; self.layers.len()];
        for (i, layer) in self.layers.iter().enumerate() {
            let upstream = layer
                .inputs
                .iter()
                .filter_map(|id| self.index_of(id))
                .map(|j| depth[j])
                .max()
                .unwrap_or(0);
            depth[i] = upstream + usize::from(layer.kind.is_weighted());
        }
        self.outputs
            .iter()
            .filter_map(|id| self.index_of(id))
            .map(|i| depth[i])
            .max()
            .unwrap_or(0)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let g: Self = serde_json::from_str(text)?;
        g.validate()?;
        Ok(g)
    }
}

/// Small helper for writing builders as straight-line code.
#[derive(Debug)]
pub(crate) struct GraphBuilder {
    layers: Vec<LayerSpec>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self { layers: Vec::new() }
    }

    pub fn push(&mut self, id: impl Into<String>, kind: LayerKind, inputs: &[&str]) -> String {
        let id = id.into();
        self.layers.push(LayerSpec {
            id: id.clone(),
            kind,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
        });
        id
    }

    /// Square conv with "same" padding at stride 1 (`(k−1)/2` on each side).
    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        &mut self,
        id: impl Into<String>,
        input: &str,
        filters: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        bias: bool,
    ) -> String {
        self.push(
            id,
            LayerKind::Conv {
                filters,
                kernel,
                stride,
                padding: Padding::same(kernel),
                groups,
                bias,
            },
            &[input],
        )
    }

    pub fn bn(&mut self, id: impl Into<String>, input: &str) -> String {
        self.push(id, LayerKind::batch_norm(), &[input])
    }

    pub fn relu(&mut self, id: impl Into<String>, input: &str) -> String {
        self.push(id, LayerKind::Relu, &[input])
    }

    pub fn maxpool(&mut self, id: impl Into<String>, input: &str, kernel: usize, stride: usize, padding: Padding) -> String {
        self.push(
            id,
            LayerKind::MaxPool {
                kernel,
                stride,
                padding,
            },
            &[input],
        )
    }

    pub fn finish(self, name: &str, outputs: &[&str]) -> NetGraph {
        NetGraph::new(name, self.layers, outputs.iter().map(|s| s.to_string()).collect())
            .expect("builder produces a valid graph")
    }
}
