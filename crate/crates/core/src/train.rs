//! Mini-batch SGD training of classifier graphs built from conv, batch norm,
//! ReLU, max/global-average pooling, fc and residual adds, ending in softmax.

use std::time::Instant;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{infer_shapes, param_name, param_specs, Executor, LayerKind, NetGraph, ParamRole, GRAPH_INPUT};
use crate::ops::{
    batchnorm_train_backward, batchnorm_train_forward, conv2d, conv2d_backward, fully_connected,
    fully_connected_backward, global_avgpool, global_avgpool_backward, maxpool, maxpool_backward, relu,
    relu_backward, softmax, update_running_stats, BatchStats, ConvParams, BN_MOMENTUM,
};
use crate::synth::{rng_for, ImageSet, OrientationSample};
use crate::tensor::{elementwise_add, Tensor};
use crate::weights::WeightStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub epochs: usize,
    /// The learning rate is divided by `lr_step_factor` every this many epochs.
    pub lr_step_epochs: usize,
    pub lr_step_factor: f32,
    pub label_smoothing: f32,
    pub batch_size: usize,
    pub seed: u64,
    pub bn_momentum: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 0.0005,
            epochs: 80,
            lr_step_epochs: 50,
            lr_step_factor: 10.0,
            label_smoothing: 0.1,
            batch_size: 32,
            seed: 7,
            bn_momentum: BN_MOMENTUM,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.lr0 >= 0.0
            && self.momentum >= 0.0
            && self.weight_decay >= 0.0
            && self.epochs > 0
            && self.lr_step_epochs > 0
            && self.lr_step_factor > 0.0
            && self.batch_size > 0;
        if !positive {
            return Err(Error::invalid("train", "hyperparameters must be positive"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::invalid("train", "label smoothing must be in [0, 1)"));
        }
        Ok(())
    }

    /// Step schedule: `lr0 · factor^−⌊epoch / step⌋`.
    pub fn lr_at(&self, epoch: usize) -> f32 {
        self.lr0 / self.lr_step_factor.powi((epoch / self.lr_step_epochs) as i32)
    }
}

/// Cross-entropy against `(1−ε)·onehot + ε/K`. Returns the loss and its
/// gradient with respect to the logits that produced `probs`.
pub fn smoothed_cross_entropy(probs: &Tensor, label: usize, eps: f32) -> Result<(f32, Tensor)> {
    let k = probs.len();
    if k < 2 || label >= k {
        return Err(Error::invalid(
            "smoothed_cross_entropy",
            format!("label {label} with {k} classes"),
        ));
    }
    let off = eps as f64 / k as f64;
    let mut loss = 0.0f64;
    let grad = probs
        .data()
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let t = if i == label { 1.0 - eps as f64 + off } else { off };
            if t > 0.0 {
                loss -= t * (p as f64).max(1e-30).ln();
            }
            (p as f64 - t) as f32
        })
        .collect();
    Ok((loss as f32, Tensor::new(probs.shape().to_vec(), grad)?))
}

/// One momentum-SGD update with L2 weight decay:
/// `g' = g + wd·p; v = μ·v + g'; p = p − lr(epoch)·v`.
pub fn sgd_step(params: &mut [f32], grads: &[f32], velocity: &mut [f32], cfg: &TrainConfig, epoch: usize) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::invalid(
            "sgd_step",
            format!("lengths {} / {} / {}", params.len(), grads.len(), velocity.len()),
        ));
    }
    let lr = cfg.lr_at(epoch);
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        let g = g + cfg.weight_decay * *p;
        *v = cfg.momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

/// Uniform(±√(6/fan_in)) weights, zero biases, unit-gamma/zero-beta batch
/// norm with running statistics (0, 1).
pub fn init_weights(graph: &NetGraph, input: &[usize], seed: u64) -> Result<WeightStore> {
    let mut rng = rng_for(seed, 0x696e6974);
    let mut store = WeightStore::new();
    for spec in param_specs(graph, input)? {
        let n: usize = spec.shape.iter().product();
        let data: Vec<f32> = match spec.role {
            ParamRole::Weight => {
                let bound = (6.0 / spec.fan_in as f64).sqrt() as f32;
                (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()
            }
            ParamRole::Gamma | ParamRole::RunningVar => vec![1.0; n],
            ParamRole::Bias | ParamRole::Beta | ParamRole::RunningMean => vec![0.0; n],
        };
        store.insert(spec.name, Tensor::new(spec.shape, data)?)?;
    }
    Ok(store)
}

/// Random-access labelled images.
pub trait LabeledImages {
    fn len(&self) -> usize;
    fn image(&self, i: usize) -> Tensor;
    fn label(&self, i: usize) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl LabeledImages for ImageSet {
    fn len(&self) -> usize {
        ImageSet::len(self)
    }
    fn image(&self, i: usize) -> Tensor {
        ImageSet::image(self, i)
    }
    fn label(&self, i: usize) -> usize {
        self.labels[i]
    }
}

impl LabeledImages for [OrientationSample] {
    fn len(&self) -> usize {
        <[OrientationSample]>::len(self)
    }
    fn image(&self, i: usize) -> Tensor {
        self[i].image.clone()
    }
    fn label(&self, i: usize) -> usize {
        self[i].label
    }
}

impl LabeledImages for [(Tensor, usize)] {
    fn len(&self) -> usize {
        <[(Tensor, usize)]>::len(self)
    }
    fn image(&self, i: usize) -> Tensor {
        self[i].0.clone()
    }
    fn label(&self, i: usize) -> usize {
        self[i].1
    }
}

/// Training-mode view of a graph: checked once, then used for every batch.
#[derive(Debug)]
pub struct TrainGraph<'g> {
    graph: &'g NetGraph,
    input: Vec<usize>,
    shapes: Vec<Vec<usize>>,
    /// Producer index of each layer input; `None` for the graph input.
    sources: Vec<Vec<Option<usize>>>,
    /// Whether backward needs a layer's output kept after its consumers ran.
    retain: Vec<bool>,
    last_use: Vec<usize>,
    /// Index of the layer feeding the final softmax.
    logits: usize,
    learnable: Vec<String>,
}

/// Batch loss, accuracy and learnable-parameter gradients.
#[derive(Clone, Debug)]
pub struct BatchResult {
    pub loss: f64,
    pub correct: usize,
    pub grads: IndexMap<String, Tensor>,
    /// Batch statistics per batch-norm layer id, for the running averages.
    pub bn_stats: Vec<(String, BatchStats)>,
}

fn add_into(slot: &mut Option<Vec<Tensor>>, incoming: Vec<Tensor>) -> Result<()> {
    match slot {
        Some(existing) => {
            for (e, g) in existing.iter_mut().zip(incoming) {
                *e = elementwise_add(e, &g)?;
            }
        }
        None => *slot = Some(incoming),
    }
    Ok(())
}

fn add_param_grad(grads: &mut IndexMap<String, Tensor>, name: String, g: Tensor) {
    match grads.get_mut(&name) {
        Some(acc) => {
            for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += v;
            }
        }
        None => {
            grads.insert(name, g);
        }
    }
}

impl<'g> TrainGraph<'g> {
    pub fn new(graph: &'g NetGraph, input: &[usize]) -> Result<Self> {
        graph.validate()?;
        let shape_map = infer_shapes(graph, input)?;
        let n = graph.layers.len();
        for layer in &graph.layers {
            let ok = matches!(
                layer.kind,
                LayerKind::Conv { .. }
                    | LayerKind::BatchNorm { .. }
                    | LayerKind::Relu
                    | LayerKind::MaxPool { .. }
                    | LayerKind::GlobalAvgPool
                    | LayerKind::Fc { .. }
                    | LayerKind::Add
                    | LayerKind::Softmax
            );
            if !ok {
                return Err(Error::graph(&layer.id, format!("{} has no training support", layer.kind.name())));
            }
        }
        let last = graph
            .layers
            .last()
            .filter(|l| matches!(l.kind, LayerKind::Softmax) && graph.outputs.len() == 1 && graph.outputs[0] == l.id)
            .ok_or_else(|| Error::graph(&graph.name, "trainable graphs end in a single softmax output"))?;
        if graph.layers[..n - 1].iter().any(|l| matches!(l.kind, LayerKind::Softmax)) {
            return Err(Error::graph(&graph.name, "softmax is only supported as the final layer"));
        }
        let sources: Vec<Vec<Option<usize>>> = graph
            .layers
            .iter()
            .map(|l| {
                l.inputs
                    .iter()
                    .map(|id| (id != GRAPH_INPUT).then(|| graph.index_of(id).expect("validated")))
                    .collect()
            })
            .collect();
        let logits = sources[n - 1][0].ok_or_else(|| Error::graph(&last.id, "softmax directly on the input"))?;
        let mut retain = vec![false; n];
        let mut last_use: Vec<usize> = (0..n).collect();
        for (i, layer) in graph.layers.iter().enumerate() {
            if matches!(layer.kind, LayerKind::Relu) {
                retain[i] = true;
            }
            let needs_input = matches!(
                layer.kind,
                LayerKind::Conv { .. } | LayerKind::BatchNorm { .. } | LayerKind::MaxPool { .. } | LayerKind::Fc { .. }
            );
            for &j in sources[i].iter().flatten() {
                last_use[j] = i;
                retain[j] |= needs_input;
            }
        }
        let learnable = param_specs(graph, input)?
            .into_iter()
            .filter(|s| s.role.learnable())
            .map(|s| s.name)
            .collect();
        Ok(Self {
            graph,
            input: input.to_vec(),
            shapes: graph.layers.iter().map(|l| shape_map[&l.id].clone()).collect(),
            sources,
            retain,
            last_use,
            logits,
            learnable,
        })
    }

    /// Names of the tensors the optimizer updates.
    pub fn learnable(&self) -> &[String] {
        &self.learnable
    }

    fn weight<'w>(&self, store: &'w WeightStore, layer: usize, suffix: &str) -> Result<&'w Tensor> {
        let id = &self.graph.layers[layer].id;
        let name = param_name(id, suffix);
        store.get(&name).ok_or_else(|| Error::MissingWeight {
            layer: id.clone(),
            name,
        })
    }

    /// Training-mode forward and backward over one batch. Batch norm uses the
    /// batch's statistics; the loss is the mean smoothed cross-entropy.
    pub fn batch_gradients(&self, store: &WeightStore, images: &[Tensor], labels: &[usize], eps: f32) -> Result<BatchResult> {
        if images.is_empty() || images.len() != labels.len() {
            return Err(Error::invalid("batch_gradients", "batch needs matching, non-empty images and labels"));
        }
        for img in images {
            if img.shape() != self.input {
                return Err(Error::ShapeMismatch {
                    op: "batch_gradients",
                    left: self.input.clone(),
                    right: img.shape().to_vec(),
                });
            }
        }
        let layers = &self.graph.layers;
        let n = layers.len();
        let bsz = images.len();
        let mut acts: Vec<Option<Vec<Tensor>>> = vec![None; n];
        let mut stats: Vec<Option<BatchStats>> = vec![None; n];

        for (i, layer) in layers.iter().enumerate() {
            let src = |k: usize| -> &[Tensor] {
                match self.sources[i][k] {
                    None => images,
                    Some(j) => acts[j].as_deref().expect("alive until last use"),
                }
            };
            let x = src(0);
            let out: Vec<Tensor> = match &layer.kind {
                LayerKind::Conv {
                    stride,
                    padding,
                    groups,
                    bias,
                    ..
                } => {
                    let p = ConvParams {
                        kernel: self.weight(store, i, "weight")?,
                        bias: if *bias { Some(self.weight(store, i, "bias")?) } else { None },
                        stride: *stride,
                        padding: *padding,
                        groups: *groups,
                    };
                    x.iter().map(|t| conv2d(t, &p)).collect::<Result<_>>()?
                }
                LayerKind::BatchNorm { eps } => {
                    let refs: Vec<&Tensor> = x.iter().collect();
                    let (out, s) = batchnorm_train_forward(
                        &refs,
                        self.weight(store, i, "gamma")?,
                        self.weight(store, i, "beta")?,
                        *eps,
                    )?;
                    stats[i] = Some(s);
                    out
                }
                LayerKind::Relu => x.iter().map(relu).collect(),
                LayerKind::MaxPool {
                    kernel,
                    stride,
                    padding,
                } => x
                    .iter()
                    .map(|t| maxpool(t, *kernel, *stride, *padding))
                    .collect::<Result<_>>()?,
                LayerKind::GlobalAvgPool => x.iter().map(global_avgpool).collect::<Result<_>>()?,
                LayerKind::Fc { bias, .. } => {
                    let w = self.weight(store, i, "weight")?;
                    let b = if *bias { Some(self.weight(store, i, "bias")?) } else { None };
                    x.iter().map(|t| fully_connected(t, w, b)).collect::<Result<_>>()?
                }
                LayerKind::Add => {
                    let y = src(1);
                    x.iter().zip(y).map(|(a, b)| elementwise_add(a, b)).collect::<Result<_>>()?
                }
                LayerKind::Softmax => x.iter().map(softmax).collect(),
                _ => unreachable!("checked in new"),
            };
            acts[i] = Some(out);
            for &j in self.sources[i].iter().flatten() {
                if self.last_use[j] == i && !self.retain[j] && j != self.logits {
                    acts[j] = None;
                }
            }
        }

        // Loss gradient flows straight into the logits.
        let probs = acts[n - 1].take().expect("final output");
        let mut loss = 0.0f64;
        let mut correct = 0;
        let mut dlogits = Vec::with_capacity(bsz);
        for (p, &label) in probs.iter().zip(labels) {
            let (l, g) = smoothed_cross_entropy(p, label, eps)?;
            loss += l as f64;
            let pred = p
                .data()
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |b, (k, &v)| if v > b.1 { (k, v) } else { b })
                .0;
            correct += usize::from(pred == label);
            dlogits.push(g.scale(1.0 / bsz as f32));
        }
        let mut grad: Vec<Option<Vec<Tensor>>> = vec![None; n];
        grad[self.logits] = Some(dlogits);
        let mut pgrads: IndexMap<String, Tensor> = IndexMap::new();

        for i in (0..n - 1).rev() {
            let Some(gout) = grad[i].take() else {
                acts[i] = None;
                continue;
            };
            let layer = &layers[i];
            let input_of = |k: usize| -> &[Tensor] {
                match self.sources[i][k] {
                    None => images,
                    Some(j) => acts[j].as_deref().expect("retained for backward"),
                }
            };
            let mut to_inputs: Vec<(usize, Vec<Tensor>)> = Vec::new();
            match &layer.kind {
                LayerKind::Conv {
                    stride,
                    padding,
                    groups,
                    bias,
                    ..
                } => {
                    let p = ConvParams {
                        kernel: self.weight(store, i, "weight")?,
                        bias: if *bias { Some(self.weight(store, i, "bias")?) } else { None },
                        stride: *stride,
                        padding: *padding,
                        groups: *groups,
                    };
                    let need_dx = self.sources[i][0].is_some();
                    let mut dxs = Vec::with_capacity(bsz);
                    for (x, g) in input_of(0).iter().zip(&gout) {
                        let cg = conv2d_backward(x, &p, g, need_dx)?;
                        add_param_grad(&mut pgrads, param_name(&layer.id, "weight"), cg.kernel);
                        if let Some(db) = cg.bias {
                            add_param_grad(&mut pgrads, param_name(&layer.id, "bias"), db);
                        }
                        if let Some(dx) = cg.input {
                            dxs.push(dx);
                        }
                    }
                    if need_dx {
                        to_inputs.push((0, dxs));
                    }
                }
                LayerKind::BatchNorm { .. } => {
                    let refs: Vec<&Tensor> = input_of(0).iter().collect();
                    let grefs: Vec<&Tensor> = gout.iter().collect();
                    let s = stats[i].as_ref().expect("forward stats");
                    let bg = batchnorm_train_backward(&refs, s, self.weight(store, i, "gamma")?, &grefs)?;
                    add_param_grad(&mut pgrads, param_name(&layer.id, "gamma"), bg.gamma);
                    add_param_grad(&mut pgrads, param_name(&layer.id, "beta"), bg.beta);
                    to_inputs.push((0, bg.inputs));
                }
                LayerKind::Relu => {
                    let out = acts[i].as_ref().expect("relu output retained");
                    let dx = out.iter().zip(&gout).map(|(o, g)| relu_backward(o, g)).collect::<Result<_>>()?;
                    to_inputs.push((0, dx));
                }
                LayerKind::MaxPool {
                    kernel,
                    stride,
                    padding,
                } => {
                    let dx = input_of(0)
                        .iter()
                        .zip(&gout)
                        .map(|(x, g)| maxpool_backward(x, *kernel, *stride, *padding, g))
                        .collect::<Result<_>>()?;
                    to_inputs.push((0, dx));
                }
                LayerKind::GlobalAvgPool => {
                    let shape = match self.sources[i][0] {
                        Some(j) => self.shapes[j].clone(),
                        None => self.input.clone(),
                    };
                    let dx = gout
                        .iter()
                        .map(|g| global_avgpool_backward(&shape, g))
                        .collect::<Result<_>>()?;
                    to_inputs.push((0, dx));
                }
                LayerKind::Fc { bias, .. } => {
                    let w = self.weight(store, i, "weight")?;
                    let mut dxs = Vec::with_capacity(bsz);
                    for (x, g) in input_of(0).iter().zip(&gout) {
                        let lg = fully_connected_backward(x, w, *bias, g)?;
                        add_param_grad(&mut pgrads, param_name(&layer.id, "weight"), lg.weights);
                        if let Some(db) = lg.bias {
                            add_param_grad(&mut pgrads, param_name(&layer.id, "bias"), db);
                        }
                        dxs.push(lg.input);
                    }
                    to_inputs.push((0, dxs));
                }
                LayerKind::Add => {
                    to_inputs.push((1, gout.clone()));
                    to_inputs.push((0, gout));
                }
                _ => unreachable!("checked in new"),
            }
            for (k, g) in to_inputs {
                if let Some(j) = self.sources[i][k] {
                    add_into(&mut grad[j], g)?;
                }
            }
            acts[i] = None;
        }

        let bn_stats = stats
            .into_iter()
            .enumerate()
            .filter_map(|(i, s)| s.map(|s| (layers[i].id.clone(), s)))
            .collect();
        // Layers cut off from the loss still get (zero) gradients.
        let mut grads = IndexMap::with_capacity(self.learnable.len());
        for name in &self.learnable {
            let g = match pgrads.swap_remove(name) {
                Some(g) => g,
                None => Tensor::zeros(store.get(name).expect("validated store").shape().to_vec()),
            };
            grads.insert(name.clone(), g);
        }
        Ok(BatchResult {
            loss: loss / bsz as f64,
            correct,
            grads,
            bn_stats,
        })
    }
}

/// Momentum buffers keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    velocity: IndexMap<String, Vec<f32>>,
}

impl Sgd {
    pub fn step(&mut self, store: &mut WeightStore, grads: &IndexMap<String, Tensor>, cfg: &TrainConfig, epoch: usize) -> Result<()> {
        for (name, g) in grads {
            let p = store.get_mut(name).ok_or_else(|| Error::MissingWeight {
                layer: name.clone(),
                name: name.clone(),
            })?;
            let v = self.velocity.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            sgd_step(p.data_mut(), g.data(), v, cfg, epoch)?;
        }
        Ok(())
    }
}

pub fn apply_bn_stats(store: &mut WeightStore, stats: &[(String, BatchStats)], momentum: f32) -> Result<()> {
    for (id, s) in stats {
        let mean_name = param_name(id, "running_mean");
        let var_name = param_name(id, "running_var");
        let mut mean = store.get(&mean_name).cloned().ok_or_else(|| Error::MissingWeight {
            layer: id.clone(),
            name: mean_name.clone(),
        })?;
        let var = store.get_mut(&var_name).ok_or_else(|| Error::MissingWeight {
            layer: id.clone(),
            name: var_name.clone(),
        })?;
        update_running_stats(&mut mean, var, s, momentum);
        *store.get_mut(&mean_name).expect("present") = mean;
    }
    Ok(())
}

/// Argmax class and its probability, per image, in inference mode.
pub fn predict(graph: &NetGraph, store: &WeightStore, data: &(impl LabeledImages + ?Sized)) -> Result<Vec<(usize, f32)>> {
    if data.is_empty() {
        return Ok(Vec::new());
    }
    let first = data.image(0);
    let exec = Executor::new(graph, store, first.shape())?;
    (0..data.len())
        .map(|i| {
            let out = exec.run(&data.image(i))?;
            let probs = out.values().next().expect("one output");
            Ok(probs
                .data()
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |b, (k, &v)| if v > b.1 { (k, v) } else { b }))
        })
        .collect()
}

pub fn accuracy(graph: &NetGraph, store: &WeightStore, data: &(impl LabeledImages + ?Sized)) -> Result<f64> {
    let preds: Vec<usize> = predict(graph, store, data)?.into_iter().map(|p| p.0).collect();
    let labels: Vec<usize> = (0..data.len()).map(|i| data.label(i)).collect();
    crate::metrics::classification_accuracy(&preds, &labels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f32,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub config: TrainConfig,
    pub model: String,
    pub input_normalization: String,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub final_val_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Weights from the epoch with the best validation accuracy.
    pub weights: WeightStore,
    pub log: TrainLog,
}

pub fn train(
    graph: &NetGraph,
    train_set: &(impl LabeledImages + ?Sized),
    val_set: &(impl LabeledImages + ?Sized),
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with(graph, train_set, val_set, cfg, None, |_| {})
}

/// Trains from `init` (or fresh weights seeded by `cfg.seed`), calling
/// `on_epoch` after every epoch.
pub fn train_with(
    graph: &NetGraph,
    train_set: &(impl LabeledImages + ?Sized),
    val_set: &(impl LabeledImages + ?Sized),
    cfg: &TrainConfig,
    init: Option<WeightStore>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let input = train_set.image(0).shape().to_vec();
    let tg = TrainGraph::new(graph, &input)?;
    let mut store = match init {
        Some(s) => s,
        None => init_weights(graph, &input, cfg.seed)?,
    };
    store.check_against(graph, &input)?;
    let mut sgd = Sgd::default();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = TrainLog {
        config: cfg.clone(),
        model: graph.name.clone(),
        input_normalization: "byte/255".into(),
        epochs: Vec::with_capacity(cfg.epochs),
        best_epoch: 0,
        best_val_accuracy: f64::NEG_INFINITY,
        final_val_accuracy: 0.0,
    };
    let mut best = store.clone();
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng_for(cfg.seed, 0x5348_0000 + epoch as u64));
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let images: Vec<Tensor> = chunk.iter().map(|&i| train_set.image(i)).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train_set.label(i)).collect();
            let r = tg.batch_gradients(&store, &images, &labels, cfg.label_smoothing)?;
            loss_sum += r.loss * chunk.len() as f64;
            correct += r.correct;
            sgd.step(&mut store, &r.grads, cfg, epoch)?;
            apply_bn_stats(&mut store, &r.bn_stats, cfg.bn_momentum)?;
        }
        let val_accuracy = accuracy(graph, &store, val_set)?;
        let entry = EpochLog {
            epoch,
            lr: cfg.lr_at(epoch),
            train_loss: loss_sum / train_set.len() as f64,
            train_accuracy: correct as f64 / train_set.len() as f64,
            val_accuracy,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&entry);
        if val_accuracy > log.best_val_accuracy {
            log.best_val_accuracy = val_accuracy;
            log.best_epoch = epoch;
            best = store.clone();
        }
        log.final_val_accuracy = val_accuracy;
        log.epochs.push(entry);
    }
    Ok(TrainOutcome { weights: best, log })
}
