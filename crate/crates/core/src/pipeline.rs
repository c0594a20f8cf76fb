//! The two-stage recognizer: find the orientation mark, turn the image
//! upright, then detect and name the printed signs.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::detect::{decode_head, nms, Anchor, BBox, Detection, ANCHORS_13, ANCHORS_26, DEFAULT_CONF_THRESHOLD, DEFAULT_NMS_IOU};
use crate::error::{Error, Result};
use crate::graph::{
    build_grnet_with, build_gynet_with, Executor, GrnetWidths, GynetConfig, NetGraph, GRNET_INPUT, GYNET_INPUT,
};
use crate::imageops::{resize_bilinear, rotate_ccw, tile_image};
use crate::synth::default_class_names;
use crate::tensor::Tensor;
use crate::weights::WeightStore;

/// Every threshold and size the pipeline uses; echoed into each result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Side of the square tiles the orientation classifier looks at.
    pub tile: usize,
    /// Tiles are resized to this side before classification.
    pub classifier_input: usize,
    pub detector_input: usize,
    pub conf_threshold: f32,
    pub nms_iou: f32,
    pub anchors_13: Vec<Anchor>,
    pub anchors_26: Vec<Anchor>,
    pub normalization: String,
    pub class_names: Vec<String>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            tile: GYNET_INPUT,
            classifier_input: GRNET_INPUT,
            detector_input: GYNET_INPUT,
            conf_threshold: DEFAULT_CONF_THRESHOLD,
            nms_iou: DEFAULT_NMS_IOU,
            anchors_13: ANCHORS_13.to_vec(),
            anchors_26: ANCHORS_26.to_vec(),
            normalization: "byte/255".into(),
            class_names: default_class_names(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tile == 0 || self.classifier_input == 0 || self.detector_input == 0 {
            return Err(Error::invalid("pipeline config", "sizes must be positive"));
        }
        if !(0.0..=1.0).contains(&self.conf_threshold) || !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::invalid("pipeline config", "thresholds must lie in [0, 1]"));
        }
        if self.anchors_13.is_empty() || self.anchors_13.len() != self.anchors_26.len() {
            return Err(Error::invalid("pipeline config", "both heads need the same non-zero anchor count"));
        }
        Ok(())
    }

    pub fn class_name(&self, id: usize) -> String {
        self.class_names.get(id).cloned().unwrap_or_else(|| id.to_string())
    }
}

fn stem_widths(weights: &WeightStore) -> Result<GrnetWidths> {
    let dim = |name: &str, axis: usize| -> Result<usize> {
        weights
            .get(name)
            .and_then(|t| t.shape().get(axis).copied())
            .ok_or_else(|| Error::MissingWeight {
                layer: name.split('.').next().unwrap_or(name).to_string(),
                name: name.to_string(),
            })
    };
    Ok(GrnetWidths {
        stem: dim("cbr.conv.weight", 3)?,
        mid: dim("bb3.conv1.weight", 3)?,
        wide: dim("bb4.conv1.weight", 3)?,
        classes: dim("fc.weight", 1)?,
    })
}

/// Orientation classifier: the residual network plus its weights. Stage
/// widths are read off the weight file, so full and miniature models load
/// the same way.
#[derive(Debug)]
pub struct Classifier {
    graph: NetGraph,
    weights: WeightStore,
    input: usize,
}

impl Classifier {
    pub fn new(weights: WeightStore, input: usize) -> Result<Self> {
        let graph = build_grnet_with(stem_widths(&weights)?);
        weights.check_against(&graph, &[input, input, 3])?;
        Ok(Self { graph, weights, input })
    }

    pub fn input(&self) -> usize {
        self.input
    }

    /// Class probabilities for an image already at the classifier's size.
    pub fn probabilities(&self, image: &Tensor) -> Result<Vec<f32>> {
        let exec = Executor::new(&self.graph, &self.weights, image.shape())?;
        let out = exec.run(image)?;
        Ok(out.into_values().next().expect("one output").into_data())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Orientation {
    pub class: usize,
    pub confidence: f32,
    /// Top-left corner `[y, x]` of the deciding tile.
    pub tile: [usize; 2],
}

fn argmax(p: &[f32]) -> (usize, f32) {
    p.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
}

/// Classifies every tile and keeps the most confident verdict; ties go to
/// the earlier tile in row-major order.
pub fn classify_orientation(image: &Tensor, cls: &Classifier, tile: usize) -> Result<Orientation> {
    let mut best: Option<Orientation> = None;
    for t in tile_image(image, tile)? {
        let resized = resize_bilinear(&t.image, cls.input, cls.input)?;
        let (class, confidence) = argmax(&cls.probabilities(&resized)?);
        if best.as_ref().is_none_or(|b| confidence > b.confidence) {
            best = Some(Orientation {
                class,
                confidence,
                tile: [t.y, t.x],
            });
        }
    }
    best.ok_or_else(|| Error::invalid("classify_orientation", "image has no tiles"))
}

/// Undoes the labelled rotation: `class` quarter turns counter-clockwise.
pub fn redirect(image: &Tensor, class: usize) -> Result<Tensor> {
    if class >= 4 {
        return Err(Error::invalid("redirect", format!("orientation class {class} is not in 0..4")));
    }
    rotate_ccw(image, class)
}

#[derive(Debug)]
pub struct Detector {
    graph: NetGraph,
    weights: WeightStore,
    input: usize,
}

impl Detector {
    pub fn new(weights: WeightStore, cfg: &GynetConfig, input: usize) -> Result<Self> {
        let graph = build_gynet_with(cfg);
        weights.check_against(&graph, &[input, input, 3])?;
        Ok(Self { graph, weights, input })
    }

    /// Raw head maps `(13×13, 26×26)` at the default input size.
    pub fn heads(&self, image: &Tensor) -> Result<(Tensor, Tensor)> {
        let exec = Executor::new(&self.graph, &self.weights, image.shape())?;
        let mut out = exec.run(image)?;
        let coarse = out.shift_remove("head13").expect("graph output");
        let fine = out.shift_remove("head26").expect("graph output");
        Ok((coarse, fine))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedDetection {
    #[serde(rename = "box", with = "crate::detect::box_array")]
    pub bbox: BBox,
    pub class_id: usize,
    pub class_name: String,
    pub score: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recognition {
    pub detections: Vec<NamedDetection>,
    /// Boxes passing the confidence threshold per head, before NMS.
    pub candidates: [usize; 2],
}

/// Maps a box from the `input`² network frame to a `width`×`height` image.
pub fn box_to_image(b: &BBox, input: usize, width: usize, height: usize) -> BBox {
    b.scale(width as f32 / input as f32, height as f32 / input as f32)
}

pub fn box_to_input(b: &BBox, input: usize, width: usize, height: usize) -> BBox {
    b.scale(input as f32 / width as f32, input as f32 / height as f32)
}

/// Resize, detect with both heads, suppress, and map back to `image`.
pub fn recognize(image: &Tensor, det: &Detector, cfg: &PipelineConfig) -> Result<Recognition> {
    let (h, w, _) = image.hwc()?;
    let resized = resize_bilinear(image, det.input, det.input)?;
    let (coarse, fine) = det.heads(&resized)?;
    let a = decode_head(&coarse, &cfg.anchors_13, det.input, cfg.conf_threshold)?;
    let b = decode_head(&fine, &cfg.anchors_26, det.input, cfg.conf_threshold)?;
    let candidates = [a.len(), b.len()];
    let merged: Vec<Detection> = a.into_iter().chain(b).collect();
    let detections = nms(&merged, cfg.nms_iou)
        .into_iter()
        .filter_map(|d| {
            let bbox = box_to_image(&d.bbox, det.input, w, h).clamp(w as f32, h as f32);
            bbox.is_valid().then(|| NamedDetection {
                bbox,
                class_id: d.class_id,
                class_name: cfg.class_name(d.class_id),
                score: d.score,
            })
        })
        .collect();
    Ok(Recognition { detections, candidates })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub classify_ms: f64,
    pub redirect_ms: f64,
    pub recognize_ms: f64,
    pub total_ms: f64,
}

/// Result of one pipeline run. Boxes are in the redirected (upright) image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineResult {
    pub image: String,
    pub width: usize,
    pub height: usize,
    pub orientation: Orientation,
    /// Counter-clockwise degrees applied to make the image upright.
    pub rotation: u32,
    pub detections: Vec<NamedDetection>,
    pub candidates: [usize; 2],
    pub config: PipelineConfig,
    pub timings: Timings,
}

impl PipelineResult {
    /// JSON without the timing block, for byte-level reproducibility checks.
    pub fn stable_json(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Some(obj) = v.as_object_mut() {
            obj.remove("timings");
        }
        Ok(serde_json::to_string(&v)?)
    }
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

pub fn run_pipeline(
    name: &str,
    image: &Tensor,
    cls: &Classifier,
    det: &Detector,
    cfg: &PipelineConfig,
) -> Result<PipelineResult> {
    cfg.validate()?;
    let (height, width, _) = image.hwc()?;
    let start = Instant::now();
    let orientation = classify_orientation(image, cls, cfg.tile)?;
    let classify_ms = ms(start);
    let t = Instant::now();
    let upright = redirect(image, orientation.class)?;
    let redirect_ms = ms(t);
    let t = Instant::now();
    let rec = recognize(&upright, det, cfg)?;
    let recognize_ms = ms(t);
    Ok(PipelineResult {
        image: name.to_string(),
        width,
        height,
        rotation: orientation.class as u32 * 90,
        orientation,
        detections: rec.detections,
        candidates: rec.candidates,
        config: cfg.clone(),
        timings: Timings {
            classify_ms,
            redirect_ms,
            recognize_ms,
            total_ms: ms(start),
        },
    })
}
