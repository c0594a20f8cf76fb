//! Deterministic synthetic data: orientation-mark images for the classifier,
//! glyph scenes with exact boxes for the detector side, and a controllable
//! noisy "oracle" detector for exercising the metrics.
//!
//! Every sample draws from its own Xoshiro256++ stream derived from
//! `(seed, index)`, so datasets are reproducible on any platform and any
//! index range can be generated independently.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal, Poisson};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::detect::{BBox, Detection};
use crate::error::{Error, Result};
use crate::graph::{GRNET_INPUT, GYNET_INPUT, ORIENTATION_CLASSES, SIGN_CLASSES};
use crate::imageops::{load_image, rotate_box_cw, rotate_cw, save_image};
use crate::metrics::GroundTruthBox;
use crate::tensor::Tensor;

pub type SynthRng = Xoshiro256PlusPlus;

const ORIENTATION_STREAM: u64 = 0x6f72_6965_6e74;
const SCENE_STREAM: u64 = 0x7363_656e_6573;
const ORACLE_STREAM: u64 = 0x6f72_6163_6c65;

/// Independent generator for item `index` of the dataset seeded by `seed`.
pub fn rng_for(seed: u64, index: u64) -> SynthRng {
    SynthRng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index.wrapping_add(1).wrapping_mul(0xbf58_476d_1ce4_e5b9))
}

/// 5×7 bitmaps, one row per byte, bit 4 is the leftmost column.
const FONT: [[u8; 7]; SIGN_CLASSES] = [
    [0x0e, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0e], // 0
    [0x04, 0x0c, 0x04, 0x04, 0x04, 0x04, 0x0e], // 1
    [0x0e, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1f], // 2
    [0x1f, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0e], // 3
    [0x02, 0x06, 0x0a, 0x12, 0x1f, 0x02, 0x02], // 4
    [0x1f, 0x10, 0x1e, 0x01, 0x01, 0x11, 0x0e], // 5
    [0x06, 0x08, 0x10, 0x1e, 0x11, 0x11, 0x0e], // 6
    [0x1f, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08], // 7
    [0x0e, 0x11, 0x11, 0x0e, 0x11, 0x11, 0x0e], // 8
    [0x0e, 0x11, 0x11, 0x0f, 0x01, 0x02, 0x0c], // 9
    [0x0e, 0x11, 0x11, 0x1f, 0x11, 0x11, 0x11], // A
    [0x1e, 0x11, 0x11, 0x1e, 0x11, 0x11, 0x1e], // B
    [0x0e, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0e], // C
    [0x1c, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1c], // D
    [0x1f, 0x10, 0x10, 0x1e, 0x10, 0x10, 0x1f], // E
    [0x1f, 0x10, 0x10, 0x1e, 0x10, 0x10, 0x10], // F
    [0x0e, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0f], // G
    [0x11, 0x11, 0x11, 0x1f, 0x11, 0x11, 0x11], // H
    [0x0e, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0e], // I
    [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0c], // J
    [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11], // K
    [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1f], // L
    [0x11, 0x1b, 0x15, 0x15, 0x11, 0x11, 0x11], // M
    [0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11], // N
    [0x0e, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0e], // O
    [0x1e, 0x11, 0x11, 0x1e, 0x10, 0x10, 0x10], // P
    [0x0e, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0d], // Q
    [0x1e, 0x11, 0x11, 0x1e, 0x14, 0x12, 0x11], // R
    [0x0f, 0x10, 0x10, 0x0e, 0x01, 0x01, 0x1e], // S
    [0x1f, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04], // T
    [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0e], // U
    [0x11, 0x11, 0x11, 0x11, 0x11, 0x0a, 0x04], // V
    [0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0a], // W
    [0x11, 0x11, 0x0a, 0x04, 0x0a, 0x11, 0x11], // X
    [0x11, 0x11, 0x11, 0x0a, 0x04, 0x04, 0x04], // Y
    [0x1f, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1f], // Z
    [0x15, 0x15, 0x15, 0x15, 0x14, 0x14, 0x10], // IQI wires
    [0x00, 0x04, 0x04, 0x1f, 0x04, 0x04, 0x00], // plus
    [0x0a, 0x0a, 0x1f, 0x0a, 0x1f, 0x0a, 0x0a], // hash
    [0x04, 0x0e, 0x15, 0x04, 0x04, 0x04, 0x04], // arrow
];

/// Framed glyph footprint in font cells: bitmap plus a one-cell border.
const GLYPH_CELLS_W: usize = 7;
const GLYPH_CELLS_H: usize = 9;

/// Default 40-entry class-name table.
pub fn default_class_names() -> Vec<String> {
    #[derive(Deserialize)]
    struct Table {
        classes: Vec<String>,
    }
    let t: Table = serde_json::from_str(include_str!("../config/classes.json")).expect("bundled class table parses");
    t.classes
}

/// Single-channel float raster used while drawing.
struct Canvas {
    h: usize,
    w: usize,
    px: Vec<f32>,
}

impl Canvas {
    fn new(h: usize, w: usize, value: f32) -> Self {
        Self {
            h,
            w,
            px: vec![value; h * w],
        }
    }

    /// Pixels whose centers fall inside `[x0, x1) × [y0, y1)`.
    fn fill_rect(&mut self, x0: f32, y0: f32, x1: f32, y1: f32, v: f32) {
        let ys = (y0 - 0.5).ceil().max(0.0) as usize..((y1 - 0.5).ceil().max(0.0) as usize).min(self.h);
        let xs = (x0 - 0.5).ceil().max(0.0) as usize..((x1 - 0.5).ceil().max(0.0) as usize).min(self.w);
        for y in ys {
            for x in xs.clone() {
                self.px[y * self.w + x] = v;
            }
        }
    }

    fn fill_triangle(&mut self, p: [(f32, f32); 3], v: f32) {
        let edge = |a: (f32, f32), b: (f32, f32), x: f32, y: f32| (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0);
        let area = edge(p[0], p[1], p[2].0, p[2].1);
        let xmin = p.iter().map(|q| q.0).fold(f32::INFINITY, f32::min).max(0.0) as usize;
        let xmax = (p.iter().map(|q| q.0).fold(f32::NEG_INFINITY, f32::max).ceil() as usize).min(self.w);
        let ymin = p.iter().map(|q| q.1).fold(f32::INFINITY, f32::min).max(0.0) as usize;
        let ymax = (p.iter().map(|q| q.1).fold(f32::NEG_INFINITY, f32::max).ceil() as usize).min(self.h);
        for y in ymin..ymax {
            for x in xmin..xmax {
                let (cx, cy) = (x as f32 + 0.5, y as f32 + 0.5);
                let e = [
                    edge(p[0], p[1], cx, cy) * area.signum(),
                    edge(p[1], p[2], cx, cy) * area.signum(),
                    edge(p[2], p[0], cx, cy) * area.signum(),
                ];
                if e.iter().all(|&v| v >= 0.0) {
                    self.px[y * self.w + x] = v;
                }
            }
        }
    }

    /// Adds Gaussian noise, clamps to [0, 1] and quantizes to byte levels.
    fn finish(mut self, rng: &mut SynthRng, sigma: f32) -> Vec<u8> {
        let noise = Normal::new(0.0f32, sigma).expect("finite sigma");
        for v in &mut self.px {
            *v += noise.sample(rng);
        }
        self.px.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }
}

/// Gray bytes to an H×W×3 tensor of byte/255 values.
pub fn gray_to_tensor(h: usize, w: usize, bytes: &[u8]) -> Tensor {
    let data = bytes.iter().flat_map(|&b| [b as f32 / 255.0; 3]).collect();
    Tensor::new(vec![h, w, 3], data).expect("sized buffer")
}

/// Placement of the orientation mark, in pixels. The canonical mark has its
/// right and upper arms longer than the others, each ending in an arrowhead.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Cross {
    cx: f32,
    cy: f32,
    arm: f32,
    thick: f32,
}

const LONG_ARM: f32 = 1.6;
const HEAD_LEN: f32 = 3.0;
const HEAD_HALF: f32 = 2.2;

impl Cross {
    fn sample(rng: &mut SynthRng, size: usize) -> Self {
        let s = size as f32;
        let arm = rng.gen_range(0.10..0.18) * s;
        let thick = rng.gen_range(0.03..0.05) * s;
        let far = LONG_ARM * arm + HEAD_LEN * thick;
        let margin = 0.03 * s;
        let cx = rng.gen_range(arm + margin..s - far - margin);
        let cy = rng.gen_range(far + margin..s - arm - margin);
        Self { cx, cy, arm, thick }
    }

    fn extent(&self) -> BBox {
        let far = LONG_ARM * self.arm + HEAD_LEN * self.thick;
        BBox::new(self.cx - self.arm, self.cy - far, self.cx + far, self.cy + self.arm)
    }

    fn draw(&self, c: &mut Canvas, v: f32) {
        let (cx, cy, t) = (self.cx, self.cy, self.thick / 2.0);
        let long = LONG_ARM * self.arm;
        c.fill_rect(cx - self.arm, cy - t, cx + long, cy + t, v);
        c.fill_rect(cx - t, cy - long, cx + t, cy + self.arm, v);
        let (hl, hw) = (HEAD_LEN * self.thick, HEAD_HALF * self.thick);
        let x = cx + long;
        c.fill_triangle([(x, cy - hw), (x, cy + hw), (x + hl, cy)], v);
        let y = cy - long;
        c.fill_triangle([(cx - hw, y), (cx + hw, y), (cx, y - hl)], v);
    }
}

/// Draws a framed glyph with its top-left corner at `(x0, y0)` and returns
/// its exact extent.
fn draw_glyph(c: &mut Canvas, class: usize, x0: usize, y0: usize, cell: usize, v: f32) -> BBox {
    let (w, h) = (GLYPH_CELLS_W * cell, GLYPH_CELLS_H * cell);
    let (x0f, y0f) = (x0 as f32, y0 as f32);
    let (wf, hf) = (w as f32, h as f32);
    let line = (cell as f32 / 3.0).round().max(1.0);
    c.fill_rect(x0f, y0f, x0f + wf, y0f + line, v);
    c.fill_rect(x0f, y0f + hf - line, x0f + wf, y0f + hf, v);
    c.fill_rect(x0f, y0f, x0f + line, y0f + hf, v);
    c.fill_rect(x0f + wf - line, y0f, x0f + wf, y0f + hf, v);
    for (r, bits) in FONT[class].iter().enumerate() {
        for col in 0..5 {
            if bits & (0x10 >> col) != 0 {
                let x = x0 + (col + 1) * cell;
                let y = y0 + (r + 1) * cell;
                c.fill_rect(x as f32, y as f32, (x + cell) as f32, (y + cell) as f32, v);
            }
        }
    }
    BBox::new(x0f, y0f, x0f + wf, y0f + hf)
}

fn overlaps(a: &BBox, b: &BBox, gap: f32) -> bool {
    a.x_min < b.x_max + gap && b.x_min < a.x_max + gap && a.y_min < b.y_max + gap && b.y_min < a.y_max + gap
}

/// Places up to `count` glyphs at random free spots; returns (class, box).
fn scatter_glyphs(
    rng: &mut SynthRng,
    canvas: &mut Canvas,
    count: usize,
    cells: std::ops::RangeInclusive<usize>,
    taken: &mut Vec<BBox>,
    value: &mut impl FnMut(&mut SynthRng) -> f32,
) -> Vec<(usize, BBox)> {
    let size = canvas.w.min(canvas.h);
    let mut placed = Vec::new();
    for _ in 0..count {
        let class = rng.gen_range(0..SIGN_CLASSES);
        let mut cell = rng.gen_range(cells.clone());
        'cell: loop {
            let (w, h) = (GLYPH_CELLS_W * cell, GLYPH_CELLS_H * cell);
            if w < size && h < size {
                for _ in 0..200 {
                    let x = rng.gen_range(0..=canvas.w - w);
                    let y = rng.gen_range(0..=canvas.h - h);
                    let b = BBox::new(x as f32, y as f32, (x + w) as f32, (y + h) as f32);
                    if taken.iter().all(|t| !overlaps(t, &b, 2.0)) {
                        let v = value(rng);
                        let b = draw_glyph(canvas, class, x, y, cell, v);
                        taken.push(b);
                        placed.push((class, b));
                        break 'cell;
                    }
                }
            }
            if cell == *cells.start() {
                break;
            }
            cell -= 1;
        }
    }
    placed
}

#[derive(Clone, Copy, Debug)]
struct Background {
    mean: f32,
    sigma: f32,
}

impl Background {
    fn sample(rng: &mut SynthRng) -> Self {
        Self {
            mean: rng.gen_range(0.10..0.45),
            sigma: rng.gen_range(0.02..0.07),
        }
    }

    fn bright(&self, rng: &mut SynthRng) -> f32 {
        self.mean + rng.gen_range(0.20..0.50)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OrientationSample {
    /// H×W×3 in [0, 1].
    pub image: Tensor,
    /// Quarter turns clockwise applied to the canonical mark; turning the
    /// image back counter-clockwise by as many restores it.
    pub label: usize,
}

/// Label of sample `index`: classes cycle so any prefix is balanced.
pub fn orientation_label(index: usize) -> usize {
    index % ORIENTATION_CLASSES
}

/// Canonical-pose gray bytes for sample `index`, `size`×`size`.
pub fn orientation_canonical_bytes(seed: u64, index: usize, size: usize) -> Vec<u8> {
    let mut rng = rng_for(seed ^ ORIENTATION_STREAM, index as u64);
    let bg = Background::sample(&mut rng);
    let mut canvas = Canvas::new(size, size, bg.mean);
    let cross = Cross::sample(&mut rng, size);
    let v = bg.bright(&mut rng);
    cross.draw(&mut canvas, v);
    let scale = size as f32 / GRNET_INPUT as f32;
    let lo = (scale).round().max(1.0) as usize;
    let hi = (4.5 * scale).round().max(lo as f32) as usize;
    let count = rng.gen_range(0..=4);
    let mut taken = vec![cross.extent()];
    scatter_glyphs(&mut rng, &mut canvas, count, lo..=hi, &mut taken, &mut |r| bg.bright(r));
    canvas.finish(&mut rng, bg.sigma)
}

pub fn orientation_canonical(seed: u64, index: usize, size: usize) -> Tensor {
    gray_to_tensor(size, size, &orientation_canonical_bytes(seed, index, size))
}

pub fn orientation_sample(seed: u64, index: usize, size: usize) -> OrientationSample {
    let label = orientation_label(index);
    let image = rotate_cw(&orientation_canonical(seed, index, size), label).expect("square image");
    OrientationSample { image, label }
}

pub fn gen_orientation_dataset(n: usize, seed: u64) -> Vec<OrientationSample> {
    (0..n).map(|i| orientation_sample(seed, i, GRNET_INPUT)).collect()
}

/// Labelled square gray images stored as bytes; expands to H×W×3 tensors on
/// demand so thousands of training images stay small in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    pub size: usize,
    pub images: Vec<Vec<u8>>,
    pub labels: Vec<usize>,
}

fn rotate_gray_cw(bytes: &[u8], size: usize, turns: usize) -> Vec<u8> {
    let mut out = bytes.to_vec();
    for _ in 0..turns % 4 {
        let src = out.clone();
        for y in 0..size {
            for x in 0..size {
                out[y * size + x] = src[(size - 1 - x) * size + y];
            }
        }
    }
    out
}

impl ImageSet {
    /// Orientation samples `range` of the dataset seeded by `seed`.
    pub fn orientation(seed: u64, range: std::ops::Range<usize>, size: usize) -> Self {
        let mut images = Vec::with_capacity(range.len());
        let mut labels = Vec::with_capacity(range.len());
        for i in range {
            let label = orientation_label(i);
            images.push(rotate_gray_cw(&orientation_canonical_bytes(seed, i, size), size, label));
            labels.push(label);
        }
        Self { size, images, labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> Tensor {
        gray_to_tensor(self.size, self.size, &self.images[i])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub id: String,
    /// H×W×3 in [0, 1].
    pub image: Tensor,
    pub boxes: Vec<GroundTruthBox>,
}

pub const SCENE_MIN_GLYPHS: usize = 3;
pub const SCENE_MAX_GLYPHS: usize = 12;
/// Font cell range in pixels at 416²; the largest framed glyph is 77×99.
const SCENE_CELLS: std::ops::RangeInclusive<usize> = 2..=11;

pub fn scene_id(index: usize) -> String {
    format!("scene_{index:05}")
}

fn render_scene(rng: &mut SynthRng, id: &str, size: usize, with_cross: bool) -> (Vec<u8>, Vec<GroundTruthBox>) {
    let bg = Background::sample(rng);
    let mut canvas = Canvas::new(size, size, bg.mean);
    let mut taken = Vec::new();
    if with_cross {
        let cross = Cross::sample(rng, size);
        let v = bg.bright(rng);
        cross.draw(&mut canvas, v);
        taken.push(cross.extent());
    }
    let scale = size as f32 / GYNET_INPUT as f32;
    let cells = ((*SCENE_CELLS.start() as f32 * scale).round().max(1.0) as usize)
        ..=((*SCENE_CELLS.end() as f32 * scale).round().max(1.0) as usize);
    let count = rng.gen_range(SCENE_MIN_GLYPHS..=SCENE_MAX_GLYPHS);
    let placed = scatter_glyphs(rng, &mut canvas, count, cells, &mut taken, &mut |r| bg.bright(r));
    let boxes = placed
        .into_iter()
        .map(|(class_id, bbox)| GroundTruthBox {
            image: id.to_string(),
            bbox,
            class_id,
        })
        .collect();
    (canvas.finish(rng, bg.sigma), boxes)
}

pub fn scene_sample(seed: u64, index: usize) -> SceneSample {
    let mut rng = rng_for(seed ^ SCENE_STREAM, index as u64);
    let id = scene_id(index);
    let (bytes, boxes) = render_scene(&mut rng, &id, GYNET_INPUT, false);
    SceneSample {
        id,
        image: gray_to_tensor(GYNET_INPUT, GYNET_INPUT, &bytes),
        boxes,
    }
}

pub fn gen_scene_dataset(n: usize, seed: u64) -> Vec<SceneSample> {
    (0..n).map(|i| scene_sample(seed, i)).collect()
}

/// A full pipeline input: glyph scene plus orientation mark, rendered in
/// canonical pose and then turned clockwise by `label` quarter turns. The
/// returned boxes are in canonical-pose coordinates.
pub fn pipeline_scene(seed: u64, index: usize, label: usize, size: usize) -> SceneSample {
    let mut rng = rng_for(seed ^ SCENE_STREAM ^ ORIENTATION_STREAM, index as u64);
    let id = format!("pipeline_{index:05}");
    let (bytes, boxes) = render_scene(&mut rng, &id, size, true);
    let image = rotate_cw(&gray_to_tensor(size, size, &bytes), label).expect("square image");
    SceneSample { id, image, boxes }
}

/// Boxes of `sample` as they appear after the scene is turned clockwise.
pub fn rotated_boxes(boxes: &[GroundTruthBox], size: usize, label: usize) -> Vec<GroundTruthBox> {
    boxes
        .iter()
        .map(|b| GroundTruthBox {
            bbox: rotate_box_cw(&b.bbox, size as f32, size as f32, label),
            ..b.clone()
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    /// Probability of omitting each ground-truth box.
    pub drop_rate: f64,
    /// Maximum per-coordinate perturbation in pixels.
    pub jitter: f32,
    /// Mean number of spurious boxes per image.
    pub false_rate: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleOutput {
    pub detections: Vec<Detection>,
    /// Ground-truth boxes the generator chose to emit.
    pub kept: usize,
}

/// Emits perturbed copies of the scene's boxes plus random false boxes.
pub fn jittered_oracle_detector(scene: &SceneSample, cfg: &OracleConfig, seed: u64) -> Result<OracleOutput> {
    if !(0.0..=1.0).contains(&cfg.drop_rate) || cfg.jitter < 0.0 || cfg.false_rate < 0.0 {
        return Err(Error::invalid(
            "jittered_oracle_detector",
            "drop rate must be in [0, 1], jitter and false rate non-negative",
        ));
    }
    let (h, w, _) = scene.image.hwc()?;
    let (wf, hf) = (w as f32, h as f32);
    let index = scene.id.bytes().fold(0u64, |a, b| a.wrapping_mul(31).wrapping_add(b as u64));
    let mut rng = rng_for(seed ^ ORACLE_STREAM, index);
    let mut detections = Vec::new();
    let mut kept = 0;
    for gt in &scene.boxes {
        if rng.gen_bool(1.0 - cfg.drop_rate) {
            kept += 1;
            let mut j = || {
                if cfg.jitter > 0.0 {
                    rng.gen_range(-cfg.jitter..=cfg.jitter)
                } else {
                    0.0
                }
            };
            let b = gt.bbox;
            let bbox = BBox::new(b.x_min + j(), b.y_min + j(), b.x_max + j(), b.y_max + j()).clamp(wf, hf);
            let score = 1.0 - rng.gen::<f32>();
            if bbox.is_valid() {
                detections.push(Detection {
                    bbox,
                    class_id: gt.class_id,
                    score,
                });
            }
        }
    }
    let spurious = if cfg.false_rate > 0.0 {
        Poisson::new(cfg.false_rate).expect("positive rate").sample(&mut rng) as usize
    } else {
        0
    };
    for _ in 0..spurious {
        let bw = rng.gen_range(8.0..0.25 * wf);
        let bh = rng.gen_range(8.0..0.25 * hf);
        let x = rng.gen_range(0.0..wf - bw);
        let y = rng.gen_range(0.0..hf - bh);
        detections.push(Detection {
            bbox: BBox::new(x, y, x + bw, y + bh),
            class_id: rng.gen_range(0..SIGN_CLASSES),
            score: 1.0 - rng.gen::<f32>(),
        });
    }
    Ok(OracleOutput { detections, kept })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrientationRecord {
    pub file: String,
    pub label: usize,
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut f = BufWriter::new(fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut f, &r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Writes `images/NNNNN.pgm` and `manifest.jsonl` (`{"file", "label"}`).
pub fn write_orientation_dataset(dir: impl AsRef<Path>, set: &ImageSet) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("images"))?;
    let mut rows = Vec::with_capacity(set.len());
    for i in 0..set.len() {
        let file = format!("images/{i:05}.pgm");
        save_image(dir.join(&file), &set.image(i))?;
        rows.push(OrientationRecord {
            file,
            label: set.labels[i],
        });
    }
    write_jsonl(dir.join("manifest.jsonl"), rows)
}

/// Reads a directory written by [`write_orientation_dataset`]. Images must be
/// square and gray.
pub fn read_orientation_dataset(dir: impl AsRef<Path>) -> Result<ImageSet> {
    let dir = dir.as_ref();
    let rows: Vec<OrientationRecord> = read_jsonl(dir.join("manifest.jsonl"))?;
    let mut set = ImageSet {
        size: 0,
        images: Vec::with_capacity(rows.len()),
        labels: Vec::with_capacity(rows.len()),
    };
    for r in rows {
        let path = dir.join(&r.file);
        let img = load_image(&path)?;
        let (h, w, _) = img.hwc()?;
        if h != w || (set.size != 0 && h != set.size) {
            return Err(Error::Image {
                path,
                reason: format!("expected a square {0}×{0} image, got {h}×{w}", set.size.max(h)),
            });
        }
        if r.label >= ORIENTATION_CLASSES {
            return Err(Error::Image {
                path,
                reason: format!("label {} out of range", r.label),
            });
        }
        set.size = h;
        set.images
            .push(img.data().chunks_exact(3).map(|p| (p[0] * 255.0).round() as u8).collect());
        set.labels.push(r.label);
    }
    if set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(set)
}

/// Writes `images/<id>.pgm` per scene and all boxes to `gt.jsonl`.
pub fn write_scene_dataset(dir: impl AsRef<Path>, scenes: &[SceneSample]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("images"))?;
    for s in scenes {
        save_image(dir.join("images").join(format!("{}.pgm", s.id)), &s.image)?;
    }
    write_jsonl(dir.join("gt.jsonl"), scenes.iter().flat_map(|s| s.boxes.iter()))
}
