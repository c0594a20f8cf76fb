//! Decoding of raw detection-head maps into scored boxes, plus IoU and NMS.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::sigmoid_scalar;
use crate::tensor::Tensor;

/// Prior box size in input-image pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub width: f32,
    pub height: f32,
}

impl Anchor {
    pub const fn new(width: f32, height: f32) -> Self {
        Self { width, height }
    }
}

pub const ANCHORS_13: [Anchor; 3] = [Anchor::new(81.0, 82.0), Anchor::new(135.0, 169.0), Anchor::new(344.0, 319.0)];
pub const ANCHORS_26: [Anchor; 3] = [Anchor::new(10.0, 14.0), Anchor::new(23.0, 27.0), Anchor::new(37.0, 58.0)];
pub const DEFAULT_CONF_THRESHOLD: f32 = 0.25;
pub const DEFAULT_NMS_IOU: f32 = 0.45;

/// Axis-aligned box, corners in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f32,
    pub y_min: f32,
    pub x_max: f32,
    pub y_max: f32,
}

impl BBox {
    pub const fn new(x_min: f32, y_min: f32, x_max: f32, y_max: f32) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn from_center(cx: f32, cy: f32, w: f32, h: f32) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f32 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f32 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f32 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        self.x_min < self.x_max && self.y_min < self.y_max
    }

    pub fn clamp(&self, width: f32, height: f32) -> Self {
        Self::new(
            self.x_min.clamp(0.0, width),
            self.y_min.clamp(0.0, height),
            self.x_max.clamp(0.0, width),
            self.y_max.clamp(0.0, height),
        )
    }

    pub fn scale(&self, sx: f32, sy: f32) -> Self {
        Self::new(self.x_min * sx, self.y_min * sy, self.x_max * sx, self.y_max * sy)
    }

    pub fn to_array(&self) -> [f32; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f32 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box", with = "box_array")]
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f32,
}

/// Boxes serialize as `[x0, y0, x1, y1]`.
pub(crate) mod box_array {
    use super::BBox;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(b: &BBox, s: S) -> Result<S::Ok, S::Error> {
        b.to_array().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BBox, D::Error> {
        let [a, b, c, e] = <[f32; 4]>::deserialize(d)?;
        Ok(BBox::new(a, b, c, e))
    }
}

/// Decodes one `S×S×A·(5+K)` head. Per anchor the channels are
/// `t_x, t_y, t_w, t_h, t_obj, class logits…`.
pub fn decode_head(raw: &Tensor, anchors: &[Anchor], input_size: usize, conf_threshold: f32) -> Result<Vec<Detection>> {
    let (s_h, s_w, c) = raw.hwc()?;
    let a = anchors.len();
    if a == 0 || c % a != 0 || c / a < 6 {
        return Err(Error::invalid(
            "decode_head",
            format!("{c} channels cannot hold {a} anchors of 5 box terms plus classes"),
        ));
    }
    if s_h != s_w || input_size % s_h != 0 {
        return Err(Error::invalid(
            "decode_head",
            format!("grid {s_h}×{s_w} does not divide input size {input_size}"),
        ));
    }
    let per = c / a;
    let stride = (input_size / s_h) as f32;
    let size = input_size as f32;
    let mut out = Vec::new();
    for (cell, px) in raw.data().chunks_exact(c).enumerate() {
        let (gy, gx) = ((cell / s_w) as f32, (cell % s_w) as f32);
        for (anchor, t) in anchors.iter().zip(px.chunks_exact(per)) {
            let obj = sigmoid_scalar(t[4]);
            if obj < conf_threshold {
                continue;
            }
            let (class_id, cls) = t[5..]
                .iter()
                .map(|&v| sigmoid_scalar(v))
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (i, p)| if p > best.1 { (i, p) } else { best });
            let score = obj * cls;
            if score < conf_threshold {
                continue;
            }
            let cx = (gx + sigmoid_scalar(t[0])) * stride;
            let cy = (gy + sigmoid_scalar(t[1])) * stride;
            let w = anchor.width * t[2].exp();
            let h = anchor.height * t[3].exp();
            let bbox = BBox::from_center(cx, cy, w, h).clamp(size, size);
            if bbox.is_valid() {
                out.push(Detection {
                    bbox,
                    class_id,
                    score,
                });
            }
        }
    }
    Ok(out)
}

/// Score-descending order; ties keep input order.
pub fn sort_by_score(dets: &mut [Detection]) {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
}

/// Per-class greedy suppression of boxes overlapping a kept box by more than
/// `iou_threshold`. Output is score-descending.
pub fn nms(dets: &[Detection], iou_threshold: f32) -> Vec<Detection> {
    let mut sorted = dets.to_vec();
    sort_by_score(&mut sorted);
    let mut kept: Vec<Detection> = Vec::new();
    for d in sorted {
        if kept
            .iter()
            .all(|k| k.class_id != d.class_id || iou(&k.bbox, &d.bbox) <= iou_threshold)
        {
            kept.push(d);
        }
    }
    kept
}
