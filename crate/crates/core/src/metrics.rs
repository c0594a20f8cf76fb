//! Detection matching, precision/recall, AP with all-point interpolation,
//! mAP, and classification accuracy.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::detect::{box_array, iou, BBox, Detection};
use crate::error::{Error, Result};

pub const DEFAULT_MATCH_IOU: f32 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub image: String,
    #[serde(rename = "box", with = "box_array")]
    pub bbox: BBox,
    pub class_id: usize,
}

/// One line of a detections file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image: String,
    pub class_id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_name: Option<String>,
    pub score: f32,
    #[serde(rename = "box", with = "box_array")]
    pub bbox: BBox,
}

impl DetectionRecord {
    pub fn new(image: impl Into<String>, det: &Detection, class_name: Option<String>) -> Self {
        Self {
            image: image.into(),
            class_id: det.class_id,
            class_name,
            score: det.score,
            bbox: det.bbox,
        }
    }

    pub fn detection(&self) -> Detection {
        Detection {
            bbox: self.bbox,
            class_id: self.class_id,
            score: self.score,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matched {
    /// Index into the caller's detection list.
    pub index: usize,
    pub class_id: usize,
    pub score: f32,
    pub tp: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchOutcome {
    /// Detections in score-descending order with their TP/FP label.
    pub detections: Vec<Matched>,
    pub false_negatives: usize,
    /// Ground-truth index claimed by each matched detection, by position in
    /// `detections`.
    pub matched_gt: Vec<Option<usize>>,
}

impl MatchOutcome {
    pub fn true_positives(&self) -> usize {
        self.detections.iter().filter(|d| d.tp).count()
    }

    pub fn false_positives(&self) -> usize {
        self.detections.len() - self.true_positives()
    }
}

/// Greedy matching within one image: in score order, each detection claims
/// the unclaimed same-class ground truth of highest IoU, provided that IoU
/// reaches `iou_threshold`.
pub fn match_detections(dets: &[Detection], gts: &[(BBox, usize)], iou_threshold: f32) -> MatchOutcome {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut claimed = vec![false; gts.len()];
    let mut detections = Vec::with_capacity(dets.len());
    let mut matched_gt = Vec::with_capacity(dets.len());
    for i in order {
        let d = &dets[i];
        let best = gts
            .iter()
            .enumerate()
            .filter(|(j, (_, c))| !claimed[*j] && *c == d.class_id)
            .map(|(j, (b, _))| (j, iou(&d.bbox, b)))
            .filter(|&(_, v)| v >= iou_threshold)
            .fold(None, |best: Option<(usize, f32)>, cand| match best {
                Some(b) if b.1 >= cand.1 => Some(b),
                _ => Some(cand),
            });
        if let Some((j, _)) = best {
            claimed[j] = true;
        }
        detections.push(Matched {
            index: i,
            class_id: d.class_id,
            score: d.score,
            tp: best.is_some(),
        });
        matched_gt.push(best.map(|b| b.0));
    }
    MatchOutcome {
        detections,
        false_negatives: claimed.iter().filter(|c| !**c).count(),
        matched_gt,
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// `(TP/(TP+FP), TP/(TP+FN))`, each 0 when its denominator is 0.
pub fn precision_recall(tp: usize, fp: usize, fn_: usize) -> (f64, f64) {
    (ratio(tp, tp + fp), ratio(tp, tp + fn_))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub num_gt: usize,
    pub points: Vec<PrPoint>,
    pub ap: f64,
}

/// PR curve down a ranking of TP/FP labels, and the area under its
/// precision envelope (precision at recall r is the best precision at any
/// recall ≥ r).
pub fn average_precision(ranked_tp: &[bool], num_gt: usize) -> PrCurve {
    let mut tp = 0usize;
    let points: Vec<PrPoint> = ranked_tp
        .iter()
        .enumerate()
        .map(|(i, &hit)| {
            tp += usize::from(hit);
            PrPoint {
                recall: ratio(tp, num_gt),
                precision: tp as f64 / (i + 1) as f64,
            }
        })
        .collect();
    let mut envelope: Vec<f64> = points.iter().map(|p| p.precision).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, env) in points.iter().zip(&envelope) {
        ap += (p.recall - prev_recall) * env;
        prev_recall = p.recall;
    }
    PrCurve {
        num_gt,
        points,
        ap: ap.clamp(0.0, 1.0),
    }
}

/// Unweighted mean AP over curves with at least one ground-truth instance.
pub fn mean_ap<'a>(curves: impl IntoIterator<Item = &'a PrCurve>) -> Result<f64> {
    let aps: Vec<f64> = curves.into_iter().filter(|c| c.num_gt > 0).map(|c| c.ap).collect();
    if aps.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

pub fn classification_accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::invalid(
            "classification_accuracy",
            format!("{} predictions for {} labels", preds.len(), labels.len()),
        ));
    }
    if preds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class_ap: BTreeMap<usize, f64>,
    pub map: f64,
    pub precision: f64,
    pub recall: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub iou_threshold: f32,
    /// Lowest detection score present in the evaluated set, i.e. the
    /// operating threshold of the reported precision and recall.
    pub score_threshold: Option<f32>,
    pub interpolation: String,
}

/// Dataset-level evaluation. Images are matched independently; per class the
/// labelled detections of all images are ranked by score (ties by image
/// order, then by position) before computing AP.
pub fn evaluate(dets: &[DetectionRecord], gts: &[GroundTruthBox], iou_threshold: f32) -> Result<EvalReport> {
    let mut images: Vec<&str> = Vec::new();
    let mut by_image: HashMap<&str, (Vec<Detection>, Vec<(BBox, usize)>)> = HashMap::new();
    for g in gts {
        by_image
            .entry(&g.image)
            .or_insert_with(|| {
                images.push(&g.image);
                Default::default()
            })
            .1
            .push((g.bbox, g.class_id));
    }
    for d in dets {
        by_image
            .entry(&d.image)
            .or_insert_with(|| {
                images.push(&d.image);
                Default::default()
            })
            .0
            .push(d.detection());
    }

    let mut num_gt: BTreeMap<usize, usize> = BTreeMap::new();
    for g in gts {
        *num_gt.entry(g.class_id).or_default() += 1;
    }
    // (score, image rank, position, tp) per class.
    let mut ranked: BTreeMap<usize, Vec<(f32, usize, usize, bool)>> = BTreeMap::new();
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (rank, image) in images.iter().enumerate() {
        let (d, g) = &by_image[image];
        let m = match_detections(d, g, iou_threshold);
        tp += m.true_positives();
        fp += m.false_positives();
        fn_ += m.false_negatives;
        for x in &m.detections {
            ranked.entry(x.class_id).or_default().push((x.score, rank, x.index, x.tp));
        }
    }

    let mut per_class_ap = BTreeMap::new();
    let mut curves = Vec::new();
    for (&class, &n) in &num_gt {
        let mut list = ranked.remove(&class).unwrap_or_default();
        list.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let labels: Vec<bool> = list.iter().map(|x| x.3).collect();
        let curve = average_precision(&labels, n);
        per_class_ap.insert(class, curve.ap);
        curves.push(curve);
    }
    let map = mean_ap(&curves)?;
    let (precision, recall) = precision_recall(tp, fp, fn_);
    Ok(EvalReport {
        per_class_ap,
        map,
        precision,
        recall,
        true_positives: tp,
        false_positives: fp,
        false_negatives: fn_,
        iou_threshold,
        score_threshold: dets.iter().map(|d| d.score).min_by(f32::total_cmp),
        interpolation: "all-point".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(x: f32, class_id: usize, score: f32) -> Detection {
        Detection {
            bbox: BBox::new(x, 0.0, x + 10.0, 10.0),
            class_id,
            score,
        }
    }

    #[test]
    fn exact_detections_are_all_tp() {
        let dets = [det(0.0, 1, 1.0), det(20.0, 2, 1.0)];
        let gts: Vec<_> = dets.iter().map(|d| (d.bbox, d.class_id)).collect();
        let m = match_detections(&dets, &gts, 0.5);
        assert_eq!(m.true_positives(), 2);
        assert_eq!(m.false_negatives, 0);
    }

    #[test]
    fn lone_detection_is_fp() {
        let m = match_detections(&[det(0.0, 0, 0.3)], &[], 0.5);
        assert_eq!(m.false_positives(), 1);
    }

    #[test]
    fn greedy_order_decides() {
        let gt = BBox::new(0.0, 0.0, 10.0, 10.0);
        // IoU 0.9 at score 0.8, IoU 0.6 at score 0.9.
        let close = Detection {
            bbox: BBox::new(0.0, 0.0, 10.0, 9.0),
            class_id: 0,
            score: 0.8,
        };
        let loose = Detection {
            bbox: BBox::new(0.0, 0.0, 10.0, 6.0),
            class_id: 0,
            score: 0.9,
        };
        let m = match_detections(&[close, loose], &[(gt, 0)], 0.5);
        assert_eq!(m.detections[0].index, 1);
        assert!(m.detections[0].tp);
        assert!(!m.detections[1].tp);
    }

    #[test]
    fn precision_recall_cases() {
        assert_eq!(precision_recall(10, 0, 0), (1.0, 1.0));
        assert_eq!(precision_recall(0, 5, 5), (0.0, 0.0));
        assert_eq!(precision_recall(3, 1, 2), (0.75, 0.6));
        assert_eq!(precision_recall(0, 0, 0), (0.0, 0.0));
    }

    #[test]
    fn ap_cases() {
        assert_eq!(average_precision(&[true, true], 2).ap, 1.0);
        assert_eq!(average_precision(&[], 3).ap, 0.0);
        let c = average_precision(&[true, false, true], 2);
        assert!((c.ap - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn map_cases() {
        let one = average_precision(&[true], 1);
        let zero = average_precision(&[false], 1);
        assert_eq!(mean_ap([&one, &one]).unwrap(), 1.0);
        assert_eq!(mean_ap([&one, &zero]).unwrap(), 0.5);
        let absent = average_precision(&[false], 0);
        assert_eq!(mean_ap([&one, &absent]).unwrap(), 1.0);
        assert!(mean_ap([&absent]).is_err());
    }

    #[test]
    fn accuracy_cases() {
        assert_eq!(classification_accuracy(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(classification_accuracy(&[1, 1], &[0, 0]).unwrap(), 0.0);
        assert_eq!(classification_accuracy(&[0, 1, 2, 3], &[0, 1, 2, 0]).unwrap(), 0.75);
        assert!(classification_accuracy(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn evaluate_counts_add_up() {
        let gts = vec![
            GroundTruthBox {
                image: "a".into(),
                bbox: BBox::new(0.0, 0.0, 10.0, 10.0),
                class_id: 0,
            },
            GroundTruthBox {
                image: "b".into(),
                bbox: BBox::new(0.0, 0.0, 10.0, 10.0),
                class_id: 1,
            },
        ];
        let dets = vec![
            DetectionRecord::new("a", &det(0.0, 0, 0.9), None),
            DetectionRecord::new("a", &det(50.0, 0, 0.8), None),
        ];
        let r = evaluate(&dets, &gts, 0.5).unwrap();
        assert_eq!((r.true_positives, r.false_positives, r.false_negatives), (1, 1, 1));
        assert_eq!(r.per_class_ap[&0], 1.0);
        assert_eq!(r.per_class_ap[&1], 0.0);
        assert_eq!(r.map, 0.5);
    }
}
