//! Bounding boxes, matching, and mean-average-precision evaluation.
//!
//! AP uses 101-point interpolation over recall thresholds 0.00..1.00, the
//! dominant convention for mAP@[0.5:0.95]. Score ties are broken by input
//! order (and by image id across images), which keeps metrics deterministic.
//! Classes absent from ground truth are excluded from the class mean.

mod files;
mod model;

pub use files::{
    eval_map_from_dirs, parse_label_line, parse_labels, parse_predictions, write_labels,
    write_predictions,
};
pub use model::{
    eval_detector, predict_boxes, toy_detector_loss, train_and_eval, train_toy_detector,
    DetectorConfig, LabeledImage, ToyDetector, TrainedDetector,
};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in pixel (or normalized) coordinates; `score` is present
/// on predictions only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub class_id: u32,
    pub score: Option<f64>,
}

impl Box {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64, class_id: u32) -> Result<Box> {
        if !(x_min < x_max && y_min < y_max) {
            return Err(Error::Contract(format!(
                "degenerate box [{x_min},{y_min},{x_max},{y_max}]"
            )));
        }
        Ok(Box { x_min, y_min, x_max, y_max, class_id, score: None })
    }

    pub fn with_score(mut self, score: f64) -> Box {
        self.score = Some(score);
        self
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }

    fn validate(&self) -> Result<()> {
        if !(self.x_min < self.x_max && self.y_min < self.y_max) {
            return Err(Error::Contract(format!(
                "degenerate box [{},{},{},{}]",
                self.x_min, self.y_min, self.x_max, self.y_max
            )));
        }
        Ok(())
    }
}

/// Intersection-over-union of two boxes; 0 when disjoint.
pub fn iou(a: &Box, b: &Box) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let ix = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let iy = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    Ok(inter / union)
}

/// One scored prediction after matching, in descending-score order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchedPrediction {
    /// Index into the caller's prediction list.
    pub pred_index: usize,
    pub score: f64,
    pub tp: bool,
}

/// Greedy matching: predictions are visited in descending score (ties by
/// input order); each matches the highest-IoU unmatched ground truth of the
/// same class at IoU >= `iou_thresh`. One match per ground truth.
pub fn match_detections(preds: &[Box], gts: &[Box], iou_thresh: f64) -> Result<Vec<MatchedPrediction>> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        let sa = preds[a].score.unwrap_or(0.0);
        let sb = preds[b].score.unwrap_or(0.0);
        sb.partial_cmp(&sa).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let mut taken = vec![false; gts.len()];
    let mut out = Vec::with_capacity(preds.len());
    for &pi in &order {
        let p = &preds[pi];
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if taken[gi] || g.class_id != p.class_id {
                continue;
            }
            let v = iou(p, g)?;
            if v >= iou_thresh {
                let better = match best {
                    None => true,
                    Some((_, bv)) => v > bv,
                };
                if better {
                    best = Some((gi, v));
                }
            }
        }
        let tp = if let Some((gi, _)) = best {
            taken[gi] = true;
            true
        } else {
            false
        };
        out.push(MatchedPrediction { pred_index: pi, score: p.score.unwrap_or(0.0), tp });
    }
    Ok(out)
}

/// 101-point interpolated average precision from TP/FP flags in
/// descending-score order.
pub fn average_precision(flags: &[bool], n_gt: usize) -> Result<f64> {
    if n_gt == 0 {
        return Err(Error::Contract("average_precision: n_gt must be >= 1".into()));
    }
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(flags.len()); // (recall, precision)
    let (mut tp, mut fp) = (0usize, 0usize);
    for &flag in flags {
        if flag {
            tp += 1;
        } else {
            fp += 1;
        }
        points.push((tp as f64 / n_gt as f64, tp as f64 / (tp + fp) as f64));
    }
    let mut total = 0.0f64;
    for i in 0..=100u32 {
        let thr = i as f64 / 100.0;
        let best = points
            .iter()
            .filter(|(r, _)| *r >= thr - 1e-12)
            .map(|(_, p)| *p)
            .fold(0.0f64, f64::max);
        total += best;
    }
    Ok(total / 101.0)
}

/// Per-evaluation metrics before seed aggregation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalResult {
    pub map50: f64,
    pub map5095: f64,
    pub per_class_ap50: BTreeMap<u32, f64>,
}

/// mAP over a set of images at the given IoU thresholds.
///
/// `thresholds` drives the outer average: pass `&[0.5]` for mAP@0.50 or
/// `MAP_RANGE_THRESHOLDS` for mAP@[0.50:0.95]. Classes are averaged over
/// those present in ground truth.
pub const MAP_RANGE_THRESHOLDS: [f64; 10] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

pub fn map_at_thresholds(
    preds_by_image: &BTreeMap<String, Vec<Box>>,
    gts_by_image: &BTreeMap<String, Vec<Box>>,
    thresholds: &[f64],
) -> Result<(f64, BTreeMap<u32, f64>)> {
    for id in preds_by_image.keys() {
        if !gts_by_image.contains_key(id) {
            return Err(Error::Validation(format!(
                "predictions reference unknown image id {id}"
            )));
        }
    }
    let mut classes: Vec<u32> = gts_by_image
        .values()
        .flat_map(|v| v.iter().map(|b| b.class_id))
        .collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return Err(Error::Validation("no ground-truth boxes in evaluation set".into()));
    }

    let mut per_class = BTreeMap::new();
    for &class in &classes {
        let n_gt: usize = gts_by_image
            .values()
            .map(|v| v.iter().filter(|b| b.class_id == class).count())
            .sum();
        let mut ap_sum = 0.0f64;
        for &thr in thresholds {
            // Pool matched predictions across images, then sort globally by
            // descending score with (image id, input order) tie-breaks.
            let mut pooled: Vec<(f64, usize, usize, bool)> = Vec::new(); // (score, img_idx, pred_idx, tp)
            for (img_idx, (id, gts)) in gts_by_image.iter().enumerate() {
                let empty = Vec::new();
                let preds = preds_by_image.get(id).unwrap_or(&empty);
                let class_preds: Vec<Box> =
                    preds.iter().filter(|b| b.class_id == class).cloned().collect();
                let class_gts: Vec<Box> =
                    gts.iter().filter(|b| b.class_id == class).cloned().collect();
                for m in match_detections(&class_preds, &class_gts, thr)? {
                    pooled.push((m.score, img_idx, m.pred_index, m.tp));
                }
            }
            pooled.sort_by(|a, b| {
                b.0.partial_cmp(&a.0)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.1.cmp(&b.1))
                    .then(a.2.cmp(&b.2))
            });
            let flags: Vec<bool> = pooled.iter().map(|p| p.3).collect();
            let ap = if n_gt == 0 { 0.0 } else { average_precision(&flags, n_gt)? };
            ap_sum += ap;
        }
        per_class.insert(class, ap_sum / thresholds.len() as f64);
    }
    let map = per_class.values().sum::<f64>() / per_class.len() as f64;
    Ok((map, per_class))
}

/// Full evaluation entry: mAP@0.50 and mAP@[0.50:0.95].
pub fn evaluate_map(
    preds_by_image: &BTreeMap<String, Vec<Box>>,
    gts_by_image: &BTreeMap<String, Vec<Box>>,
) -> Result<EvalResult> {
    let (map50, per_class_ap50) = map_at_thresholds(preds_by_image, gts_by_image, &[0.5])?;
    let (map5095, _) = map_at_thresholds(preds_by_image, gts_by_image, &MAP_RANGE_THRESHOLDS)?;
    Ok(EvalResult { map50, map5095, per_class_ap50 })
}

/// Mean and sample standard deviation, rendered Table-style as
/// `"0.50 ± 0.02"`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn from_values(values: &[f64]) -> MeanStd {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        MeanStd { mean, std }
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.2} ± {:.2}", self.mean, self.std)
    }
}

/// Multi-seed aggregate in the reporting shape of the study tables.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub map50: MeanStd,
    pub map5095: MeanStd,
    pub per_class_ap50: BTreeMap<u32, MeanStd>,
    pub runs: usize,
}

/// Mean +- sample std of detection metrics over independent seeded runs.
pub fn repeat_eval(
    seeds: &[u64],
    mut run: impl FnMut(u64) -> Result<EvalResult>,
) -> Result<DetectionMetrics> {
    if seeds.len() < 2 {
        return Err(Error::Contract("repeat_eval needs at least 2 seeds".into()));
    }
    let results: Vec<EvalResult> = seeds.iter().map(|&s| run(s)).collect::<Result<_>>()?;
    let map50 = MeanStd::from_values(&results.iter().map(|r| r.map50).collect::<Vec<_>>());
    let map5095 = MeanStd::from_values(&results.iter().map(|r| r.map5095).collect::<Vec<_>>());
    let mut classes: Vec<u32> = results.iter().flat_map(|r| r.per_class_ap50.keys().copied()).collect();
    classes.sort_unstable();
    classes.dedup();
    let per_class_ap50 = classes
        .into_iter()
        .map(|c| {
            let vals: Vec<f64> =
                results.iter().filter_map(|r| r.per_class_ap50.get(&c).copied()).collect();
            (c, MeanStd::from_values(&vals))
        })
        .collect();
    Ok(DetectionMetrics { map50, map5095, per_class_ap50, runs: results.len() })
}
