//! Detection post-processing and VOC-style average precision.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::geometry::{iou, nms, BBox};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    /// Category id in `1..=c`.
    pub category: usize,
    pub score: f32,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DetectionResult {
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PostprocessConfig {
    pub score_threshold: f32,
    pub nms_threshold: f32,
    pub max_detections: usize,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.01,
            nms_threshold: 0.5,
            max_detections: 100,
        }
    }
}

/// Turns per-region class probabilities into final detections.
///
/// `scores` is `[n, c + 1]` with background in column 0; `boxes` is `[n, c]`
/// (class-specific, already decoded). Background is dropped, low scores are
/// filtered, NMS runs per class and the best `max_detections` survive.
pub fn postprocess(
    scores: &[f32],
    boxes: &[BBox],
    num_classes: usize,
    config: &PostprocessConfig,
) -> Result<DetectionResult> {
    let k = num_classes + 1;
    if num_classes == 0 {
        return Err(invalid("postprocess: need at least one category"));
    }
    let n = scores.len() / k;
    if !scores.len().is_multiple_of(k) || boxes.len() != n * num_classes {
        return Err(invalid("postprocess: scores and boxes disagree on region count"));
    }
    let mut all = Vec::new();
    for c in 1..=num_classes {
        let mut cb = Vec::new();
        let mut cs = Vec::new();
        for r in 0..n {
            let s = scores[r * k + c];
            let b = boxes[r * num_classes + c - 1];
            if s >= config.score_threshold && b.width() > 0.0 && b.height() > 0.0 {
                cb.push(b);
                cs.push(s);
            }
        }
        for i in nms(&cb, &cs, config.nms_threshold)? {
            all.push(Detection {
                bbox: cb[i],
                category: c,
                score: cs[i],
            });
        }
    }
    all.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(core::cmp::Ordering::Equal));
    all.truncate(config.max_detections);
    Ok(DetectionResult { detections: all })
}

/// Annotations of one image.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruth {
    pub boxes: Vec<BBox>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ApMethod {
    /// Area under the monotone precision envelope.
    #[default]
    AllPoint,
    /// Mean of the envelope at recall 0, 0.1, ..., 1.
    ElevenPoint,
}

/// Cumulative precision/recall over the score-sorted detections of one
/// category. Each detection takes the unmatched ground truth with the highest
/// IoU (at least `iou_threshold`); anything else is a false positive.
/// Returns `None` when the category has no ground truth.
pub fn precision_recall(
    detections: &[DetectionResult],
    gts: &[GroundTruth],
    category: usize,
    iou_threshold: f32,
) -> Result<Option<(Vec<f64>, Vec<f64>)>> {
    if detections.len() != gts.len() {
        return Err(invalid(
            "precision_recall: detections and ground truth cover different images",
        ));
    }
    let num_gt: usize = gts
        .iter()
        .map(|g| g.labels.iter().filter(|&&l| l == category).count())
        .sum();
    if num_gt == 0 {
        return Ok(None);
    }
    let mut dets: Vec<(f32, usize, BBox)> = Vec::new();
    for (img, res) in detections.iter().enumerate() {
        for d in res.detections.iter().filter(|d| d.category == category) {
            dets.push((d.score, img, d.bbox));
        }
    }
    dets.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(core::cmp::Ordering::Equal));
    let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.boxes.len()]).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut precision = Vec::with_capacity(dets.len());
    let mut recall = Vec::with_capacity(dets.len());
    for (_, img, b) in dets {
        let g = &gts[img];
        let mut best = (iou_threshold, None);
        for (j, (gb, &gl)) in g.boxes.iter().zip(&g.labels).enumerate() {
            if gl != category || matched[img][j] {
                continue;
            }
            let v = iou(&b, gb);
            if v >= best.0 && (best.1.is_none() || v > best.0) {
                best = (v, Some(j));
            }
        }
        match best.1 {
            Some(j) => {
                matched[img][j] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    Ok(Some((precision, recall)))
}

/// Average precision from a precision/recall curve.
pub fn ap_from_curve(precision: &[f64], recall: &[f64], method: ApMethod) -> f64 {
    match method {
        ApMethod::AllPoint => {
            let mut mpre = vec![0.0];
            mpre.extend_from_slice(precision);
            mpre.push(0.0);
            let mut mrec = vec![0.0];
            mrec.extend_from_slice(recall);
            mrec.push(1.0);
            for i in (0..mpre.len() - 1).rev() {
                mpre[i] = mpre[i].max(mpre[i + 1]);
            }
            (1..mrec.len())
                .filter(|&i| mrec[i] != mrec[i - 1])
                .map(|i| (mrec[i] - mrec[i - 1]) * mpre[i])
                .sum()
        }
        ApMethod::ElevenPoint => {
            (0..=10)
                .map(|t| {
                    let t = t as f64 / 10.0;
                    precision
                        .iter()
                        .zip(recall)
                        .filter(|(_, &r)| r >= t)
                        .map(|(&p, _)| p)
                        .fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0
        }
    }
}

/// AP of one category, `None` if it has no ground truth.
pub fn average_precision(
    detections: &[DetectionResult],
    gts: &[GroundTruth],
    category: usize,
    iou_threshold: f32,
    method: ApMethod,
) -> Result<Option<f64>> {
    Ok(precision_recall(detections, gts, category, iou_threshold)?.map(|(p, r)| ap_from_curve(&p, &r, method)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryAp {
    pub category: usize,
    pub ap: Option<f64>,
    pub num_gt: usize,
    pub num_detections: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapReport {
    /// Mean over categories that have ground truth.
    pub map: f64,
    pub per_category: Vec<CategoryAp>,
}

/// mAP at the given IoU over categories `1..=num_classes`.
pub fn mean_average_precision(
    detections: &[DetectionResult],
    gts: &[GroundTruth],
    num_classes: usize,
    iou_threshold: f32,
    method: ApMethod,
) -> Result<MapReport> {
    if gts.iter().all(|g| g.boxes.is_empty()) {
        return Err(invalid("dataset has no ground-truth boxes; mAP is undefined"));
    }
    let mut per_category = Vec::with_capacity(num_classes);
    for c in 1..=num_classes {
        let ap = average_precision(detections, gts, c, iou_threshold, method)?;
        per_category.push(CategoryAp {
            category: c,
            ap,
            num_gt: gts.iter().map(|g| g.labels.iter().filter(|&&l| l == c).count()).sum(),
            num_detections: detections
                .iter()
                .map(|d| d.detections.iter().filter(|x| x.category == c).count())
                .sum(),
        });
    }
    let valid: Vec<f64> = per_category.iter().filter_map(|c| c.ap).collect();
    let map = if valid.is_empty() {
        0.0
    } else {
        valid.iter().sum::<f64>() / valid.len() as f64
    };
    Ok(MapReport { map, per_category })
}

/// mAP at IoU 0.5 with all-point interpolation.
pub fn map50(detections: &[DetectionResult], gts: &[GroundTruth], num_classes: usize) -> Result<MapReport> {
    mean_average_precision(detections, gts, num_classes, 0.5, ApMethod::AllPoint)
}
