//! Detection metrics: greedy matching, precision/recall and all-point
//! interpolated average precision.

use serde::{Deserialize, Serialize};

use crate::geometry::{polygon_iou, BBox, StarPolygon};
use crate::num::{from_usize, Scalar};
use crate::scoring::AmplificationStatus;
use crate::signal::{SignalBox, SignalClass};
use crate::simulator::GroundTruth;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedDetection {
    /// Index into the prediction list.
    pub pred: usize,
    pub score: f64,
    /// Matched ground-truth index for true positives.
    pub gt: Option<usize>,
}

impl RankedDetection {
    pub fn is_tp(&self) -> bool {
        self.gt.is_some()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// Detections by descending score, ties in input order.
    pub ranked: Vec<RankedDetection>,
    pub n_gt: usize,
    pub iou_threshold: f64,
}

impl MatchResult {
    pub fn tp(&self) -> usize {
        self.ranked.iter().filter(|d| d.is_tp()).count()
    }

    pub fn fp(&self) -> usize {
        self.ranked.len() - self.tp()
    }

    pub fn fn_count(&self) -> usize {
        self.n_gt - self.tp()
    }

    pub fn tp_flags(&self) -> Vec<bool> {
        self.ranked.iter().map(RankedDetection::is_tp).collect()
    }
}

/// Greedy matching over predictions by descending score: a prediction is a
/// true positive iff its best-IoU unmatched ground truth (lowest index on
/// ties) reaches `iou_threshold`, which consumes that ground truth.
pub fn match_detections(scores: &[f64], n_gt: usize, iou_threshold: f64, iou: impl Fn(usize, usize) -> f64) -> MatchResult {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut used = vec![false; n_gt];
    let ranked = order
        .into_iter()
        .map(|p| {
            let mut best: Option<(usize, f64)> = None;
            for (g, taken) in used.iter().enumerate() {
                if *taken {
                    continue;
                }
                let v = iou(p, g);
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            let gt = match best {
                Some((g, v)) if v >= iou_threshold => {
                    used[g] = true;
                    Some(g)
                }
                _ => None,
            };
            RankedDetection { pred: p, score: scores[p], gt }
        })
        .collect();
    MatchResult { ranked, n_gt, iou_threshold }
}

pub fn match_polygons(preds: &[StarPolygon<f64>], gts: &[StarPolygon<f64>], iou_threshold: f64, supersample: u32) -> MatchResult {
    let scores: Vec<f64> = preds.iter().map(|p| p.score).collect();
    match_detections(&scores, gts.len(), iou_threshold, |p, g| polygon_iou(&preds[p], &gts[g], supersample))
}

pub fn match_boxes(preds: &[(BBox<f64>, f64)], gts: &[BBox<f64>], iou_threshold: f64) -> MatchResult {
    let scores: Vec<f64> = preds.iter().map(|p| p.1).collect();
    match_detections(&scores, gts.len(), iou_threshold, |p, g| preds[p].0.iou(&gts[g]))
}

/// `(precision, recall)`; a zero denominator gives `None`, except that no
/// predictions against no ground truth scores `(1, 1)`.
pub fn precision_recall(m: &MatchResult) -> (Option<f64>, Option<f64>) {
    if m.ranked.is_empty() && m.n_gt == 0 {
        return (Some(1.0), Some(1.0));
    }
    let tp = m.tp() as f64;
    let p = (!m.ranked.is_empty()).then(|| tp / m.ranked.len() as f64);
    let r = (m.n_gt > 0).then(|| tp / m.n_gt as f64);
    (p, r)
}

/// All-point interpolated AP of a ranked TP/FP sequence:
/// `sum_i (r_i - r_{i-1}) * max_{j >= i} p_j` over ranks where recall rises.
/// `None` without ground truth.
pub fn average_precision<T: Scalar>(tp: &[bool], n_gt: usize) -> Option<T> {
    if n_gt == 0 {
        return None;
    }
    let n = tp.len();
    let mut precision = Vec::with_capacity(n);
    let mut hits = 0usize;
    for (i, t) in tp.iter().enumerate() {
        hits += usize::from(*t);
        precision.push(from_usize::<T>(hits) / from_usize::<T>(i + 1));
    }
    // precision envelope from the right
    for i in (0..n.saturating_sub(1)).rev() {
        if precision[i + 1] > precision[i] {
            precision[i] = precision[i + 1].clone();
        }
    }
    let step = T::one() / from_usize::<T>(n_gt);
    let mut ap = T::zero();
    for (i, t) in tp.iter().enumerate() {
        if *t {
            ap = ap + step.clone() * precision[i].clone();
        }
    }
    Some(ap)
}

pub fn match_ap(m: &MatchResult) -> Option<f64> {
    average_precision(&m.tp_flags(), m.n_gt)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub nucleus_iou: f64,
    pub signal_iou: f64,
    pub supersample: u32,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { nucleus_iou: 0.5, signal_iou: 0.5, supersample: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub iou_threshold: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_count: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub ap: Option<f64>,
}

impl DetectionMetrics {
    pub fn from_match(m: &MatchResult) -> Self {
        let (precision, recall) = precision_recall(m);
        Self {
            iou_threshold: m.iou_threshold,
            tp: m.tp(),
            fp: m.fp(),
            fn_count: m.fn_count(),
            precision,
            recall,
            ap: match_ap(m),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalClassMetrics {
    pub class: SignalClass,
    #[serde(flatten)]
    pub metrics: DetectionMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub nuclei: DetectionMetrics,
    pub signals: Vec<SignalClassMetrics>,
    /// Mean AP over the signal classes whose AP is defined.
    pub map: Option<f64>,
    pub predicted_status: AmplificationStatus,
    pub true_status: AmplificationStatus,
    pub status_agrees: bool,
}

/// What a pipeline run predicted, in slide coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct SlidePrediction {
    pub polygons: Vec<StarPolygon<f64>>,
    pub signals: Vec<SignalBox<f64>>,
    pub status: AmplificationStatus,
}

pub fn evaluate_slide(pred: &SlidePrediction, gt: &GroundTruth, cfg: &EvalConfig) -> MetricsReport {
    let nuclei = DetectionMetrics::from_match(&match_polygons(&pred.polygons, &gt.polygons(), cfg.nucleus_iou, cfg.supersample));
    let signals: Vec<SignalClassMetrics> = SignalClass::HEAD_ORDER
        .iter()
        .map(|&class| {
            let p: Vec<(BBox<f64>, f64)> =
                pred.signals.iter().filter(|s| s.class == class).map(|s| (s.bbox, s.score)).collect();
            let g: Vec<BBox<f64>> =
                gt.nuclei.iter().flat_map(|n| &n.signals).filter(|s| s.class == class).map(|s| s.bbox).collect();
            SignalClassMetrics { class, metrics: DetectionMetrics::from_match(&match_boxes(&p, &g, cfg.signal_iou)) }
        })
        .collect();
    let aps: Vec<f64> = signals.iter().filter_map(|s| s.metrics.ap).collect();
    let map = (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64);
    MetricsReport {
        nuclei,
        signals,
        map,
        predicted_status: pred.status,
        true_status: gt.status.status,
        status_agrees: pred.status == gt.status.status,
    }
}
