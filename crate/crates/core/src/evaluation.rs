//! Detection quality: NMS, greedy confidence-ordered matching, PR curves,
//! 101-point interpolated AP, mAP over IoU thresholds and F1 vs confidence.
//!
//! Detections are ranked by descending confidence, then image id, then input
//! position. Every result is a function of that ranking alone, so repeated
//! runs are bit-identical regardless of thread scheduling.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detections::Detection;
use crate::error::{Error, Result};
use crate::geometry::{iou, iou_normalized, to_pixel, PixelBox};
use crate::labelio::{ImageDims, NormalizedBox};

/// Number of recall sample points used by [`average_precision`].
pub const RECALL_POINTS: usize = 101;

pub const AP50_THRESHOLD: f64 = 0.5;

/// The ten IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| f64::from(50 + 5 * i) / 100.0).collect()
}

/// Input positions sorted into evaluation rank order.
fn rank_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .confidence
            .total_cmp(&dets[a].confidence)
            .then_with(|| dets[a].image_id.cmp(&dets[b].image_id))
            .then(a.cmp(&b))
    });
    order
}

fn check_threshold(t: f64) -> Result<()> {
    if t > 0.0 && t <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "IoU threshold {t} outside (0, 1]"
        )))
    }
}

/// Greedy non-maximum suppression, separately per image and class.
///
/// Walks detections in rank order and drops any whose IoU with an already
/// kept box of the same image and class is at least `iou_threshold`.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Result<Vec<Detection>> {
    check_threshold(iou_threshold)?;
    let mut kept_by_group: HashMap<(&str, u32), Vec<&NormalizedBox>> = HashMap::new();
    let mut out = Vec::new();
    for i in rank_order(dets) {
        let d = &dets[i];
        let kept = kept_by_group
            .entry((d.image_id.as_str(), d.class_id()))
            .or_default();
        if kept
            .iter()
            .all(|k| iou_normalized(k, &d.bbox) < iou_threshold)
        {
            kept.push(&d.bbox);
            out.push(d.clone());
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Verdict {
    Tp,
    Fp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedDetection {
    /// Position of the detection in the input list.
    pub index: usize,
    pub image_id: String,
    pub class_id: u32,
    pub confidence: f64,
    pub verdict: Verdict,
    /// Index into the image's ground-truth list.
    pub matched_gt: Option<usize>,
    /// IoU with the best still-unmatched ground truth at decision time.
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub iou_threshold: f64,
    pub ranked: Vec<RankedDetection>,
    pub fn_count: usize,
    pub total_gt: usize,
}

impl MatchResult {
    pub fn tp_count(&self) -> usize {
        self.ranked
            .iter()
            .filter(|r| r.verdict == Verdict::Tp)
            .count()
    }
}

/// Matches detections to ground truth one image at a time.
///
/// In rank order, each detection looks at the not-yet-matched ground truth
/// boxes of its image and class, picks the best IoU (lowest index on ties)
/// and becomes a TP when that IoU reaches the threshold. Each ground truth
/// box is matched at most once.
pub fn match_detections(
    dets: &[Detection],
    gts: &BTreeMap<String, Vec<NormalizedBox>>,
    dims: &BTreeMap<String, ImageDims>,
    iou_threshold: f64,
) -> Result<MatchResult> {
    check_threshold(iou_threshold)?;
    for id in dets.iter().map(|d| &d.image_id).chain(gts.keys()) {
        if !dims.contains_key(id) {
            return Err(Error::UnknownImage(id.clone()));
        }
    }

    let gt_pixels: HashMap<&str, Vec<PixelBox>> = gts
        .iter()
        .map(|(id, boxes)| {
            (
                id.as_str(),
                boxes.iter().map(|b| to_pixel(b, dims[id])).collect(),
            )
        })
        .collect();
    let total_gt: usize = gts.values().map(Vec::len).sum();
    let mut matched: HashMap<&str, Vec<bool>> = gt_pixels
        .iter()
        .map(|(id, boxes)| (*id, vec![false; boxes.len()]))
        .collect();

    let mut ranked = Vec::with_capacity(dets.len());
    for i in rank_order(dets) {
        let d = &dets[i];
        let p = to_pixel(&d.bbox, dims[&d.image_id]);
        let mut best: Option<(usize, f64)> = None;
        if let (Some(boxes), Some(used)) = (
            gt_pixels.get(d.image_id.as_str()),
            matched.get(d.image_id.as_str()),
        ) {
            for (g, gt) in boxes.iter().enumerate() {
                if used[g] || gt.class_id != d.class_id() {
                    continue;
                }
                let v = iou(&p, gt);
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
        }
        let (verdict, matched_gt, best_iou) = match best {
            Some((g, v)) if v >= iou_threshold => {
                matched.get_mut(d.image_id.as_str()).expect("gt image")[g] = true;
                (Verdict::Tp, Some(g), v)
            }
            Some((_, v)) => (Verdict::Fp, None, v),
            None => (Verdict::Fp, None, 0.0),
        };
        ranked.push(RankedDetection {
            index: i,
            image_id: d.image_id.clone(),
            class_id: d.class_id(),
            confidence: d.confidence,
            verdict,
            matched_gt,
            iou: best_iou,
        });
    }
    let tp = ranked.iter().filter(|r| r.verdict == Verdict::Tp).count();
    Ok(MatchResult {
        iou_threshold,
        ranked,
        fn_count: total_gt - tp,
        total_gt,
    })
}

/// Cumulative `(recall, precision)` after each rank prefix.
pub fn pr_curve(m: &MatchResult, total_gt: usize) -> Result<Vec<(f64, f64)>> {
    if m.ranked.is_empty() {
        return Ok(Vec::new());
    }
    if total_gt == 0 {
        return Err(Error::UndefinedRecall(format!(
            "{} detections but no ground truth",
            m.ranked.len()
        )));
    }
    if m.tp_count() > total_gt {
        return Err(Error::InvalidArgument(format!(
            "{} true positives exceed {total_gt} ground truth boxes",
            m.tp_count()
        )));
    }
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(m.ranked.len());
    for (k, r) in m.ranked.iter().enumerate() {
        if r.verdict == Verdict::Tp {
            tp += 1;
        }
        points.push((tp as f64 / total_gt as f64, tp as f64 / (k + 1) as f64));
    }
    Ok(points)
}

/// 101-point interpolated AP: the mean over recall levels 0.00..=1.00 of
/// the best precision reached at or beyond that recall.
pub fn average_precision(points: &[(f64, f64)]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    // suffix_max[i] = best precision among sorted[i..]
    let mut suffix_max = vec![0.0f64; sorted.len() + 1];
    for i in (0..sorted.len()).rev() {
        suffix_max[i] = suffix_max[i + 1].max(sorted[i].1);
    }
    let total: f64 = (0..RECALL_POINTS)
        .map(|k| {
            let r = k as f64 / (RECALL_POINTS - 1) as f64;
            let first = sorted.partition_point(|p| p.0 < r);
            suffix_max[first]
        })
        .sum();
    total / RECALL_POINTS as f64
}

/// Monotone precision envelope of a PR curve.
pub fn precision_envelope(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut out = points.to_vec();
    for i in (0..out.len().saturating_sub(1)).rev() {
        out[i].1 = out[i].1.max(out[i + 1].1);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdAp {
    pub iou_threshold: f64,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: u32,
    pub ap50: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub ap50: f64,
    /// Mean AP over the requested IoU thresholds (0.50:0.95 by default).
    pub ap50_95: f64,
    pub best_f1: f64,
    pub best_f1_confidence: f64,
    /// Precision and recall with every detection kept, at IoU 0.5.
    pub precision: f64,
    pub recall: f64,
    pub total_gt: usize,
    pub total_detections: usize,
    /// Enveloped `(recall, precision)` curve at IoU 0.5.
    pub pr_points: Vec<(f64, f64)>,
    /// `(confidence cutoff, F1)` at IoU 0.5, cutoffs descending.
    pub f1_points: Vec<(f64, f64)>,
    pub per_threshold: Vec<ThresholdAp>,
    pub per_class: Vec<ClassAp>,
}

fn class_subset(
    dets: &[Detection],
    gts: &BTreeMap<String, Vec<NormalizedBox>>,
    class_id: u32,
) -> (Vec<Detection>, BTreeMap<String, Vec<NormalizedBox>>) {
    let d = dets
        .iter()
        .filter(|d| d.class_id() == class_id)
        .cloned()
        .collect();
    let g = gts
        .iter()
        .map(|(id, boxes)| {
            (
                id.clone(),
                boxes
                    .iter()
                    .filter(|b| b.class_id == class_id)
                    .copied()
                    .collect(),
            )
        })
        .collect();
    (d, g)
}

/// One class's detections and ground truth.
type ClassSlice = (u32, Vec<Detection>, BTreeMap<String, Vec<NormalizedBox>>);

/// Class-mean AP at one IoU threshold over classes that have ground truth.
fn mean_ap(
    per_class: &[ClassSlice],
    dims: &BTreeMap<String, ImageDims>,
    threshold: f64,
) -> Result<Vec<f64>> {
    per_class
        .iter()
        .map(|(_, d, g)| {
            let m = match_detections(d, g, dims, threshold)?;
            Ok(average_precision(&pr_curve(&m, m.total_gt)?))
        })
        .collect()
}

fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// F1 at every distinct confidence cutoff, evaluated at the end of each
/// group of equal confidences.
fn f1_by_cutoff(m: &MatchResult) -> Vec<(f64, f64)> {
    let mut out: Vec<(f64, f64)> = Vec::new();
    let mut tp = 0usize;
    for (k, r) in m.ranked.iter().enumerate() {
        if r.verdict == Verdict::Tp {
            tp += 1;
        }
        let group_ends = m
            .ranked
            .get(k + 1)
            .is_none_or(|next| next.confidence != r.confidence);
        if group_ends {
            let precision = tp as f64 / (k + 1) as f64;
            let recall = tp as f64 / m.total_gt as f64;
            out.push((r.confidence, f1(precision, recall)));
        }
    }
    out
}

/// Full metric summary.
///
/// AP is averaged over classes present in the ground truth. Precision,
/// recall, the PR curve and F1 are pooled over all classes at IoU 0.5;
/// detections of classes without ground truth count as false positives there.
pub fn evaluate(
    dets: &[Detection],
    gts: &BTreeMap<String, Vec<NormalizedBox>>,
    dims: &BTreeMap<String, ImageDims>,
    iou_thresholds: &[f64],
) -> Result<MetricsSummary> {
    if iou_thresholds.is_empty() {
        return Err(Error::InvalidArgument("no IoU thresholds given".into()));
    }
    for &t in iou_thresholds {
        check_threshold(t)?;
    }

    let pooled = match_detections(dets, gts, dims, AP50_THRESHOLD)?;
    if pooled.total_gt == 0 {
        return Err(Error::UndefinedRecall(
            "ground truth contains no boxes".into(),
        ));
    }

    let classes: BTreeSet<u32> = gts.values().flatten().map(|b| b.class_id).collect();
    let per_class: Vec<_> = classes
        .iter()
        .map(|&c| {
            let (d, g) = class_subset(dets, gts, c);
            (c, d, g)
        })
        .collect();

    let class_ap50 = mean_ap(&per_class, dims, AP50_THRESHOLD)?;
    let per_threshold: Vec<ThresholdAp> = iou_thresholds
        .par_iter()
        .map(|&t| {
            let aps = mean_ap(&per_class, dims, t)?;
            Ok(ThresholdAp {
                iou_threshold: t,
                ap: aps.iter().sum::<f64>() / aps.len() as f64,
            })
        })
        .collect::<Result<_>>()?;

    let ap50 = class_ap50.iter().sum::<f64>() / class_ap50.len() as f64;
    let ap50_95 = per_threshold.iter().map(|t| t.ap).sum::<f64>() / per_threshold.len() as f64;

    let curve = pr_curve(&pooled, pooled.total_gt)?;
    let f1_points = f1_by_cutoff(&pooled);
    let (best_f1_confidence, best_f1) =
        f1_points
            .iter()
            .copied()
            .fold((0.0, 0.0), |best, p| if p.1 > best.1 { p } else { best });
    let (recall, precision) = curve.last().copied().unwrap_or((0.0, 0.0));

    Ok(MetricsSummary {
        ap50,
        ap50_95,
        best_f1,
        best_f1_confidence,
        precision,
        recall,
        total_gt: pooled.total_gt,
        total_detections: dets.len(),
        pr_points: precision_envelope(&curve),
        f1_points,
        per_threshold,
        per_class: classes
            .iter()
            .zip(class_ap50)
            .map(|(&class_id, ap50)| ClassAp { class_id, ap50 })
            .collect(),
    })
}

/// Parses `start:stop:step` (inclusive stop) or a single value.
pub fn parse_threshold_range(range: &str) -> Result<Vec<f64>> {
    let bad = || {
        Error::InvalidArgument(format!(
            "bad threshold range `{range}`, want start:stop:step"
        ))
    };
    let parts: Vec<f64> = range
        .split(':')
        .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    let values = match parts.as_slice() {
        [v] => vec![*v],
        [start, stop, step] if *step > 0.0 && stop >= start => {
            // Count steps with a little slack so 0.5:0.95:0.05 includes 0.95.
            let n = ((stop - start) / step + 1e-9).floor() as usize;
            (0..=n)
                .map(|i| {
                    let v = start + step * i as f64;
                    // Snap to the step grid's decimal resolution.
                    (v * 1e9).round() / 1e9
                })
                .collect()
        }
        _ => return Err(bad()),
    };
    for &v in &values {
        check_threshold(v)?;
    }
    Ok(values)
}

pub const METRICS_CSV_HEADER: &str = "iteration,ap50,ap50_95,best_f1,best_f1_confidence";

/// Metric report rows as CSV with a header line.
pub fn metrics_csv<'a, I>(rows: I) -> String
where
    I: IntoIterator<Item = (&'a str, &'a MetricsSummary)>,
{
    let mut out = String::from(METRICS_CSV_HEADER);
    out.push('\n');
    for (iteration, m) in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            iteration, m.ap50, m.ap50_95, m.best_f1, m.best_f1_confidence
        );
    }
    out
}
