//! Detection quality: mAP at IoU 0.5 and the false-negative /
//! false-positive / class-confusion error taxonomy, per domain.
//!
//! Detections are always visited by descending score; equal scores keep
//! their input order. A detection takes the unconsumed ground truth with
//! the highest IoU (first one on ties), so every ground-truth box is
//! consumed at most once.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::prototype::BoxAnnotation;

pub const AP_IOU_THRESHOLD: f64 = 0.5;
pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.5;
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: BBox,
    pub score: f64,
}

impl Detection {
    pub fn validate(&self) -> Result<()> {
        self.bbox.validate()?;
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::Validation(format!(
                "score {} outside [0, 1]",
                self.score
            )));
        }
        Ok(())
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

/// Indices of `dets` by descending score, ties in input order.
pub fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    order
}

/// Greedy one-to-one matching. `same_class` restricts candidates to the
/// detection's category. Returns, per detection (input indexing), the
/// matched ground-truth index.
fn greedy_match(
    dets: &[Detection],
    gts: &[BoxAnnotation],
    iou_threshold: f64,
    same_class: bool,
) -> Vec<Option<usize>> {
    let mut by_image: HashMap<u64, Vec<usize>> = HashMap::new();
    for (g, gt) in gts.iter().enumerate() {
        by_image.entry(gt.image_id).or_default().push(g);
    }
    let mut consumed = vec![false; gts.len()];
    let mut matched = vec![None; dets.len()];
    for d in score_order(dets) {
        let det = &dets[d];
        let Some(candidates) = by_image.get(&det.image_id) else {
            continue;
        };
        let mut best: Option<(usize, f64)> = None;
        for &g in candidates {
            if consumed[g] || (same_class && gts[g].category_id != det.category_id) {
                continue;
            }
            let v = det.bbox.iou(&gts[g].bbox);
            if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            consumed[g] = true;
            matched[d] = Some(g);
        }
    }
    matched
}

/// All-point interpolated average precision for one category.
///
/// Only detections and ground truth of `category_id` take part. Returns
/// `None` when the category has no ground truth.
pub fn average_precision(
    category_id: u64,
    dets: &[Detection],
    gts: &[BoxAnnotation],
    iou_threshold: f64,
) -> Option<f64> {
    let gts: Vec<BoxAnnotation> = gts
        .iter()
        .filter(|g| g.category_id == category_id)
        .cloned()
        .collect();
    if gts.is_empty() {
        return None;
    }
    let dets: Vec<Detection> = dets
        .iter()
        .filter(|d| d.category_id == category_id)
        .cloned()
        .collect();
    let matched = greedy_match(&dets, &gts, iou_threshold, true);
    let n_gt = gts.len() as f64;

    let mut precisions = Vec::with_capacity(dets.len());
    let mut is_tp = Vec::with_capacity(dets.len());
    let mut tp = 0usize;
    for (rank, d) in score_order(&dets).into_iter().enumerate() {
        let hit = matched[d].is_some();
        tp += usize::from(hit);
        precisions.push(tp as f64 / (rank + 1) as f64);
        is_tp.push(hit);
    }
    // precision envelope: running max from the right
    for i in (0..precisions.len().saturating_sub(1)).rev() {
        precisions[i] = precisions[i].max(precisions[i + 1]);
    }
    let ap = is_tp
        .iter()
        .zip(&precisions)
        .filter(|(hit, _)| **hit)
        .map(|(_, p)| p / n_gt)
        .sum();
    Some(ap)
}

/// AP at IoU 0.5 for one category.
pub fn ap50(category_id: u64, dets: &[Detection], gts: &[BoxAnnotation]) -> Option<f64> {
    average_precision(category_id, dets, gts, AP_IOU_THRESHOLD)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub per_class_ap: BTreeMap<u64, f64>,
    /// Mean over categories that have ground truth; 0 when none do.
    pub map50: f64,
}

pub fn map50(dets: &[Detection], gts: &[BoxAnnotation]) -> MapReport {
    let classes: Vec<u64> = gts
        .iter()
        .map(|g| g.category_id)
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let per_class_ap: BTreeMap<u64, f64> = classes
        .par_iter()
        .map(|&c| (c, ap50(c, dets, gts).expect("class has ground truth")))
        .collect();
    let map50 = if per_class_ap.is_empty() {
        0.0
    } else {
        per_class_ap.values().sum::<f64>() / per_class_ap.len() as f64
    };
    MapReport {
        per_class_ap,
        map50,
    }
}

/// Integer tallies behind the error rates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaxonomyCounts {
    pub ground_truth: usize,
    /// Detections at or above the score threshold.
    pub detections: usize,
    pub correct: usize,
    pub confused: usize,
    pub missed: usize,
    pub false_positives: usize,
}

impl TaxonomyCounts {
    pub fn fn_rate(&self) -> f64 {
        ratio(self.missed, self.ground_truth)
    }

    pub fn confusion_rate(&self) -> f64 {
        ratio(self.confused, self.ground_truth)
    }

    pub fn correct_rate(&self) -> f64 {
        ratio(self.correct, self.ground_truth)
    }

    pub fn fp_rate(&self) -> f64 {
        ratio(self.false_positives, self.detections)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Error rates and AP for one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub domain: String,
    pub fn_rate: f64,
    pub fp_rate: f64,
    pub confusion_rate: f64,
    pub correct_rate: f64,
    pub counts: TaxonomyCounts,
    pub per_class_ap: BTreeMap<u64, f64>,
    pub map50: f64,
}

fn check_threshold(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v <= 1.0) {
        return Err(Error::contract(format!(
            "{name} must lie in (0, 1], got {v}"
        )));
    }
    Ok(())
}

/// Tallies correct / confused / missed ground truth and false positives.
///
/// Detections below `score_threshold` are dropped. The rest are matched
/// to ground truth class-agnostically; the class is checked afterwards.
pub fn taxonomy_counts(
    dets: &[Detection],
    gts: &[BoxAnnotation],
    score_threshold: f64,
    iou_threshold: f64,
) -> Result<TaxonomyCounts> {
    check_threshold("score_threshold", score_threshold)?;
    check_threshold("iou_threshold", iou_threshold)?;
    let kept: Vec<Detection> = dets
        .iter()
        .filter(|d| d.score >= score_threshold)
        .cloned()
        .collect();
    let matched = greedy_match(&kept, gts, iou_threshold, false);
    let mut counts = TaxonomyCounts {
        ground_truth: gts.len(),
        detections: kept.len(),
        ..Default::default()
    };
    for (d, m) in matched.iter().enumerate() {
        match m {
            Some(g) if gts[*g].category_id == kept[d].category_id => counts.correct += 1,
            Some(_) => counts.confused += 1,
            None => counts.false_positives += 1,
        }
    }
    counts.missed = counts.ground_truth - counts.correct - counts.confused;
    Ok(counts)
}

/// Error rates plus mAP@50 for one set of detections.
pub fn error_taxonomy(
    dets: &[Detection],
    gts: &[BoxAnnotation],
    score_threshold: f64,
    iou_threshold: f64,
) -> Result<ErrorReport> {
    let counts = taxonomy_counts(dets, gts, score_threshold, iou_threshold)?;
    let map = map50(dets, gts);
    Ok(ErrorReport {
        domain: String::new(),
        fn_rate: counts.fn_rate(),
        fp_rate: counts.fp_rate(),
        confusion_rate: counts.confusion_rate(),
        correct_rate: counts.correct_rate(),
        counts,
        per_class_ap: map.per_class_ap,
        map50: map.map50,
    })
}

/// Detections and ground truth of one domain.
#[derive(Debug, Clone, Default)]
pub struct DomainInput {
    pub domain: String,
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<BoxAnnotation>,
}

/// One report per domain, in `ordering` (or input order when `ordering`
/// is empty).
pub fn domain_sweep(
    inputs: &[DomainInput],
    ordering: &[String],
    score_threshold: f64,
    iou_threshold: f64,
) -> Result<Vec<ErrorReport>> {
    if inputs.is_empty() {
        return Err(Error::contract("domain sweep needs at least one domain"));
    }
    let mut seen = HashSet::new();
    for d in inputs {
        if !seen.insert(d.domain.as_str()) {
            return Err(Error::contract(format!(
                "duplicate domain tag {:?}",
                d.domain
            )));
        }
    }
    let order: Vec<&str> = if ordering.is_empty() {
        inputs.iter().map(|d| d.domain.as_str()).collect()
    } else {
        let mut seen = HashSet::new();
        for tag in ordering {
            if !seen.insert(tag.as_str()) {
                return Err(Error::contract(format!(
                    "duplicate domain tag {tag:?} in ordering"
                )));
            }
        }
        ordering.iter().map(String::as_str).collect()
    };
    order
        .into_iter()
        .map(|tag| {
            let input = inputs
                .iter()
                .find(|d| d.domain == tag)
                .ok_or_else(|| Error::Lookup(format!("no inputs for domain {tag:?}")))?;
            let mut report = error_taxonomy(
                &input.detections,
                &input.ground_truth,
                score_threshold,
                iou_threshold,
            )?;
            report.domain = tag.to_string();
            Ok(report)
        })
        .collect()
}

/// Column-oriented view of a sweep, ready for plotting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub domains: Vec<String>,
    pub fn_rate: Vec<f64>,
    pub fp_rate: Vec<f64>,
    pub confusion_rate: Vec<f64>,
    pub map50: Vec<f64>,
}

impl SweepTable {
    pub fn from_reports(reports: &[ErrorReport]) -> Self {
        Self {
            domains: reports.iter().map(|r| r.domain.clone()).collect(),
            fn_rate: reports.iter().map(|r| r.fn_rate).collect(),
            fp_rate: reports.iter().map(|r| r.fp_rate).collect(),
            confusion_rate: reports.iter().map(|r| r.confusion_rate).collect(),
            map50: reports.iter().map(|r| r.map50).collect(),
        }
    }
}

/// Aligned plain-text table of a sweep.
pub fn render_sweep(reports: &[ErrorReport]) -> String {
    let width = reports
        .iter()
        .map(|r| r.domain.len())
        .max()
        .unwrap_or(0)
        .max(6);
    let mut out = format!(
        "{:<width$}  {:>7}  {:>7}  {:>9}  {:>7}  {:>5}  {:>5}\n",
        "domain", "fn", "fp", "confusion", "mAP50", "gt", "dets"
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{:<width$}  {:>7.4}  {:>7.4}  {:>9.4}  {:>7.4}  {:>5}  {:>5}",
            r.domain,
            r.fn_rate,
            r.fp_rate,
            r.confusion_rate,
            r.map50,
            r.counts.ground_truth,
            r.counts.detections
        );
    }
    out
}
