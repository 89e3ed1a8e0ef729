//! Detection evaluation: PR curves, AP at several IoU thresholds, false
//! positives at fixed recall levels, and the localization-vs-background
//! split of the false positives.
//!
//! AP integrates the exact area under the precision envelope (all-point
//! interpolation); the report header says so, since different toolkits
//! pin different rules.

use std::fmt::Write as _;
use std::path::Path;

use crate::boxgeom::{iou, BBox, Detection};
use crate::cascade::{AnchorLabel, MatchAssignment};
use crate::error::{Error, Result};

/// IoU thresholds reported by default.
pub const AP_IOU_THRESHOLDS: [f64; 4] = [0.5, 0.6, 0.7, 0.8];
/// Recall levels (fractions) of the false-positive table.
pub const RECALL_LEVELS: [f64; 6] = [0.10, 0.30, 0.50, 0.80, 0.90, 0.95];
/// A false positive with best gt IoU in this band is a localization
/// error; anything below is a background (classification) error.
pub const LOC_IOU_BAND: (f64, f64) = (0.1, 0.5);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ErrorSplit {
    pub loc: usize,
    pub cls: usize,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    /// (recall, precision) after each scored detection, at IoU 0.5.
    pub pr: Vec<(f64, f64)>,
    /// (iou threshold, AP), non-increasing in the threshold.
    pub ap_by_iou: Vec<(f64, f64)>,
    /// (recall level, false positives in the minimal prefix reaching it);
    /// None marks an unattained level.
    pub fp_at_recall: Vec<(f64, Option<usize>)>,
    pub error_split: ErrorSplit,
    /// Positive/negative anchor ratio observed during matching;
    /// infinity when no negatives remain.
    pub pos_neg_ratio: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Outcome {
    Tp,
    Fp,
    /// Matched only a ground truth outside the size filter: not counted.
    Skipped,
}

/// Score-descending order over all images, ties by (image, index).
fn sorted_order(dets: &[Vec<Detection>]) -> Vec<(usize, usize)> {
    let mut order: Vec<(usize, usize)> = dets
        .iter()
        .enumerate()
        .flat_map(|(img, v)| (0..v.len()).map(move |i| (img, i)))
        .collect();
    order.sort_by(|&(ia, ka), &(ib, kb)| {
        dets[ib][kb]
            .score
            .partial_cmp(&dets[ia][ka].score)
            .unwrap()
            .then(ia.cmp(&ib))
            .then(ka.cmp(&kb))
    });
    order
}

/// Greedy matching in score order: each ground truth is claimed at most
/// once; a detection overlapping only out-of-range gts is skipped rather
/// than counted against precision.
fn match_outcomes(
    dets: &[Vec<Detection>],
    gts: &[Vec<BBox>],
    iou_thresh: f64,
    size_range: Option<(f64, f64)>,
) -> (Vec<(usize, usize)>, Vec<Outcome>, usize) {
    assert_eq!(dets.len(), gts.len(), "detections and gts must cover the same images");
    let in_range = |b: &BBox| match size_range {
        Some((lo, hi)) => {
            let s = b.scale();
            s >= lo && s < hi
        }
        None => true,
    };
    let total_active: usize =
        gts.iter().map(|v| v.iter().filter(|g| in_range(g)).count()).sum();
    let mut claimed: Vec<Vec<bool>> = gts.iter().map(|v| vec![false; v.len()]).collect();
    let order = sorted_order(dets);
    let mut outcomes = Vec::with_capacity(order.len());
    for &(img, k) in &order {
        let det = &dets[img][k];
        let mut best_active: Option<(usize, f64)> = None;
        let mut best_any = 0.0f64;
        for (gi, gt) in gts[img].iter().enumerate() {
            let v = iou(&det.bbox, gt);
            best_any = best_any.max(v);
            if v >= iou_thresh
                && in_range(gt)
                && !claimed[img][gi]
                && best_active.is_none_or(|(_, bv)| v > bv)
            {
                best_active = Some((gi, v));
            }
        }
        let outcome = if let Some((gi, _)) = best_active {
            claimed[img][gi] = true;
            Outcome::Tp
        } else if best_any >= iou_thresh {
            // Overlaps a gt that is claimed already or out of range.
            let claimed_hit = gts[img].iter().enumerate().any(|(gi, gt)| {
                claimed[img][gi] && in_range(gt) && iou(&det.bbox, gt) >= iou_thresh
            });
            if claimed_hit {
                Outcome::Fp
            } else {
                Outcome::Skipped
            }
        } else {
            Outcome::Fp
        };
        outcomes.push(outcome);
    }
    (order, outcomes, total_active)
}

/// Raw PR points (recall, precision) after each counted detection.
fn pr_points(outcomes: &[Outcome], total_gts: usize) -> Vec<(f64, f64)> {
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for o in outcomes {
        match o {
            Outcome::Tp => tp += 1,
            Outcome::Fp => fp += 1,
            Outcome::Skipped => continue,
        }
        if total_gts > 0 {
            points.push((tp as f64 / total_gts as f64, tp as f64 / (tp + fp) as f64));
        }
    }
    points
}

/// Exact area under the precision envelope of the PR points.
fn envelope_area(points: &[(f64, f64)]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    // Envelope from the right: precision at recall r is the best
    // precision among points with recall >= r.
    let mut env: Vec<(f64, f64)> = points.to_vec();
    let mut best = 0.0f64;
    for p in env.iter_mut().rev() {
        best = best.max(p.1);
        p.1 = best;
    }
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for &(r, p) in &env {
        if r > prev_recall {
            area += (r - prev_recall) * p;
            prev_recall = r;
        }
    }
    area
}

/// AP and PR curve at one IoU threshold over per-image detections.
pub fn compute_ap(
    dets: &[Vec<Detection>],
    gts: &[Vec<BBox>],
    iou_thresh: f64,
) -> (f64, Vec<(f64, f64)>) {
    compute_ap_filtered(dets, gts, iou_thresh, None)
}

/// Same, evaluating only ground truths whose scale (sqrt of area) lies in
/// `size_range`; detections claimed by out-of-range gts are skipped.
pub fn compute_ap_filtered(
    dets: &[Vec<Detection>],
    gts: &[Vec<BBox>],
    iou_thresh: f64,
    size_range: Option<(f64, f64)>,
) -> (f64, Vec<(f64, f64)>) {
    let (_, outcomes, total) = match_outcomes(dets, gts, iou_thresh, size_range);
    let points = pr_points(&outcomes, total);
    (envelope_area(&points), points)
}

/// False-positive counts within the minimal score-descending prefix that
/// reaches each recall level (evaluated at IoU 0.5). Unreachable levels
/// report None.
pub fn fp_at_recall(
    dets: &[Vec<Detection>],
    gts: &[Vec<BBox>],
    levels: &[f64],
) -> Vec<(f64, Option<usize>)> {
    let (_, outcomes, total) = match_outcomes(dets, gts, 0.5, None);
    let mut out = Vec::with_capacity(levels.len());
    for &level in levels {
        let mut found = None;
        let (mut tp, mut fp) = (0usize, 0usize);
        if total > 0 {
            for o in &outcomes {
                match o {
                    Outcome::Tp => tp += 1,
                    Outcome::Fp => fp += 1,
                    Outcome::Skipped => continue,
                }
                if tp as f64 / total as f64 >= level {
                    found = Some(fp);
                    break;
                }
            }
        }
        out.push((level, found));
    }
    out
}

/// Identify the false positives at IoU 0.5, as (image id, box) pairs in
/// score order.
pub fn false_positives(dets: &[Vec<Detection>], gts: &[Vec<BBox>]) -> Vec<(usize, BBox)> {
    let (order, outcomes, _) = match_outcomes(dets, gts, 0.5, None);
    order
        .iter()
        .zip(&outcomes)
        .filter(|(_, o)| **o == Outcome::Fp)
        .map(|(&(img, k), _)| (img, dets[img][k].bbox))
        .collect()
}

/// Band each false positive by its best gt IoU: inside [0.1, 0.5) it is a
/// localization error, below that a background error.
pub fn error_decompose(false_positives: &[(usize, BBox)], gts: &[Vec<BBox>]) -> ErrorSplit {
    let mut split = ErrorSplit::default();
    for &(img, bbox) in false_positives {
        let best = gts[img].iter().map(|g| iou(g, &bbox)).fold(0.0, f64::max);
        if best >= LOC_IOU_BAND.0 && best < LOC_IOU_BAND.1 {
            split.loc += 1;
        } else {
            split.cls += 1;
        }
    }
    split
}

/// Positives over negatives among the kept anchors; infinity when no
/// negatives survive.
pub fn pos_neg_ratio(assignment: &MatchAssignment, keep: &[bool]) -> f64 {
    assert_eq!(assignment.labels.len(), keep.len());
    let (mut pos, mut neg) = (0usize, 0usize);
    for (label, &kept) in assignment.labels.iter().zip(keep) {
        if !kept {
            continue;
        }
        match label {
            AnchorLabel::Positive(_) => pos += 1,
            AnchorLabel::Negative => neg += 1,
            AnchorLabel::Ignored => {}
        }
    }
    if neg == 0 {
        f64::INFINITY
    } else {
        pos as f64 / neg as f64
    }
}

/// Full report over per-image detections. The anchor ratio is an
/// observation of the caller's matching pipeline and is passed through.
pub fn evaluate(dets: &[Vec<Detection>], gts: &[Vec<BBox>], pos_neg_ratio: f64) -> EvalReport {
    let mut ap_by_iou = Vec::new();
    let mut pr = Vec::new();
    for &thresh in &AP_IOU_THRESHOLDS {
        let (ap, points) = compute_ap(dets, gts, thresh);
        if thresh == 0.5 {
            pr = points;
        }
        ap_by_iou.push((thresh, ap));
    }
    let fp_table = fp_at_recall(dets, gts, &RECALL_LEVELS);
    let split = error_decompose(&false_positives(dets, gts), gts);
    EvalReport { pr, ap_by_iou, fp_at_recall: fp_table, error_split: split, pos_neg_ratio }
}

impl EvalReport {
    pub fn ap_at(&self, thresh: f64) -> f64 {
        self.ap_by_iou
            .iter()
            .find(|(t, _)| (*t - thresh).abs() < 1e-9)
            .map(|(_, ap)| *ap)
            .unwrap_or(0.0)
    }

    /// One-line AP summary for terminals and logs.
    pub fn summary_line(&self) -> String {
        let mut s = String::new();
        for (t, ap) in &self.ap_by_iou {
            let _ = write!(s, "ap@{t:.2}={ap:.4} ");
        }
        s.trim_end().to_string()
    }

    /// Structured text serialization, deterministic byte-for-byte.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str("# detection evaluation report\n");
        s.push_str("# ap integration: exact area under the precision envelope (all-point interpolation)\n");
        for (t, ap) in &self.ap_by_iou {
            let _ = writeln!(s, "ap@{t:.2} = {ap:.6}");
        }
        for (level, fps) in &self.fp_at_recall {
            match fps {
                Some(n) => {
                    let _ = writeln!(s, "fp_at_recall@{:.0}% = {n}", level * 100.0);
                }
                None => {
                    let _ = writeln!(s, "fp_at_recall@{:.0}% = unattained", level * 100.0);
                }
            }
        }
        let _ = writeln!(s, "loc_errors = {}", self.error_split.loc);
        let _ = writeln!(s, "cls_errors = {}", self.error_split.cls);
        if self.pos_neg_ratio.is_finite() {
            let _ = writeln!(s, "pos_neg_ratio = {:.6}", self.pos_neg_ratio);
        } else {
            let _ = writeln!(s, "pos_neg_ratio = inf");
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path.display().to_string(), e))
    }

    /// Two-column `recall precision` text for plotting.
    pub fn write_pr_curve(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        for (r, p) in &self.pr {
            let _ = writeln!(s, "{r:.6} {p:.6}");
        }
        std::fs::write(path, s).map_err(|e| Error::io(path.display().to_string(), e))
    }
}
