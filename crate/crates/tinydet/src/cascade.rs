//! Sample matching and the selective two-step logic.
//!
//! Step 1 runs on the bottom-up features: coarse anchor regression on the
//! high `str_levels`, early negative filtering on the low `stc_levels`.
//! Step 2 always runs, classifying and regressing the (possibly refined)
//! anchors that survive the filter. Matching happens twice: against the
//! original anchors with the step-1 thresholds, and against the refined
//! anchors with the step-2 thresholds.

use crate::autodiff::{stable_sigmoid, Real, Tensor};
use crate::boxgeom::{decode, encode, iou, nms, AnchorSet, BBox, Detection};
use crate::losses::{focal_loss_sum, smooth_l1_sum, LossReport, DEFAULT_BALANCE, DEFAULT_GAMMA};
use crate::netarch::{sample_fsm_proposals, Detector, LevelPreds, Proposal, Pyramid};

/// Inference constants: minimum score, pre-NMS candidate cap, NMS
/// overlap, and the final per-image detection cap.
pub const INFER_SCORE_THRESH: f64 = 0.05;
pub const INFER_PRE_NMS_TOP_K: usize = 5000;
pub const INFER_NMS_OVERLAP: f64 = 0.4;
pub const INFER_MAX_DETECTIONS: usize = 750;

/// Which levels run which first step, plus thresholds.
#[derive(Clone, Debug, PartialEq)]
pub struct CascadeConfig {
    pub str_levels: Vec<usize>,
    pub stc_levels: Vec<usize>,
    /// An anchor survives the filter iff its step-1 negative confidence
    /// stays at or below this.
    pub stc_threshold: f64,
    /// (negative, positive) IoU thresholds of the first-step matching.
    pub step1_thresholds: (f64, f64),
    /// (negative, positive) IoU thresholds of the second-step matching.
    pub step2_thresholds: (f64, f64),
    /// Margin scale of the scale-aware margin loss; 0 disables it.
    pub sml_alpha: f64,
    /// Cap on supervision proposals per image.
    pub fsm_max_proposals: usize,
    /// Detections entering supervision sampling, by descending score.
    pub fsm_pre_nms_top_k: usize,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        CascadeConfig {
            // Low levels filter negatives, high levels refine anchors.
            stc_levels: vec![0, 1],
            str_levels: vec![1, 2],
            stc_threshold: 0.99,
            step1_thresholds: (0.3, 0.7),
            step2_thresholds: (0.4, 0.5),
            sml_alpha: 15.0,
            fsm_max_proposals: crate::netarch::FSM_MAX_PROPOSALS,
            fsm_pre_nms_top_k: 32,
        }
    }
}

impl CascadeConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.stc_threshold > 0.0 && self.stc_threshold < 1.0) {
            return Err(format!("stc_threshold {} must lie in (0,1)", self.stc_threshold));
        }
        for (name, (neg, pos)) in
            [("step1", self.step1_thresholds), ("step2", self.step2_thresholds)]
        {
            if neg > pos {
                return Err(format!("{name} thresholds ({neg}, {pos}) must satisfy neg <= pos"));
            }
        }
        Ok(())
    }

    /// The one-step baseline: no selective levels at all.
    pub fn baseline() -> Self {
        CascadeConfig { str_levels: Vec::new(), stc_levels: Vec::new(), ..Default::default() }
    }
}

/// Per-anchor outcome of matching.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorLabel {
    /// Matched to the ground truth with this index.
    Positive(usize),
    Negative,
    /// IoU between the thresholds: discarded during training.
    Ignored,
}

/// Labels for one flattened anchor list.
#[derive(Clone, Debug)]
pub struct MatchAssignment {
    pub labels: Vec<AnchorLabel>,
}

impl MatchAssignment {
    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|l| matches!(l, AnchorLabel::Positive(_))).count()
    }

    pub fn negatives(&self) -> usize {
        self.labels.iter().filter(|l| matches!(l, AnchorLabel::Negative)).count()
    }

    pub fn ignored(&self) -> usize {
        self.labels.iter().filter(|l| matches!(l, AnchorLabel::Ignored)).count()
    }
}

/// IoU matching with the usual two-threshold banding, plus a forced
/// claim: every ground truth takes its single highest-IoU anchor as
/// positive even when that IoU sits below the positive threshold, so no
/// target goes unmatched.
pub fn match_anchors(
    anchors: &[BBox],
    gts: &[BBox],
    neg_thresh: f64,
    pos_thresh: f64,
) -> MatchAssignment {
    let mut labels = vec![AnchorLabel::Negative; anchors.len()];
    if gts.is_empty() {
        return MatchAssignment { labels };
    }
    let mut best_iou = vec![0.0f64; anchors.len()];
    let mut best_gt = vec![0usize; anchors.len()];
    let mut gt_best: Vec<(usize, f64)> = vec![(0, -1.0); gts.len()];
    for (ai, anchor) in anchors.iter().enumerate() {
        for (gi, gt) in gts.iter().enumerate() {
            let v = iou(anchor, gt);
            if v > best_iou[ai] {
                best_iou[ai] = v;
                best_gt[ai] = gi;
            }
            if v > gt_best[gi].1 {
                gt_best[gi] = (ai, v);
            }
        }
    }
    for (ai, label) in labels.iter_mut().enumerate() {
        *label = if best_iou[ai] >= pos_thresh {
            AnchorLabel::Positive(best_gt[ai])
        } else if best_iou[ai] < neg_thresh {
            AnchorLabel::Negative
        } else {
            AnchorLabel::Ignored
        };
    }
    // Forced claims; the better-overlapping gt wins a contested anchor.
    let mut claimed: Vec<Option<(usize, f64)>> = vec![None; anchors.len()];
    for (gi, &(ai, v)) in gt_best.iter().enumerate() {
        if v <= 0.0 {
            continue;
        }
        match claimed[ai] {
            Some((_, prev)) if prev >= v => {}
            _ => claimed[ai] = Some((gi, v)),
        }
    }
    for (ai, claim) in claimed.iter().enumerate() {
        if let Some((gi, _)) = claim {
            labels[ai] = AnchorLabel::Positive(*gi);
        }
    }
    MatchAssignment { labels }
}

/// Keep mask of the early-rejection filter: an anchor survives iff its
/// step-1 negative confidence is at most `threshold`.
pub fn stc_filter(neg_probs: &[f64], threshold: f64) -> Vec<bool> {
    neg_probs.iter().map(|&p| p <= threshold).collect()
}

/// Apply first-step deltas to the anchors of the selected levels;
/// all other levels pass through unchanged.
pub fn str_refine(
    sets: &[AnchorSet],
    deltas_per_level: &[Option<Vec<[f64; 4]>>],
    str_levels: &[usize],
) -> Vec<AnchorSet> {
    assert_eq!(sets.len(), deltas_per_level.len());
    sets.iter()
        .zip(deltas_per_level)
        .map(|(set, deltas)| {
            let deltas = match deltas {
                Some(d) if str_levels.contains(&set.level) => d,
                _ => return set.clone(),
            };
            assert_eq!(deltas.len(), set.len(), "one delta 4-vector per anchor");
            let boxes =
                set.boxes.iter().zip(deltas).map(|(anchor, d)| decode(d, anchor)).collect();
            AnchorSet { boxes, ..set.clone() }
        })
        .collect()
}

// ---- loss terms ----------------------------------------------------------

/// Gathered regression predictions with their encoded targets.
pub struct RegTerms<S: Real> {
    pub preds: Vec<Tensor<S>>,
    pub targets: Vec<S>,
    pub positives: usize,
}

impl<S: Real> RegTerms<S> {
    pub fn empty() -> Self {
        RegTerms { preds: Vec::new(), targets: Vec::new(), positives: 0 }
    }

    pub fn merge(mut parts: Vec<RegTerms<S>>) -> RegTerms<S> {
        let mut out = RegTerms::empty();
        for p in parts.drain(..) {
            out.preds.extend(p.preds);
            out.targets.extend(p.targets);
            out.positives += p.positives;
        }
        out
    }
}

/// Gathered classification logits with labels and margins.
pub struct ClsTerms<S: Real> {
    pub logits: Vec<Tensor<S>>,
    pub labels: Vec<bool>,
    pub margins: Vec<S>,
    pub positives: usize,
}

impl<S: Real> ClsTerms<S> {
    pub fn empty() -> Self {
        ClsTerms { logits: Vec::new(), labels: Vec::new(), margins: Vec::new(), positives: 0 }
    }

    pub fn merge(mut parts: Vec<ClsTerms<S>>) -> ClsTerms<S> {
        let mut out = ClsTerms::empty();
        for p in parts.drain(..) {
            out.logits.extend(p.logits);
            out.labels.extend(p.labels);
            out.margins.extend(p.margins);
            out.positives += p.positives;
        }
        out
    }
}

fn cat_or_empty<S: Real>(parts: &[Tensor<S>]) -> Option<Tensor<S>> {
    let non_empty: Vec<Tensor<S>> = parts.iter().filter(|t| t.numel() > 0).cloned().collect();
    if non_empty.is_empty() {
        None
    } else {
        Some(crate::autodiff::concat(&non_empty, 0))
    }
}

fn clamp1(n: usize) -> f64 {
    (n.max(1)) as f64
}

fn reg_sum<S: Real>(terms: &RegTerms<S>) -> Option<Tensor<S>> {
    cat_or_empty(&terms.preds).map(|preds| smooth_l1_sum(&preds, &terms.targets))
}

fn cls_sum<S: Real>(terms: &ClsTerms<S>) -> Option<Tensor<S>> {
    cat_or_empty(&terms.logits).map(|logits| {
        focal_loss_sum(
            &logits,
            &terms.labels,
            &terms.margins,
            S::from_f64(DEFAULT_GAMMA),
            Some(S::from_f64(DEFAULT_BALANCE)),
        )
    })
}

fn scaled_or_zero<S: Real>(term: Option<Tensor<S>>, normalizer: f64) -> Tensor<S> {
    match term {
        Some(t) => t.mul_scalar(S::from_f64(1.0 / normalizer)),
        None => Tensor::scalar(S::ZERO),
    }
}

/// Two smooth-L1 sums over positives, each normalized by its own clamped
/// positive count: the coarse first-step term and the final term.
/// Zero when there are no positives at all.
pub fn str_loss<S: Real>(step1: &RegTerms<S>, step2: &RegTerms<S>) -> Tensor<S> {
    let a = scaled_or_zero(reg_sum(step1), clamp1(step1.positives));
    let b = scaled_or_zero(reg_sum(step2), clamp1(step2.positives));
    a.add(&b)
}

/// Two focal sums: the first-step term over the selected levels' anchors
/// and the second-step term over the filter survivors (these carry the
/// margins when the scale-aware margin is on).
pub fn stc_loss<S: Real>(step1: &ClsTerms<S>, step2: &ClsTerms<S>) -> Tensor<S> {
    let a = scaled_or_zero(cls_sum(step1), clamp1(step1.positives));
    let b = scaled_or_zero(cls_sum(step2), clamp1(step2.positives));
    a.add(&b)
}

/// Focal sum over supervision proposals, normalized by clamped positives.
pub fn fsm_loss<S: Real>(terms: &ClsTerms<S>) -> Tensor<S> {
    scaled_or_zero(cls_sum(terms), clamp1(terms.positives))
}

// ---- per-image assembly ---------------------------------------------------

/// Flat view of the per-level anchor sets.
pub struct FlatAnchors {
    pub boxes: Vec<BBox>,
    pub level_of: Vec<usize>,
    /// Start offset of each level in the flat list.
    pub offsets: Vec<usize>,
}

pub fn flatten_anchors(sets: &[AnchorSet]) -> FlatAnchors {
    let mut boxes = Vec::new();
    let mut level_of = Vec::new();
    let mut offsets = Vec::with_capacity(sets.len());
    for set in sets {
        offsets.push(boxes.len());
        boxes.extend(set.boxes.iter().copied());
        level_of.extend(std::iter::repeat(set.level).take(set.len()));
    }
    FlatAnchors { boxes, level_of, offsets }
}

/// Flat index of anchor `k` of a level in its `[A, H, W]` logit tensor.
fn cls_index(set: &AnchorSet, k: usize) -> usize {
    let (y, x, a) = set.cell_of(k);
    a * set.grid_h * set.grid_w + y * set.grid_w + x
}

/// Flat indices of anchor `k`'s four deltas in its `[4A, H, W]` tensor.
fn reg_indices(set: &AnchorSet, k: usize) -> [usize; 4] {
    let (y, x, a) = set.cell_of(k);
    let plane = set.grid_h * set.grid_w;
    let base = y * set.grid_w + x;
    [
        (4 * a) * plane + base,
        (4 * a + 1) * plane + base,
        (4 * a + 2) * plane + base,
        (4 * a + 3) * plane + base,
    ]
}

/// Read a level's regression tensor back as per-anchor delta 4-vectors.
fn reg_values<S: Real>(tensor: &Tensor<S>, set: &AnchorSet) -> Vec<[f64; 4]> {
    let data = tensor.data();
    (0..set.len())
        .map(|k| {
            let idx = reg_indices(set, k);
            [
                data[idx[0]].to_f64(),
                data[idx[1]].to_f64(),
                data[idx[2]].to_f64(),
                data[idx[3]].to_f64(),
            ]
        })
        .collect()
}

/// Per-anchor face probability of a level's `[A, H, W]` logits.
fn face_probs<S: Real>(tensor: &Tensor<S>, set: &AnchorSet) -> Vec<f64> {
    let data = tensor.data();
    (0..set.len()).map(|k| stable_sigmoid(data[cls_index(set, k)].to_f64())).collect()
}

/// Class-imbalance bookkeeping of one image.
#[derive(Clone, Debug, Default)]
pub struct ImageStats {
    pub pos_before: usize,
    pub neg_before: usize,
    pub pos_after: usize,
    pub neg_after: usize,
    /// Mean over gts of the best anchor IoU on the refinement levels,
    /// before and after refinement. None when not applicable.
    pub mean_iou_unrefined: Option<f64>,
    pub mean_iou_refined: Option<f64>,
}

/// Everything one image contributes to the batch losses.
pub struct ImageTerms<S: Real> {
    pub str_step1: RegTerms<S>,
    pub str_step2: RegTerms<S>,
    pub stc_step1: ClsTerms<S>,
    pub stc_step2: ClsTerms<S>,
    pub fsm: ClsTerms<S>,
    pub stats: ImageStats,
}

/// The non-differentiable decisions of one training image, computed from
/// the current prediction values and then held fixed: matching outcomes,
/// filter survivors, refined-anchor regression targets, margins and
/// supervision proposals. Gradients flow through the prediction tensors
/// gathered against this state, never through the state itself.
pub struct FrozenImageState<S: Real> {
    /// (level, flat tensor indices, encoded targets) per refinement level.
    pub str1: Vec<(usize, Vec<usize>, Vec<S>)>,
    pub n_s1: usize,
    /// (level, flat tensor indices, labels) per filtering level.
    pub stc1: Vec<(usize, Vec<usize>, Vec<bool>)>,
    pub n_s3: usize,
    /// (level, flat tensor indices, encoded targets) of the final step.
    pub str2: Vec<(usize, Vec<usize>, Vec<S>)>,
    pub n_s2: usize,
    /// (level, flat tensor indices, labels, margins) of the final step.
    pub stc2: Vec<(usize, Vec<usize>, Vec<bool>, Vec<S>)>,
    pub n_s4: usize,
    pub proposals: Vec<Proposal>,
    pub fsm_positives: usize,
    pub stats: ImageStats,
}

/// Match, filter and refine: everything about one image that is decided
/// by values rather than differentiated. The margin scale comes from the
/// config (0 disables); `fsm_on` gates the supervision proposals.
pub fn freeze_image_state<S: Real>(
    model: &Detector<S>,
    preds: &[LevelPreds<S>],
    anchor_sets: &[AnchorSet],
    gts: &[BBox],
    config: &CascadeConfig,
    fsm_on: bool,
) -> FrozenImageState<S> {
    let flat = flatten_anchors(anchor_sets);
    let (neg1, pos1) = config.step1_thresholds;
    let assign1 = match_anchors(&flat.boxes, gts, neg1, pos1);

    // Step-1 regression targets on the refinement levels.
    let mut str1 = Vec::new();
    let mut n_s1 = 0usize;
    for (li, set) in anchor_sets.iter().enumerate() {
        if preds[li].step1_reg.is_none() {
            continue;
        }
        let mut idxs = Vec::new();
        let mut targets = Vec::new();
        let mut count = 0usize;
        for k in 0..set.len() {
            if let AnchorLabel::Positive(gi) = assign1.labels[flat.offsets[li] + k] {
                let delta = encode(&gts[gi], &set.boxes[k]);
                idxs.extend(reg_indices(set, k));
                targets.extend(delta.iter().map(|&d| S::from_f64(d)));
                count += 1;
            }
        }
        if count > 0 {
            str1.push((li, idxs, targets));
            n_s1 += count;
        }
    }

    // Step-1 classification labels on the filtering levels (ignored out).
    let mut stc1 = Vec::new();
    let mut n_s3 = 0usize;
    for (li, set) in anchor_sets.iter().enumerate() {
        if preds[li].step1_cls.is_none() {
            continue;
        }
        let mut idxs = Vec::new();
        let mut labels = Vec::new();
        for k in 0..set.len() {
            match assign1.labels[flat.offsets[li] + k] {
                AnchorLabel::Positive(_) => {
                    idxs.push(cls_index(set, k));
                    labels.push(true);
                    n_s3 += 1;
                }
                AnchorLabel::Negative => {
                    idxs.push(cls_index(set, k));
                    labels.push(false);
                }
                AnchorLabel::Ignored => {}
            }
        }
        if !idxs.is_empty() {
            stc1.push((li, idxs, labels));
        }
    }

    // Filter mask from the step-1 negative confidences.
    let mut keep = vec![true; flat.boxes.len()];
    for (li, set) in anchor_sets.iter().enumerate() {
        if !config.stc_levels.contains(&set.level) {
            continue;
        }
        let Some(cls1) = &preds[li].step1_cls else { continue };
        let neg_probs: Vec<f64> = face_probs(cls1, set).iter().map(|p| 1.0 - p).collect();
        for (k, ok) in stc_filter(&neg_probs, config.stc_threshold).into_iter().enumerate() {
            keep[flat.offsets[li] + k] = ok;
        }
    }

    // Refined anchors from the step-1 deltas.
    let deltas: Vec<Option<Vec<[f64; 4]>>> = anchor_sets
        .iter()
        .enumerate()
        .map(|(li, set)| preds[li].step1_reg.as_ref().map(|t| reg_values(t, set)))
        .collect();
    let refined_sets = str_refine(anchor_sets, &deltas, &config.str_levels);
    let refined = flatten_anchors(&refined_sets);

    // Imbalance bookkeeping against the step-1 labels.
    let mut stats = ImageStats::default();
    for (label, &kept) in assign1.labels.iter().zip(&keep) {
        match label {
            AnchorLabel::Positive(_) => {
                stats.pos_before += 1;
                if kept {
                    stats.pos_after += 1;
                }
            }
            AnchorLabel::Negative => {
                stats.neg_before += 1;
                if kept {
                    stats.neg_after += 1;
                }
            }
            AnchorLabel::Ignored => {}
        }
    }
    if !gts.is_empty() && !config.str_levels.is_empty() {
        let mean_best = |boxes: &FlatAnchors| -> f64 {
            let mut total = 0.0;
            for gt in gts {
                let mut best = 0.0f64;
                for (ai, b) in boxes.boxes.iter().enumerate() {
                    if config.str_levels.contains(&boxes.level_of[ai]) {
                        best = best.max(iou(b, gt));
                    }
                }
                total += best;
            }
            total / gts.len() as f64
        };
        stats.mean_iou_unrefined = Some(mean_best(&flat));
        stats.mean_iou_refined = Some(mean_best(&refined));
    }

    // Step-2 matching: survivors only, against the refined anchors.
    let kept_idx: Vec<usize> = (0..refined.boxes.len()).filter(|&i| keep[i]).collect();
    let kept_boxes: Vec<BBox> = kept_idx.iter().map(|&i| refined.boxes[i]).collect();
    let (neg2, pos2) = config.step2_thresholds;
    let assign2 = match_anchors(&kept_boxes, gts, neg2, pos2);

    let sml_on = config.sml_alpha > 0.0;
    let mut per_level_reg: Vec<(Vec<usize>, Vec<S>, usize)> =
        (0..anchor_sets.len()).map(|_| (Vec::new(), Vec::new(), 0)).collect();
    let mut per_level_cls: Vec<(Vec<usize>, Vec<bool>, Vec<S>, usize)> =
        (0..anchor_sets.len()).map(|_| (Vec::new(), Vec::new(), Vec::new(), 0)).collect();
    for (kept_pos, &global) in kept_idx.iter().enumerate() {
        let li = flat.level_of[global];
        let set = &anchor_sets[li];
        let k = global - flat.offsets[li];
        let refined_anchor = &refined_sets[li].boxes[k];
        match assign2.labels[kept_pos] {
            AnchorLabel::Positive(gi) => {
                let delta = encode(&gts[gi], refined_anchor);
                let (idxs, targets, count) = &mut per_level_reg[li];
                idxs.extend(reg_indices(set, k));
                targets.extend(delta.iter().map(|&d| S::from_f64(d)));
                *count += 1;
                let (cidx, clab, cmar, cpos) = &mut per_level_cls[li];
                cidx.push(cls_index(set, k));
                clab.push(true);
                *cpos += 1;
                cmar.push(if sml_on {
                    S::from_f64(config.sml_alpha / (gts[gi].width() * gts[gi].height()).sqrt())
                } else {
                    S::ZERO
                });
            }
            AnchorLabel::Negative => {
                let (cidx, clab, cmar, _) = &mut per_level_cls[li];
                cidx.push(cls_index(set, k));
                clab.push(false);
                // Negatives take the margin of their preset anchor: its
                // size is bounded by the tiling, unlike a refined box.
                let anchor = &set.boxes[k];
                cmar.push(if sml_on {
                    S::from_f64(config.sml_alpha / anchor.area().sqrt())
                } else {
                    S::ZERO
                });
            }
            AnchorLabel::Ignored => {}
        }
    }
    let mut str2 = Vec::new();
    let mut n_s2 = 0usize;
    for (li, (idxs, targets, count)) in per_level_reg.into_iter().enumerate() {
        if count > 0 {
            str2.push((li, idxs, targets));
            n_s2 += count;
        }
    }
    let mut stc2 = Vec::new();
    let mut n_s4 = 0usize;
    for (li, (idxs, labels, margins, pos)) in per_level_cls.into_iter().enumerate() {
        if !idxs.is_empty() {
            n_s4 += pos;
            stc2.push((li, idxs, labels, margins));
        }
    }

    // Supervision proposals from the refined detections.
    let mut proposals = Vec::new();
    let mut fsm_positives = 0usize;
    if fsm_on && model.has_fsm() {
        let mut dets: Vec<Detection> = Vec::new();
        for (li, set) in anchor_sets.iter().enumerate() {
            let probs = face_probs(&preds[li].step2_cls, set);
            let deltas2 = reg_values(&preds[li].step2_reg, set);
            for k in 0..set.len() {
                if !keep[flat.offsets[li] + k] {
                    continue;
                }
                dets.push(Detection {
                    bbox: decode(&deltas2[k], &refined_sets[li].boxes[k]),
                    score: probs[k],
                    level: set.level,
                });
            }
        }
        let mut order: Vec<usize> = (0..dets.len()).collect();
        order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));
        order.truncate(config.fsm_pre_nms_top_k);
        let top: Vec<Detection> = order.into_iter().map(|i| dets[i]).collect();
        proposals =
            sample_fsm_proposals(&top, gts, &model.config.strides, config.fsm_max_proposals)
                .into_iter()
                .filter(|p| p.bbox.area() > 0.0)
                .collect();
        fsm_positives = proposals.iter().filter(|p| p.label).count();
    }

    FrozenImageState {
        str1,
        n_s1,
        stc1,
        n_s3,
        str2,
        n_s2,
        stc2,
        n_s4,
        proposals,
        fsm_positives,
        stats,
    }
}

/// The differentiable half: gather the current predictions against a
/// frozen state. Re-running this on a fresh forward pass with the same
/// state yields a loss that is smooth in the parameters, which is what
/// the optimizer steps on and what the finite-difference oracle probes.
pub fn image_terms_from_state<S: Real>(
    model: &Detector<S>,
    pyramid: &Pyramid<S>,
    preds: &[LevelPreds<S>],
    state: &FrozenImageState<S>,
) -> ImageTerms<S> {
    let mut str_step1 = RegTerms::empty();
    str_step1.positives = state.n_s1;
    for (li, idxs, targets) in &state.str1 {
        let reg1 = preds[*li].step1_reg.as_ref().expect("frozen state matches head layout");
        str_step1.preds.push(reg1.gather(idxs));
        str_step1.targets.extend(targets.iter().copied());
    }

    let mut stc_step1 = ClsTerms::empty();
    stc_step1.positives = state.n_s3;
    for (li, idxs, labels) in &state.stc1 {
        let cls1 = preds[*li].step1_cls.as_ref().expect("frozen state matches head layout");
        stc_step1.margins.extend(std::iter::repeat(S::ZERO).take(idxs.len()));
        stc_step1.logits.push(cls1.gather(idxs));
        stc_step1.labels.extend(labels.iter().copied());
    }

    let mut str_step2 = RegTerms::empty();
    str_step2.positives = state.n_s2;
    for (li, idxs, targets) in &state.str2 {
        str_step2.preds.push(preds[*li].step2_reg.gather(idxs));
        str_step2.targets.extend(targets.iter().copied());
    }

    let mut stc_step2 = ClsTerms::empty();
    stc_step2.positives = state.n_s4;
    for (li, idxs, labels, margins) in &state.stc2 {
        stc_step2.logits.push(preds[*li].step2_cls.gather(idxs));
        stc_step2.labels.extend(labels.iter().copied());
        stc_step2.margins.extend(margins.iter().copied());
    }

    let mut fsm = ClsTerms::empty();
    if !state.proposals.is_empty() {
        let logits = model.fsm_forward(pyramid, &state.proposals);
        fsm.labels = state.proposals.iter().map(|p| p.label).collect();
        fsm.positives = state.fsm_positives;
        fsm.margins = vec![S::ZERO; state.proposals.len()];
        fsm.logits.push(logits);
    }

    ImageTerms {
        str_step1,
        str_step2,
        stc_step1,
        stc_step2,
        fsm,
        stats: state.stats.clone(),
    }
}

/// Match, filter, refine and gather: the full training-side cascade for
/// one image, state freezing and differentiable assembly in one call.
pub fn build_image_terms<S: Real>(
    model: &Detector<S>,
    pyramid: &Pyramid<S>,
    preds: &[LevelPreds<S>],
    anchor_sets: &[AnchorSet],
    gts: &[BBox],
    config: &CascadeConfig,
    fsm_on: bool,
) -> ImageTerms<S> {
    let state = freeze_image_state(model, preds, anchor_sets, gts, config, fsm_on);
    image_terms_from_state(model, pyramid, preds, &state)
}

/// The imbalance bookkeeping of [`build_image_terms`] without any graph
/// work: step-1 matching plus the filter mask, counted.
pub fn observe_image_stats<S: Real>(
    preds: &[LevelPreds<S>],
    anchor_sets: &[AnchorSet],
    gts: &[BBox],
    config: &CascadeConfig,
) -> ImageStats {
    let flat = flatten_anchors(anchor_sets);
    let (neg1, pos1) = config.step1_thresholds;
    let assign1 = match_anchors(&flat.boxes, gts, neg1, pos1);
    let mut keep = vec![true; flat.boxes.len()];
    for (li, set) in anchor_sets.iter().enumerate() {
        if !config.stc_levels.contains(&set.level) {
            continue;
        }
        let Some(cls1) = &preds[li].step1_cls else { continue };
        let neg_probs: Vec<f64> = face_probs(cls1, set).iter().map(|p| 1.0 - p).collect();
        for (k, ok) in stc_filter(&neg_probs, config.stc_threshold).into_iter().enumerate() {
            keep[flat.offsets[li] + k] = ok;
        }
    }
    let mut stats = ImageStats::default();
    for (label, &kept) in assign1.labels.iter().zip(&keep) {
        match label {
            AnchorLabel::Positive(_) => {
                stats.pos_before += 1;
                if kept {
                    stats.pos_after += 1;
                }
            }
            AnchorLabel::Negative => {
                stats.neg_before += 1;
                if kept {
                    stats.neg_after += 1;
                }
            }
            AnchorLabel::Ignored => {}
        }
    }
    stats
}

/// Merge per-image terms and evaluate the three losses plus their sum.
/// The report reads the same graph values it normalizes with.
pub fn assemble_batch<S: Real>(images: Vec<ImageTerms<S>>) -> (Tensor<S>, LossReport) {
    let mut str1 = Vec::new();
    let mut str2 = Vec::new();
    let mut stc1 = Vec::new();
    let mut stc2 = Vec::new();
    let mut fsm_terms = Vec::new();
    for terms in images {
        str1.push(terms.str_step1);
        str2.push(terms.str_step2);
        stc1.push(terms.stc_step1);
        stc2.push(terms.stc_step2);
        fsm_terms.push(terms.fsm);
    }
    let str1 = RegTerms::merge(str1);
    let str2 = RegTerms::merge(str2);
    let stc1 = ClsTerms::merge(stc1);
    let stc2 = ClsTerms::merge(stc2);
    let fsm_terms = ClsTerms::merge(fsm_terms);

    let str_total = str_loss(&str1, &str2);
    let stc_total = stc_loss(&stc1, &stc2);
    let fsm_total = fsm_loss(&fsm_terms);
    let total = str_total.add(&stc_total).add(&fsm_total);

    let (str_v, stc_v, fsm_v) =
        (str_total.item().to_f64(), stc_total.item().to_f64(), fsm_total.item().to_f64());
    let report = LossReport {
        str_loss: str_v,
        stc_loss: stc_v,
        fsm_loss: fsm_v,
        total: str_v + stc_v + fsm_v,
        n_s1: str1.positives,
        n_s2: str2.positives,
        n_s3: stc1.positives,
        n_s4: stc2.positives,
    };
    (total, report)
}

// ---- inference -------------------------------------------------------------

/// Post-process one image's head outputs into final detections:
/// filter by step-1 negative confidence, refine anchors, decode, keep
/// scores above 0.05, cap at 5000, NMS at 0.4, keep the top 750.
pub fn detect_from_preds<S: Real>(
    preds: &[LevelPreds<S>],
    anchor_sets: &[AnchorSet],
    config: &CascadeConfig,
    image_extent: (usize, usize),
) -> Vec<Detection> {
    let candidates = collect_candidates(preds, anchor_sets, config, image_extent);
    let top = top_candidates(candidates);
    let kept = nms(&top, INFER_NMS_OVERLAP);
    finalize_detections(kept)
}

/// Inference stages 1-3: filter, refine, decode, threshold at 0.05.
pub fn collect_candidates<S: Real>(
    preds: &[LevelPreds<S>],
    anchor_sets: &[AnchorSet],
    config: &CascadeConfig,
    image_extent: (usize, usize),
) -> Vec<Detection> {
    let (ih, iw) = image_extent;
    let deltas1: Vec<Option<Vec<[f64; 4]>>> = anchor_sets
        .iter()
        .enumerate()
        .map(|(li, set)| preds[li].step1_reg.as_ref().map(|t| reg_values(t, set)))
        .collect();
    let refined_sets = str_refine(anchor_sets, &deltas1, &config.str_levels);

    let mut out = Vec::new();
    for (li, set) in anchor_sets.iter().enumerate() {
        let keep: Vec<bool> = if config.stc_levels.contains(&set.level) {
            match &preds[li].step1_cls {
                Some(cls1) => {
                    let neg: Vec<f64> = face_probs(cls1, set).iter().map(|p| 1.0 - p).collect();
                    stc_filter(&neg, config.stc_threshold)
                }
                None => vec![true; set.len()],
            }
        } else {
            vec![true; set.len()]
        };
        let probs = face_probs(&preds[li].step2_cls, set);
        let deltas = reg_values(&preds[li].step2_reg, set);
        for k in 0..set.len() {
            if !keep[k] || probs[k] < INFER_SCORE_THRESH {
                continue;
            }
            let bbox =
                decode(&deltas[k], &refined_sets[li].boxes[k]).clamp_to(iw as f64, ih as f64);
            if bbox.area() <= 0.0 {
                continue;
            }
            out.push(Detection { bbox, score: probs[k], level: set.level });
        }
    }
    out
}

/// Inference stage 4: keep the best-scored candidates, ties resolved by
/// input order.
pub fn top_candidates(candidates: Vec<Detection>) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        candidates[b].score.partial_cmp(&candidates[a].score).unwrap().then(a.cmp(&b))
    });
    order.truncate(INFER_PRE_NMS_TOP_K);
    order.into_iter().map(|i| candidates[i]).collect()
}

/// Inference stage 5: final cap after suppression.
pub fn finalize_detections(mut kept: Vec<Detection>) -> Vec<Detection> {
    kept.truncate(INFER_MAX_DETECTIONS);
    kept
}

/// Run the whole pipeline over a batch of images.
pub fn inference_pipeline<S: Real>(
    model: &Detector<S>,
    config: &CascadeConfig,
    images: &[Tensor<S>],
) -> Vec<Vec<Detection>> {
    images.iter().map(|image| detect_image(model, config, image)).collect()
}

pub fn detect_image<S: Real>(
    model: &Detector<S>,
    config: &CascadeConfig,
    image: &Tensor<S>,
) -> Vec<Detection> {
    let sh = image.shape();
    let (h, w) = (sh[1], sh[2]);
    let pyramid = model.features(image);
    let preds = model.heads(&pyramid, &config.stc_levels, &config.str_levels);
    let anchors = model.anchors_for(h, w);
    detect_from_preds(&preds, &anchors, config, (h, w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxgeom::tile_anchors;
    use crate::losses::{sigmoid_focal_loss, smooth_l1};
    use crate::netarch::ModelConfig;
    use crate::rng::Rng;

    #[test]
    fn config_validation() {
        assert!(CascadeConfig::default().validate().is_ok());
        let bad = CascadeConfig { stc_threshold: 1.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = CascadeConfig { step1_thresholds: (0.8, 0.3), ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn no_gts_makes_everything_negative() {
        let set = tile_anchors(4, 4, 0, 8, 1.25);
        let assign = match_anchors(&set.boxes, &[], 0.3, 0.7);
        assert_eq!(assign.negatives(), set.len());
        assert_eq!(assign.positives(), 0);
    }

    #[test]
    fn exact_anchor_match_is_positive() {
        let set = tile_anchors(4, 4, 0, 8, 1.25);
        let gt = set.boxes[9];
        let assign = match_anchors(&set.boxes, &[gt], 0.3, 0.7);
        assert_eq!(assign.labels[9], AnchorLabel::Positive(0));
    }

    #[test]
    fn matching_agrees_with_exhaustive_oracle() {
        // 8x8 grid, one gt: recompute every band by brute force.
        let set = tile_anchors(8, 8, 0, 8, 1.25);
        let gt = BBox::new(18.0, 12.0, 37.0, 36.0);
        let assign = match_anchors(&set.boxes, &[gt], 0.3, 0.7);
        let ious: Vec<f64> = set.boxes.iter().map(|a| iou(a, &gt)).collect();
        // First-index argmax, mirroring the deterministic claim rule.
        let mut best = 0;
        for (i, &v) in ious.iter().enumerate() {
            if v > ious[best] {
                best = i;
            }
        }
        for (i, label) in assign.labels.iter().enumerate() {
            let want = if i == best || ious[i] >= 0.7 {
                AnchorLabel::Positive(0)
            } else if ious[i] < 0.3 {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Ignored
            };
            assert_eq!(*label, want, "anchor {i} with IoU {}", ious[i]);
        }
        // Partition property.
        assert_eq!(assign.positives() + assign.negatives() + assign.ignored(), set.len());
    }

    #[test]
    fn forced_claim_rescues_unmatched_gt() {
        let set = tile_anchors(4, 4, 0, 8, 1.25);
        // A gt small enough that no anchor reaches the positive threshold.
        let gt = BBox::new(9.0, 9.0, 14.0, 14.0);
        let assign = match_anchors(&set.boxes, &[gt], 0.3, 0.7);
        assert!(assign.positives() >= 1, "gt must claim its best anchor");
    }

    #[test]
    fn filter_keeps_at_most_confident_negatives() {
        assert_eq!(stc_filter(&[0.999], 0.99), vec![false]);
        assert_eq!(stc_filter(&[0.0], 0.99), vec![true]);
        assert_eq!(stc_filter(&[0.99], 0.99), vec![true], "boundary is inclusive");
        let mut rng = Rng::new(3);
        let probs: Vec<f64> = (0..500).map(|_| rng.uniform()).collect();
        let kept = stc_filter(&probs, 0.99).iter().filter(|&&k| k).count();
        let want = probs.iter().filter(|&&p| p <= 0.99).count();
        assert_eq!(kept, want);
    }

    #[test]
    fn refine_applies_only_on_selected_levels() {
        let sets = vec![tile_anchors(2, 2, 0, 8, 1.25), tile_anchors(1, 1, 1, 16, 1.25)];
        let zero = vec![[0.0; 4]; 8];
        let shift = vec![[0.5, 0.0, 0.0, 0.0]; 2];
        let refined = str_refine(&sets, &[Some(zero), Some(shift)], &[1]);
        // Zero deltas: unchanged boxes.
        for (a, b) in sets[0].boxes.iter().zip(&refined[0].boxes) {
            assert_eq!(a, b);
        }
        // Level 1 shifted by half an anchor width.
        for (a, b) in sets[1].boxes.iter().zip(&refined[1].boxes) {
            assert!((b.cx() - (a.cx() + 0.5 * a.width())).abs() < 1e-9);
        }
        // Level not selected: identity regardless of deltas.
        let untouched = str_refine(&sets, &[None, Some(vec![[9.0; 4]; 2])], &[0]);
        for (a, b) in sets[1].boxes.iter().zip(&untouched[1].boxes) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn refine_matches_decode_per_anchor() {
        let mut rng = Rng::new(4);
        let set = tile_anchors(3, 3, 2, 16, 1.25);
        let deltas: Vec<[f64; 4]> = (0..set.len())
            .map(|_| {
                [
                    rng.range(-0.3, 0.3),
                    rng.range(-0.3, 0.3),
                    rng.range(-0.4, 0.4),
                    rng.range(-0.4, 0.4),
                ]
            })
            .collect();
        let refined = str_refine(&[set.clone()], &[Some(deltas.clone())], &[2]);
        for (k, b) in refined[0].boxes.iter().enumerate() {
            let want = decode(&deltas[k], &set.boxes[k]);
            assert!((b.x1 - want.x1).abs() < 1e-12);
            assert!((b.y2 - want.y2).abs() < 1e-12);
        }
    }

    #[test]
    fn str_loss_zero_without_positives_and_exact_for_one() {
        let empty = RegTerms::<f64>::empty();
        assert_eq!(str_loss(&empty, &empty).item(), 0.0);

        // One positive anchor with hand-set deltas: the loss must equal
        // the plain smooth-L1 values over the clamped counts.
        let pred1 = Tensor::<f64>::param(&[4], vec![0.3, -0.2, 0.1, 0.4]);
        let t1 = vec![0.1, 0.1, 0.1, 0.1];
        let step1 = RegTerms { preds: vec![pred1.clone()], targets: t1.clone(), positives: 1 };
        let pred2 = Tensor::<f64>::param(&[4], vec![2.0, 0.0, 0.0, 0.0]);
        let t2 = vec![0.0, 0.0, 0.0, 0.0];
        let step2 = RegTerms { preds: vec![pred2.clone()], targets: t2.clone(), positives: 1 };
        let got = str_loss(&step1, &step2).item();
        let want = smooth_l1(&pred1.to_vec(), &t1) / 1.0 + smooth_l1(&pred2.to_vec(), &t2) / 1.0;
        assert!((got - want).abs() < 1e-12);

        // Perfect predictions: zero.
        let perfect = RegTerms {
            preds: vec![Tensor::<f64>::from_vec(&[4], t1.clone())],
            targets: t1,
            positives: 1,
        };
        assert_eq!(str_loss(&perfect, &RegTerms::empty()).item(), 0.0);
    }

    #[test]
    fn stc_loss_matches_per_sample_oracle() {
        let mut rng = Rng::new(5);
        let n = 10;
        let logits: Vec<f64> = (0..n).map(|_| rng.range(-3.0, 3.0)).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.flip()).collect();
        let t = Tensor::<f64>::from_vec(&[n], logits.clone());
        let positives = labels.iter().filter(|&&l| l).count();
        let step1 =
            ClsTerms { logits: vec![t], labels: labels.clone(), margins: vec![0.0; n], positives };
        // Everything filtered from step 2: only the step-1 term remains.
        let got = stc_loss(&step1, &ClsTerms::empty()).item();
        let want: f64 = logits
            .iter()
            .zip(&labels)
            .map(|(&x, &l)| sigmoid_focal_loss(x, l, 2.0, Some(0.25)))
            .sum::<f64>()
            / positives.max(1) as f64;
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");

        // Strongly correct logits: loss under 1e-6.
        let easy = ClsTerms {
            logits: vec![Tensor::<f64>::from_vec(&[2], vec![30.0, -30.0])],
            labels: vec![true, false],
            margins: vec![0.0; 2],
            positives: 1,
        };
        assert!(stc_loss(&easy, &ClsTerms::empty()).item() < 1e-6);
    }

    fn tiny_model(fsm: bool) -> (Detector<f32>, CascadeConfig) {
        let cfg = ModelConfig {
            strides: vec![4, 8, 16],
            channels: 8,
            head_depth: 1,
            rfe_enabled: true,
            fsm_enabled: fsm,
            fsm_channels: 8,
            anchor_aspect: 1.25,
        };
        let mut rng = Rng::new(5);
        (Detector::new(&cfg, &mut rng), CascadeConfig::default())
    }

    #[test]
    fn batch_report_total_is_exact_component_sum() {
        let (model, cc) = tiny_model(true);
        let image = {
            let mut rng = Rng::new(8);
            let data: Vec<f32> = (0..3 * 64 * 64).map(|_| rng.uniform() as f32).collect();
            Tensor::<f32>::from_vec(&[3, 64, 64], data)
        };
        let gts = vec![BBox::new(10.0, 12.0, 26.0, 32.0), BBox::new(40.0, 36.0, 58.0, 52.0)];
        let pyramid = model.features(&image);
        let preds = model.heads(&pyramid, &cc.stc_levels, &cc.str_levels);
        let anchors = model.anchors_for(64, 64);
        let terms = build_image_terms(&model, &pyramid, &preds, &anchors, &gts, &cc, true);
        assert!(terms.str_step1.positives > 0, "gts must match anchors on refinement levels");
        let (total, report) = assemble_batch(vec![terms]);
        assert_eq!(report.total, report.str_loss + report.stc_loss + report.fsm_loss);
        assert!(report.total > 0.0);
        // Graph total agrees with the report up to f32 rounding.
        assert!((total.item() as f64 - report.total).abs() < 1e-5 * report.total.max(1.0));

        // Gradients flow to the shared classifier.
        total.backward();
        let grad = model.shared_cls_weight().grad().expect("classifier got no gradient");
        assert!(grad.iter().any(|g| *g != 0.0));
    }

    #[test]
    fn empty_image_has_no_positive_terms() {
        let (model, cc) = tiny_model(false);
        let image = Tensor::<f32>::full(&[3, 32, 32], 0.5);
        let pyramid = model.features(&image);
        let preds = model.heads(&pyramid, &cc.stc_levels, &cc.str_levels);
        let anchors = model.anchors_for(32, 32);
        let terms = build_image_terms(&model, &pyramid, &preds, &anchors, &[], &cc, false);
        assert_eq!(terms.str_step1.positives, 0);
        assert_eq!(terms.str_step2.positives, 0);
        let (_, report) = assemble_batch(vec![terms]);
        assert_eq!(report.str_loss, 0.0, "no regression loss without positives");
        assert!(report.stc_loss > 0.0, "negatives still pay classification loss");
    }

    #[test]
    fn filter_never_drops_confident_positive_and_ratio_improves() {
        // Step-1 labels with confident predictions: filtering must only
        // remove negatives, so the positive/negative ratio cannot drop.
        let mut rng = Rng::new(9);
        let n = 400;
        let labels: Vec<bool> = (0..n).map(|i| i % 40 == 0).collect();
        let neg_probs: Vec<f64> = labels
            .iter()
            .map(|&l| if l { rng.range(0.0, 0.5) } else { rng.range(0.9, 1.0) })
            .collect();
        let keep = stc_filter(&neg_probs, 0.99);
        let (mut pb, mut nb, mut pa, mut na) = (0usize, 0usize, 0usize, 0usize);
        for i in 0..n {
            if labels[i] {
                pb += 1;
                if keep[i] {
                    pa += 1;
                }
            } else {
                nb += 1;
                if keep[i] {
                    na += 1;
                }
            }
        }
        assert_eq!(pa, pb, "no positive with neg confidence <= threshold may vanish");
        assert!(na < nb, "some easy negatives must be dropped");
        let before = pb as f64 / nb as f64;
        let after = pa as f64 / na.max(1) as f64;
        assert!(after >= before);
    }

    #[test]
    fn baseline_config_skips_both_first_steps() {
        let (model, _) = tiny_model(false);
        let cc = CascadeConfig::baseline();
        let image = Tensor::<f32>::full(&[3, 32, 32], 0.25);
        let pyramid = model.features(&image);
        let preds = model.heads(&pyramid, &cc.stc_levels, &cc.str_levels);
        for p in &preds {
            assert!(p.step1_cls.is_none() && p.step1_reg.is_none());
        }
        let anchors = model.anchors_for(32, 32);
        let gts = vec![BBox::new(8.0, 8.0, 24.0, 26.0)];
        let terms = build_image_terms(&model, &pyramid, &preds, &anchors, &gts, &cc, false);
        assert_eq!(terms.str_step1.positives, 0, "no step-1 regression in baseline");
        assert_eq!(terms.stc_step1.labels.len(), 0, "no step-1 classification in baseline");
        assert!(terms.str_step2.positives > 0, "baseline still regresses positives");
    }

    #[test]
    fn inference_empty_image_yields_nothing() {
        let (model, cc) = tiny_model(false);
        // Constant image: with the prior-initialised classifier every
        // score sits near 0.01, far below the 0.05 threshold.
        let image = Tensor::<f32>::full(&[3, 32, 32], 0.5);
        let dets = detect_image(&model, &cc, &image);
        assert!(dets.is_empty());
    }

    #[test]
    fn pipeline_equals_manual_stage_composition() {
        let (model, cc) = tiny_model(false);
        let mut rng = Rng::new(44);
        let data: Vec<f32> = (0..3 * 64 * 64).map(|_| rng.uniform() as f32).collect();
        let image = Tensor::<f32>::from_vec(&[3, 64, 64], data);
        // Manual composition of the five stages.
        let pyramid = model.features(&image);
        let preds = model.heads(&pyramid, &cc.stc_levels, &cc.str_levels);
        let anchors = model.anchors_for(64, 64);
        let manual = finalize_detections(nms(
            &top_candidates(collect_candidates(&preds, &anchors, &cc, (64, 64))),
            INFER_NMS_OVERLAP,
        ));
        let pipeline = detect_image(&model, &cc, &image);
        assert_eq!(manual.len(), pipeline.len());
        for (a, b) in manual.iter().zip(&pipeline) {
            assert_eq!(a.score, b.score);
            assert_eq!(a.bbox, b.bbox);
        }
        // Output sorted by descending score.
        for pair in pipeline.windows(2) {
            assert!(pair[0].score >= pair[1].score);
        }
    }
}
