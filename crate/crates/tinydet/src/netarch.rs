//! The detector graph: a small convolutional backbone with a top-down
//! lateral pathway, shared prediction subnets emitting both refinement
//! steps, optional receptive-field-enhancement blocks in the subnets, and
//! a training-only RoI supervision head.
//!
//! One model instance belongs to one thread while training; read-only
//! replicas can be rebuilt per thread from a checkpoint.

use std::path::Path;

use crate::autodiff::{checkpoint, concat, Real, Tensor};
use crate::boxgeom::{level_scales, tile_anchors, AnchorSet, BBox, Detection};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Topology of the detector.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Pyramid strides, strictly increasing, each double the previous,
    /// the first a power of two. Level ids are indices into this list.
    pub strides: Vec<usize>,
    /// Feature width of every backbone stage, lateral and head tensor.
    pub channels: usize,
    /// Trunk blocks per prediction subnet.
    pub head_depth: usize,
    pub rfe_enabled: bool,
    pub fsm_enabled: bool,
    /// Width of the RoI supervision subnet.
    pub fsm_channels: usize,
    /// Height/width ratio of the tiled anchors.
    pub anchor_aspect: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            strides: vec![4, 8, 16],
            channels: 16,
            head_depth: 2,
            rfe_enabled: true,
            fsm_enabled: true,
            fsm_channels: 64,
            anchor_aspect: 1.25,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.strides.is_empty() {
            return Err("at least one pyramid level is required".into());
        }
        if !self.strides[0].is_power_of_two() || self.strides[0] < 2 {
            return Err(format!("first stride {} must be a power of two >= 2", self.strides[0]));
        }
        for pair in self.strides.windows(2) {
            if pair[1] != 2 * pair[0] {
                return Err(format!(
                    "strides must double level to level, got {} then {}",
                    pair[0], pair[1]
                ));
            }
        }
        if self.rfe_enabled && self.channels % 4 != 0 {
            return Err(format!(
                "channels ({}) must be divisible by 4 when rfe_enabled (quarter-channel branches)",
                self.channels
            ));
        }
        if self.head_depth == 0 {
            return Err("head_depth must be at least 1".into());
        }
        Ok(())
    }

    pub fn num_levels(&self) -> usize {
        self.strides.len()
    }

    pub fn max_stride(&self) -> usize {
        *self.strides.last().unwrap()
    }
}

/// Anchors per location. Two scales, one aspect ratio.
pub const ANCHORS_PER_LOCATION: usize = 2;
/// RoI resolution of the supervision head.
pub const FSM_ROI_RESOLUTION: usize = 5;
/// NMS overlap used when sampling supervision proposals.
pub const FSM_NMS_OVERLAP: f64 = 0.7;
/// Matching thresholds (negative, positive) for supervision proposals.
pub const FSM_MATCH_THRESHOLDS: (f64, f64) = (0.4, 0.7);
/// Default cap on supervision proposals per image.
pub const FSM_MAX_PROPOSALS: usize = 512;

// ---- layers ------------------------------------------------------------

struct Conv<S: Real> {
    weight: Tensor<S>,
    bias: Tensor<S>,
    stride: usize,
    pad: (usize, usize),
}

impl<S: Real> Conv<S> {
    /// Fan-based uniform weight init with the ReLU gain (fan-in rule),
    /// zero bias. The two-fan bound attenuates activations layer by
    /// layer in a from-scratch ReLU stack, which stalls training here;
    /// the fan-in rule keeps the forward variance flat.
    fn new(rng: &mut Rng, out_c: usize, in_c: usize, kh: usize, kw: usize, stride: usize) -> Self {
        let fan_in = (in_c * kh * kw) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let data: Vec<S> =
            (0..out_c * in_c * kh * kw).map(|_| S::from_f64(rng.range(-bound, bound))).collect();
        Conv {
            weight: Tensor::param(&[out_c, in_c, kh, kw], data),
            bias: Tensor::param(&[out_c], vec![S::ZERO; out_c]),
            stride,
            pad: (kh / 2, kw / 2),
        }
    }

    fn forward(&self, x: &Tensor<S>) -> Tensor<S> {
        x.conv2d(&self.weight, self.stride, self.pad).bias_add(&self.bias)
    }

    fn push_params(&self, name: &str, out: &mut Vec<(String, Tensor<S>)>) {
        out.push((format!("{name}.weight"), self.weight.clone()));
        out.push((format!("{name}.bias"), self.bias.clone()));
    }
}

/// Four branches of 1x1 reduction to quarter channels followed by 1xk or
/// kx1 convolutions (k = 3, 5), concatenated, fused by 1x1 and added to
/// the identity shortcut: rectangular receptive fields on top of the
/// square one.
struct RfeBlock<S: Real> {
    reduce: Vec<Conv<S>>,
    branch: Vec<Conv<S>>,
    fuse: Conv<S>,
}

impl<S: Real> RfeBlock<S> {
    fn new(rng: &mut Rng, channels: usize) -> Self {
        assert!(
            channels % 4 == 0,
            "receptive-field block needs channels divisible by 4, got {channels}"
        );
        let q = channels / 4;
        let mut reduce = Vec::new();
        let mut branch = Vec::new();
        for &(kh, kw) in &[(1usize, 3usize), (3, 1), (1, 5), (5, 1)] {
            reduce.push(Conv::new(rng, q, channels, 1, 1, 1));
            branch.push(Conv::new(rng, q, q, kh, kw, 1));
        }
        let fuse = Conv::new(rng, channels, channels, 1, 1, 1);
        RfeBlock { reduce, branch, fuse }
    }

    fn forward(&self, x: &Tensor<S>) -> Tensor<S> {
        let outs: Vec<Tensor<S>> = self
            .reduce
            .iter()
            .zip(&self.branch)
            .map(|(r, b)| b.forward(&r.forward(x).relu()).relu())
            .collect();
        let fused = self.fuse.forward(&concat(&outs, 1));
        x.add(&fused)
    }

    fn push_params(&self, name: &str, out: &mut Vec<(String, Tensor<S>)>) {
        for (i, (r, b)) in self.reduce.iter().zip(&self.branch).enumerate() {
            r.push_params(&format!("{name}.reduce{i}"), out);
            b.push_params(&format!("{name}.branch{i}"), out);
        }
        self.fuse.push_params(&format!("{name}.fuse"), out);
    }
}

/// One trunk block of a prediction subnet: a receptive-field block when
/// enabled, a plain 3x3 convolution otherwise. Shape-preserving.
enum HeadBlock<S: Real> {
    Plain(Conv<S>),
    Rfe(RfeBlock<S>),
}

impl<S: Real> HeadBlock<S> {
    fn new(rng: &mut Rng, channels: usize, rfe: bool) -> Self {
        if rfe {
            HeadBlock::Rfe(RfeBlock::new(rng, channels))
        } else {
            HeadBlock::Plain(Conv::new(rng, channels, channels, 3, 3, 1))
        }
    }

    fn forward(&self, x: &Tensor<S>) -> Tensor<S> {
        match self {
            HeadBlock::Plain(conv) => conv.forward(x).relu(),
            HeadBlock::Rfe(block) => block.forward(x),
        }
    }

    fn push_params(&self, name: &str, out: &mut Vec<(String, Tensor<S>)>) {
        match self {
            HeadBlock::Plain(conv) => conv.push_params(name, out),
            HeadBlock::Rfe(block) => block.push_params(name, out),
        }
    }
}

struct FsmHead<S: Real> {
    convs: Vec<Conv<S>>,
    pred: Conv<S>,
}

impl<S: Real> FsmHead<S> {
    fn new(rng: &mut Rng, in_channels: usize, width: usize) -> Self {
        let convs = vec![
            Conv::new(rng, width, in_channels, 3, 3, 1),
            Conv::new(rng, width, width, 3, 3, 1),
            Conv::new(rng, width, width, 3, 3, 1),
        ];
        let pred = Conv::new(rng, 1, width, 3, 3, 1);
        FsmHead { convs, pred }
    }

    fn push_params(&self, out: &mut Vec<(String, Tensor<S>)>) {
        for (i, c) in self.convs.iter().enumerate() {
            c.push_params(&format!("fsm.conv{i}"), out);
        }
        self.pred.push_params("fsm.pred", out);
    }
}

// ---- model -------------------------------------------------------------

/// Bottom-up (`c`) and top-down (`p`) feature maps, one per level, each
/// `[1, channels, H/stride, W/stride]`.
pub struct Pyramid<S: Real> {
    pub c: Vec<Tensor<S>>,
    pub p: Vec<Tensor<S>>,
}

/// Per-level head outputs. Classification logits are `[A, H, W]`,
/// regression deltas `[4A, H, W]`. Step-1 outputs exist only on the
/// levels selected for two-step classification / regression.
pub struct LevelPreds<S: Real> {
    pub step1_cls: Option<Tensor<S>>,
    pub step1_reg: Option<Tensor<S>>,
    pub step2_cls: Tensor<S>,
    pub step2_reg: Tensor<S>,
}

/// A candidate region for the supervision head.
#[derive(Clone, Copy, Debug)]
pub struct Proposal {
    pub bbox: BBox,
    /// Pyramid level whose features the RoI is sampled from.
    pub level: usize,
    /// true = face, false = background.
    pub label: bool,
}

pub struct Detector<S: Real = f32> {
    pub config: ModelConfig,
    stem: Vec<Conv<S>>,
    stages: Vec<Vec<Conv<S>>>,
    laterals: Vec<Conv<S>>,
    smooths: Vec<Conv<S>>,
    cls_trunk: Vec<HeadBlock<S>>,
    box_trunk: Vec<HeadBlock<S>>,
    cls_pred: Conv<S>,
    reg_pred_step1: Conv<S>,
    reg_pred_step2: Conv<S>,
    fsm: Option<FsmHead<S>>,
}

impl<S: Real> Detector<S> {
    /// Build and initialize a fresh model. All layers use the fan-based
    /// uniform init; the shared classification predictor's bias starts at
    /// the 1% face prior so the focal loss is calm on step zero.
    pub fn new(config: &ModelConfig, rng: &mut Rng) -> Self {
        if let Err(msg) = config.validate() {
            panic!("invalid model config: {msg}");
        }
        let f = config.channels;
        let downs = config.strides[0].trailing_zeros() as usize;
        let mut stem = Vec::new();
        for d in 0..downs {
            let in_c = if d == 0 { 3 } else { f };
            stem.push(Conv::new(rng, f, in_c, 3, 3, 2));
        }
        let mut stages = Vec::new();
        for level in 0..config.num_levels() {
            let mut stage = Vec::new();
            if level > 0 {
                stage.push(Conv::new(rng, f, f, 3, 3, 2));
            }
            stage.push(Conv::new(rng, f, f, 3, 3, 1));
            stages.push(stage);
        }
        let laterals = (0..config.num_levels()).map(|_| Conv::new(rng, f, f, 1, 1, 1)).collect();
        let smooths = (0..config.num_levels()).map(|_| Conv::new(rng, f, f, 3, 3, 1)).collect();

        let cls_trunk =
            (0..config.head_depth).map(|_| HeadBlock::new(rng, f, config.rfe_enabled)).collect();
        let box_trunk =
            (0..config.head_depth).map(|_| HeadBlock::new(rng, f, config.rfe_enabled)).collect();
        let cls_pred = Conv::new(rng, ANCHORS_PER_LOCATION, f, 3, 3, 1);
        // Start sigmoid(face logit) near the 1% prior.
        let prior = -((1.0f64 - 0.01) / 0.01).ln();
        cls_pred.bias.set_data(vec![S::from_f64(prior); ANCHORS_PER_LOCATION]);
        let reg_pred_step1 = Conv::new(rng, 4 * ANCHORS_PER_LOCATION, f, 3, 3, 1);
        let reg_pred_step2 = Conv::new(rng, 4 * ANCHORS_PER_LOCATION, f, 3, 3, 1);

        let fsm =
            if config.fsm_enabled { Some(FsmHead::new(rng, f, config.fsm_channels)) } else { None };

        Detector {
            config: config.clone(),
            stem,
            stages,
            laterals,
            smooths,
            cls_trunk,
            box_trunk,
            cls_pred,
            reg_pred_step1,
            reg_pred_step2,
            fsm,
        }
    }

    /// Bottom-up stages plus the top-down lateral pathway.
    /// The image must be `[3, H, W]` with extents divisible by the
    /// maximum stride.
    pub fn features(&self, image: &Tensor<S>) -> Pyramid<S> {
        let sh = image.shape();
        assert_eq!(sh.len(), 3, "features expects a [3,H,W] image, got {sh:?}");
        let (h, w) = (sh[1], sh[2]);
        let max_stride = self.config.max_stride();
        assert!(
            h % max_stride == 0 && w % max_stride == 0,
            "image extents {h}x{w} not divisible by the maximum stride {max_stride}"
        );

        // Centre the [0,1] input.
        let mut x = image.reshape(&[1, sh[0], h, w]).add_scalar(S::from_f64(-0.5));
        for conv in &self.stem {
            x = conv.forward(&x).relu();
        }
        let mut c = Vec::with_capacity(self.config.num_levels());
        for stage in &self.stages {
            for conv in stage {
                x = conv.forward(&x).relu();
            }
            c.push(x.clone());
        }

        // Top-down: coarsest lateral first, then upsample-and-add.
        let n = c.len();
        let mut carry = self.laterals[n - 1].forward(&c[n - 1]);
        let mut tops = vec![carry.clone()];
        for i in (0..n - 1).rev() {
            carry = self.laterals[i].forward(&c[i]).add(&carry.upsample_nearest2());
            tops.push(carry.clone());
        }
        tops.reverse();
        let p = tops.iter().enumerate().map(|(i, t)| self.smooths[i].forward(t)).collect();
        Pyramid { c, p }
    }

    /// Run the prediction subnets. Step-2 outputs come from the top-down
    /// maps on every level; step-1 classification runs the *same*
    /// classification module on the bottom-up maps of `stc_levels`, and
    /// step-1 regression its own predictor on `str_levels`.
    pub fn heads(
        &self,
        pyramid: &Pyramid<S>,
        stc_levels: &[usize],
        str_levels: &[usize],
    ) -> Vec<LevelPreds<S>> {
        let a = ANCHORS_PER_LOCATION;
        let mut out = Vec::with_capacity(pyramid.p.len());
        for level in 0..pyramid.p.len() {
            let p_feat = &pyramid.p[level];
            let sh = p_feat.shape().to_vec();
            let (fh, fw) = (sh[2], sh[3]);
            let cls_feat = run_trunk(&self.cls_trunk, p_feat);
            let box_feat = run_trunk(&self.box_trunk, p_feat);
            let step2_cls = self.cls_pred.forward(&cls_feat).reshape(&[a, fh, fw]);
            let step2_reg = self.reg_pred_step2.forward(&box_feat).reshape(&[4 * a, fh, fw]);

            let step1_cls = if stc_levels.contains(&level) {
                let c_feat = run_trunk(&self.cls_trunk, &pyramid.c[level]);
                Some(self.cls_pred.forward(&c_feat).reshape(&[a, fh, fw]))
            } else {
                None
            };
            let step1_reg = if str_levels.contains(&level) {
                let c_feat = run_trunk(&self.box_trunk, &pyramid.c[level]);
                Some(self.reg_pred_step1.forward(&c_feat).reshape(&[4 * a, fh, fw]))
            } else {
                None
            };
            out.push(LevelPreds { step1_cls, step1_reg, step2_cls, step2_reg });
        }
        out
    }

    /// RoIAlign the proposals from their levels' top-down maps and
    /// classify each: one face logit per proposal.
    pub fn fsm_forward(&self, pyramid: &Pyramid<S>, proposals: &[Proposal]) -> Tensor<S> {
        let head = self.fsm.as_ref().expect("fsm_forward on a model without the supervision head");
        assert!(!proposals.is_empty(), "fsm_forward needs at least one proposal");
        let f = self.config.channels;
        let r = FSM_ROI_RESOLUTION;
        let mut rois = Vec::with_capacity(proposals.len());
        for prop in proposals {
            assert!(
                prop.bbox.area() > 0.0,
                "degenerate proposal box {:?} (zero area)",
                prop.bbox
            );
            let stride = self.config.strides[prop.level] as f64;
            let feat = &pyramid.p[prop.level];
            let sh = feat.shape().to_vec();
            let chw = feat.reshape(&[sh[1], sh[2], sh[3]]);
            let roi = chw.roi_align(
                S::from_f64(prop.bbox.x1 / stride),
                S::from_f64(prop.bbox.y1 / stride),
                S::from_f64(prop.bbox.x2 / stride),
                S::from_f64(prop.bbox.y2 / stride),
                r,
            );
            rois.push(roi.reshape(&[1, f, r, r]));
        }
        let mut x = concat(&rois, 0);
        for conv in &head.convs {
            x = conv.forward(&x).relu();
        }
        let logits = head.pred.forward(&x).mean_hw();
        logits.reshape(&[proposals.len()])
    }

    /// Anchor sets for an image of the given extents, one per level.
    pub fn anchors_for(&self, image_h: usize, image_w: usize) -> Vec<AnchorSet> {
        self.config
            .strides
            .iter()
            .enumerate()
            .map(|(level, &stride)| {
                tile_anchors(
                    image_h / stride,
                    image_w / stride,
                    level,
                    stride,
                    self.config.anchor_aspect,
                )
            })
            .collect()
    }

    /// All parameters with stable names, in construction order.
    pub fn named_parameters(&self) -> Vec<(String, Tensor<S>)> {
        let mut out = Vec::new();
        for (i, conv) in self.stem.iter().enumerate() {
            conv.push_params(&format!("stem.{i}"), &mut out);
        }
        for (level, stage) in self.stages.iter().enumerate() {
            for (i, conv) in stage.iter().enumerate() {
                conv.push_params(&format!("stage{level}.{i}"), &mut out);
            }
        }
        for (i, conv) in self.laterals.iter().enumerate() {
            conv.push_params(&format!("lateral{i}"), &mut out);
        }
        for (i, conv) in self.smooths.iter().enumerate() {
            conv.push_params(&format!("smooth{i}"), &mut out);
        }
        for (i, block) in self.cls_trunk.iter().enumerate() {
            block.push_params(&format!("head.cls.{i}"), &mut out);
        }
        for (i, block) in self.box_trunk.iter().enumerate() {
            block.push_params(&format!("head.box.{i}"), &mut out);
        }
        self.cls_pred.push_params("head.cls_pred", &mut out);
        self.reg_pred_step1.push_params("head.reg_pred_step1", &mut out);
        self.reg_pred_step2.push_params("head.reg_pred_step2", &mut out);
        if let Some(fsm) = &self.fsm {
            fsm.push_params(&mut out);
        }
        out
    }

    pub fn parameters(&self) -> Vec<Tensor<S>> {
        self.named_parameters().into_iter().map(|(_, t)| t).collect()
    }

    /// The classification predictor weight, shared by both steps.
    pub fn shared_cls_weight(&self) -> &Tensor<S> {
        &self.cls_pred.weight
    }

    pub fn has_fsm(&self) -> bool {
        self.fsm.is_some()
    }
}

impl Detector<f32> {
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.named_parameters())
    }

    /// Load parameters by name. Every model parameter must be present
    /// with a matching shape. Records under `fsm.` may be skipped when
    /// the supervision head is disabled: it never affects inference.
    pub fn load_checkpoint(&self, path: &Path) -> Result<()> {
        let records = checkpoint::load(path)?;
        self.apply_records(&records).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Apply already-loaded checkpoint records; used to replicate a model
    /// into other threads from one read of the file.
    pub fn apply_records(&self, records: &[checkpoint::Record]) -> Result<()> {
        let mut by_name: std::collections::BTreeMap<&str, &checkpoint::Record> =
            records.iter().map(|r| (r.name.as_str(), r)).collect();
        for (name, tensor) in self.named_parameters() {
            let record = by_name.remove(name.as_str()).ok_or_else(|| {
                Error::Checkpoint(format!(
                    "model parameter {name} missing from checkpoint (topology mismatch)"
                ))
            })?;
            if record.shape != tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name} has shape {:?} in checkpoint but {:?} in model",
                    record.shape,
                    tensor.shape()
                )));
            }
            tensor.set_data(record.values.clone());
        }
        for leftover in by_name.keys() {
            if !(self.fsm.is_none() && leftover.starts_with("fsm.")) {
                return Err(Error::Checkpoint(format!(
                    "checkpoint parameter {leftover} has no home in the model \
                     (topology mismatch)"
                )));
            }
        }
        Ok(())
    }
}

fn run_trunk<S: Real>(trunk: &[HeadBlock<S>], x: &Tensor<S>) -> Tensor<S> {
    let mut t = x.clone();
    for block in trunk {
        t = block.forward(&t);
    }
    t
}

/// Assign a box to the pyramid level whose anchor scales fit it best.
pub fn level_for_box(bbox: &BBox, strides: &[usize]) -> usize {
    let s = bbox.scale().max(1e-6);
    let mut best = 0;
    let mut best_dist = f64::INFINITY;
    for (level, &stride) in strides.iter().enumerate() {
        let [lo, hi] = level_scales(stride);
        let representative = (lo * hi).sqrt();
        let dist = (s / representative).ln().abs();
        if dist < best_dist {
            best_dist = dist;
            best = level;
        }
    }
    best
}

/// Select supervision proposals from the refined detections: NMS at 0.7,
/// ground truths appended, labels from the (0.4, 0.7) IoU bands (the
/// in-between band is discarded), capped at `max_proposals` with ground
/// truths taking precedence.
pub fn sample_fsm_proposals(
    detections: &[Detection],
    gts: &[BBox],
    strides: &[usize],
    max_proposals: usize,
) -> Vec<Proposal> {
    let kept = crate::boxgeom::nms(detections, FSM_NMS_OVERLAP);
    let (neg_thresh, pos_thresh) = FSM_MATCH_THRESHOLDS;
    let mut proposals: Vec<Proposal> = gts
        .iter()
        .map(|g| Proposal { bbox: *g, level: level_for_box(g, strides), label: true })
        .collect();
    for det in kept {
        if det.bbox.area() <= 0.0 {
            continue;
        }
        let best = gts.iter().map(|g| crate::boxgeom::iou(g, &det.bbox)).fold(0.0, f64::max);
        if best >= pos_thresh {
            proposals.push(Proposal { bbox: det.bbox, level: det.level, label: true });
        } else if best < neg_thresh {
            proposals.push(Proposal { bbox: det.bbox, level: det.level, label: false });
        }
        // [neg_thresh, pos_thresh): unassigned, discarded.
    }
    proposals.truncate(max_proposals);
    proposals
}
