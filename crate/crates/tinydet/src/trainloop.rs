//! End-to-end optimization of the hybrid loss: SGD with momentum and
//! weight decay, a linear learning-rate warmup followed by two /10
//! milestones, and a deterministic single-threaded epoch driver.

use std::path::{Path, PathBuf};

use crate::autodiff::{Real, Tensor};
use crate::boxgeom::AnchorSet;
use crate::cascade::{assemble_batch, build_image_terms, CascadeConfig, ImageStats};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::losses::LossReport;
use crate::netarch::Detector;
use crate::rng::Rng;
use crate::synthdata::{augment, generate, Scene};

/// Which mechanisms participate in training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Toggles {
    pub str_on: bool,
    pub stc_on: bool,
    pub sml_on: bool,
    pub fsm_on: bool,
    pub rfe_on: bool,
}

impl Toggles {
    pub fn all_off() -> Self {
        Toggles { str_on: false, stc_on: false, sml_on: false, fsm_on: false, rfe_on: false }
    }

    pub fn all_on() -> Self {
        Toggles { str_on: true, stc_on: true, sml_on: true, fsm_on: true, rfe_on: true }
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    /// Epochs at which the learning rate divides by 10, twice.
    pub milestones: (usize, usize),
    pub lr_warmup_start: f64,
    pub lr_peak: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm cap applied before each update; 0 disables.
    pub grad_clip_norm: f64,
    pub seed: u64,
    pub toggles: Toggles,
}

impl TrainConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.batch_size == 0 {
            return Err("batch_size must be at least 1".into());
        }
        if self.epochs > 0 {
            let (m1, m2) = self.milestones;
            if !(self.warmup_epochs < m1 && m1 < m2 && m2 < self.epochs) {
                return Err(format!(
                    "schedule must satisfy warmup < milestone1 < milestone2 < epochs, \
                     got {} < {} < {} < {}",
                    self.warmup_epochs, m1, m2, self.epochs
                ));
            }
        }
        Ok(())
    }
}

/// Learning rate at an optimizer step: linear ramp from the warmup start
/// to the peak across the warmup epochs, then /10 at each milestone.
pub fn lr_at(tc: &TrainConfig, step: usize, steps_per_epoch: usize) -> f64 {
    let warmup_steps = tc.warmup_epochs * steps_per_epoch.max(1);
    if step < warmup_steps {
        let t = step as f64 / warmup_steps as f64;
        return tc.lr_warmup_start + (tc.lr_peak - tc.lr_warmup_start) * t;
    }
    let epoch = step / steps_per_epoch.max(1);
    let mut lr = tc.lr_peak;
    if epoch >= tc.milestones.0 {
        lr /= 10.0;
    }
    if epoch >= tc.milestones.1 {
        lr /= 10.0;
    }
    lr
}

/// Scale all gradients so their global L2 norm does not exceed
/// `max_norm`; returns the pre-clip norm. Keeps the loss spikes of the
/// heavily imbalanced focal sums from blowing up the update.
pub fn clip_gradients<S: Real>(params: &[Tensor<S>], max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for p in params {
        if let Some(g) = p.grad() {
            for v in g {
                sq += v.to_f64() * v.to_f64();
            }
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = S::from_f64(max_norm / norm);
        for p in params {
            if let Some(g) = p.grad() {
                p.set_grad(g.iter().map(|&v| v * scale).collect());
            }
        }
    }
    norm
}

/// Momentum buffers, one per parameter.
pub struct SgdState<S: Real> {
    velocity: Vec<Vec<S>>,
}

impl<S: Real> SgdState<S> {
    pub fn new(params: &[Tensor<S>]) -> Self {
        SgdState { velocity: params.iter().map(|p| vec![S::ZERO; p.numel()]).collect() }
    }
}

/// One SGD update: `v <- momentum*v + grad + weight_decay*param`,
/// `param <- param - lr*v`. Parameters without a gradient see only the
/// decay term.
pub fn sgd_step<S: Real>(
    params: &[Tensor<S>],
    state: &mut SgdState<S>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    assert_eq!(params.len(), state.velocity.len(), "optimizer state does not match parameters");
    let lr = S::from_f64(lr);
    let momentum = S::from_f64(momentum);
    let wd = S::from_f64(weight_decay);
    for (param, vel) in params.iter().zip(&mut state.velocity) {
        let grad = param.grad();
        let mut data = param.to_vec();
        for i in 0..data.len() {
            let g = grad.as_ref().map_or(S::ZERO, |g| g[i]);
            vel[i] = momentum * vel[i] + g + wd * data[i];
            data[i] = data[i] - lr * vel[i];
        }
        param.set_data(data);
    }
}

/// Forward one batch of (already augmented) scenes and assemble the
/// hybrid loss. Non-finite head outputs (a diverged model) produce a NaN
/// report instead of feeding garbage into the box geometry.
pub fn batch_forward(
    model: &Detector<f32>,
    cascade: &CascadeConfig,
    anchors: &[AnchorSet],
    scenes: &[&Scene],
    fsm_on: bool,
) -> (Tensor<f32>, LossReport, Vec<ImageStats>) {
    let mut terms = Vec::with_capacity(scenes.len());
    let mut stats = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let pyramid = model.features(&scene.image);
        let preds = model.heads(&pyramid, &cascade.stc_levels, &cascade.str_levels);
        if !preds_finite(&preds) {
            let report =
                LossReport { total: f64::NAN, ..Default::default() };
            return (Tensor::scalar(f32::NAN), report, stats);
        }
        let t = build_image_terms(model, &pyramid, &preds, anchors, &scene.gts, cascade, fsm_on);
        stats.push(t.stats.clone());
        terms.push(t);
    }
    let (total, report) = assemble_batch(terms);
    (total, report, stats)
}

fn preds_finite(preds: &[crate::netarch::LevelPreds<f32>]) -> bool {
    let ok = |t: &Tensor<f32>| t.data().iter().all(|v| v.is_finite());
    preds.iter().all(|p| {
        ok(&p.step2_cls)
            && ok(&p.step2_reg)
            && p.step1_cls.as_ref().map_or(true, &ok)
            && p.step1_reg.as_ref().map_or(true, &ok)
    })
}

#[derive(Debug)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub steps: usize,
    pub final_loss: Option<LossReport>,
    /// Mean total loss per epoch.
    pub epoch_loss: Vec<f64>,
    /// (positive/negative ratio before filtering, after) per batch.
    pub batch_ratios: Vec<(f64, f64)>,
    /// Mean best-IoU around the refinement levels (unrefined, refined),
    /// per batch where ground truths were present.
    pub refine_iou: Vec<(f64, f64)>,
}

/// Train a fresh detector on procedurally generated scenes and write the
/// checkpoint plus a step-by-step metrics log under `out_dir`.
/// Deterministic for a fixed seed; a non-finite loss aborts with the
/// offending optimizer step.
pub fn train(cfg: &RunConfig, out_dir: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let tc = cfg.train_config();
    let cascade = cfg.cascade_config();
    let model_cfg = cfg.model_config();

    let scenes = generate(
        cfg.seed,
        cfg.train_scenes,
        cfg.image_size,
        &cfg.scale_mix,
        &cfg.aspect_mix,
        &cfg.scene_params(),
    );
    let mut model_rng = Rng::new(cfg.seed).fork(0xde1);
    let model = Detector::<f32>::new(&model_cfg, &mut model_rng);
    let anchors = model.anchors_for(cfg.image_size, cfg.image_size);
    let params = model.parameters();
    let mut sgd = SgdState::new(&params);

    let steps_per_epoch = scenes.len().div_ceil(tc.batch_size).max(1);
    let metrics_path = out_dir.join("metrics.txt");
    let metrics_file = std::fs::File::create(&metrics_path)
        .map_err(|e| Error::io(metrics_path.display().to_string(), e))?;
    let mut metrics = std::io::BufWriter::new(metrics_file);
    {
        use std::io::Write;
        writeln!(metrics, "# epoch, step, lr, str_loss, stc_loss, fsm_loss, total")
            .map_err(|e| Error::io(metrics_path.display().to_string(), e))?;
    }
    let mut summary = TrainSummary {
        checkpoint: out_dir.join("model.ckpt"),
        metrics: out_dir.join("metrics.txt"),
        steps: 0,
        final_loss: None,
        epoch_loss: Vec::new(),
        batch_ratios: Vec::new(),
        refine_iou: Vec::new(),
    };

    let mut step = 0usize;
    for epoch in 0..tc.epochs {
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        Rng::new(cfg.seed).fork(0x5471).fork(epoch as u64).shuffle(&mut order);
        let mut epoch_total = 0.0;
        let mut epoch_batches = 0usize;
        for chunk in order.chunks(tc.batch_size) {
            let augmented: Vec<Scene> = chunk
                .iter()
                .map(|&idx| {
                    if cfg.augment_enabled {
                        let mut s =
                            Rng::new(cfg.seed).fork(0xa96).fork(epoch as u64).fork(idx as u64);
                        augment(&scenes[idx], s.next_u64())
                    } else {
                        scenes[idx].clone()
                    }
                })
                .collect();
            let refs: Vec<&Scene> = augmented.iter().collect();
            let (total, report, stats) =
                batch_forward(&model, &cascade, &anchors, &refs, tc.toggles.fsm_on);
            let lr = lr_at(&tc, step, steps_per_epoch);
            {
                use std::io::Write;
                writeln!(
                    metrics,
                    "{epoch}, {step}, {lr:.6}, {:.6}, {:.6}, {:.6}, {:.6}",
                    report.str_loss, report.stc_loss, report.fsm_loss, report.total
                )
                .and_then(|_| metrics.flush())
                .map_err(|e| Error::io(metrics_path.display().to_string(), e))?;
            }
            if !report.total.is_finite() {
                return Err(Error::Diverged { step });
            }
            total.backward();
            if tc.grad_clip_norm > 0.0 {
                clip_gradients(&params, tc.grad_clip_norm);
            }
            sgd_step(&params, &mut sgd, lr, tc.momentum, tc.weight_decay);
            for p in &params {
                p.zero_grad();
            }
            let (pb, nb, pa, na) = stats.iter().fold((0, 0, 0, 0), |acc, s| {
                (acc.0 + s.pos_before, acc.1 + s.neg_before, acc.2 + s.pos_after, acc.3 + s.neg_after)
            });
            let ratio = |p: usize, n: usize| {
                if n == 0 {
                    f64::INFINITY
                } else {
                    p as f64 / n as f64
                }
            };
            summary.batch_ratios.push((ratio(pb, nb), ratio(pa, na)));
            let ious: Vec<(f64, f64)> = stats
                .iter()
                .filter_map(|s| s.mean_iou_unrefined.zip(s.mean_iou_refined))
                .collect();
            if !ious.is_empty() {
                let n = ious.len() as f64;
                summary.refine_iou.push((
                    ious.iter().map(|p| p.0).sum::<f64>() / n,
                    ious.iter().map(|p| p.1).sum::<f64>() / n,
                ));
            }
            epoch_total += report.total;
            epoch_batches += 1;
            summary.final_loss = Some(report);
            step += 1;
        }
        summary.epoch_loss.push(epoch_total / epoch_batches.max(1) as f64);
    }
    summary.steps = step;
    {
        use std::io::Write;
        metrics.flush().map_err(|e| Error::io(metrics_path.display().to_string(), e))?;
    }
    model.save_checkpoint(&summary.checkpoint)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schedule() -> TrainConfig {
        TrainConfig {
            batch_size: 16,
            epochs: 30,
            warmup_epochs: 5,
            milestones: (20, 26),
            lr_warmup_start: 3.125e-4,
            lr_peak: 1e-2,
            momentum: 0.9,
            weight_decay: 1e-4,
            grad_clip_norm: 10.0,
            seed: 7,
            toggles: Toggles::all_on(),
        }
    }

    #[test]
    fn warmup_endpoints_and_midpoint() {
        let tc = schedule();
        let spe = 10;
        assert_eq!(lr_at(&tc, 0, spe), 3.125e-4);
        assert_eq!(lr_at(&tc, 5 * spe, spe), 1e-2);
        let mid = lr_at(&tc, 5 * spe / 2, spe);
        assert!((mid - (3.125e-4 + 1e-2) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn milestones_divide_by_ten() {
        let tc = schedule();
        let spe = 10;
        assert_eq!(lr_at(&tc, 19 * spe, spe), 1e-2);
        assert!((lr_at(&tc, 20 * spe, spe) - 1e-3).abs() < 1e-15);
        assert!((lr_at(&tc, 26 * spe, spe) - 1e-4).abs() < 1e-15);
    }

    #[test]
    fn schedule_invariant_enforced() {
        let mut tc = schedule();
        tc.warmup_epochs = 21;
        assert!(tc.validate().is_err());
        tc.warmup_epochs = 5;
        tc.milestones = (26, 20);
        assert!(tc.validate().is_err());
        // Zero-epoch runs skip the schedule check entirely.
        tc.epochs = 0;
        assert!(tc.validate().is_ok());
    }

    #[test]
    fn sgd_zero_grad_zero_decay_is_identity() {
        let p = Tensor::<f64>::param(&[3], vec![1.0, -2.0, 3.0]);
        let params = vec![p.clone()];
        let mut state = SgdState::new(&params);
        sgd_step(&params, &mut state, 0.1, 0.9, 0.0);
        assert_eq!(p.to_vec(), vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn sgd_single_step_update_rule() {
        // momentum 0: param decreases by lr * (grad + wd * param).
        let p = Tensor::<f64>::param(&[2], vec![2.0, -4.0]);
        let loss = p.mul(&p).sum(); // grad = 2p
        loss.backward();
        let params = vec![p.clone()];
        let mut state = SgdState::new(&params);
        sgd_step(&params, &mut state, 0.1, 0.0, 0.01);
        let want = [
            2.0 - 0.1 * (4.0 + 0.01 * 2.0),
            -4.0 - 0.1 * (-8.0 + 0.01 * -4.0),
        ];
        for (a, b) in p.to_vec().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sgd_momentum_matches_hand_unrolled_recurrence() {
        let p = Tensor::<f64>::param(&[1], vec![1.0]);
        let params = vec![p.clone()];
        let mut state = SgdState::new(&params);
        let (lr, mu, wd) = (0.1, 0.9, 0.0);
        // Two steps with constant gradient 1.0 via loss = p (grad 1).
        let mut hand_v = 0.0;
        let mut hand_p = 1.0;
        for _ in 0..2 {
            let loss = p.sum();
            loss.backward();
            sgd_step(&params, &mut state, lr, mu, wd);
            p.zero_grad();
            hand_v = mu * hand_v + 1.0;
            hand_p -= lr * hand_v;
        }
        assert!((p.to_vec()[0] - hand_p).abs() < 1e-7, "{} vs {hand_p}", p.to_vec()[0]);
    }
}
