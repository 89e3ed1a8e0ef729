//! End-to-end training behaviours: overfit sanity through every
//! mechanism at once, gradient-path effects of the supervision head,
//! seed determinism, and divergence reporting.

use std::path::PathBuf;

use tinydet::cascade::inference_pipeline;
use tinydet::config::RunConfig;
use tinydet::error::Error;
use tinydet::netarch::Detector;
use tinydet::rng::Rng;
use tinydet::synthdata::generate;
use tinydet::trainloop::{batch_forward, train};

fn tmp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("tinydet_it_{tag}"));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.image_size = 64;
    cfg.train_scenes = 10;
    cfg.eval_scenes = 8;
    cfg.channels = 8;
    cfg.head_depth = 1;
    cfg.fsm_channels = 16;
    cfg.fsm_pre_nms_top_k = 8;
    cfg.batch_size = 5;
    cfg.epochs = 4;
    cfg.warmup_epochs = 1;
    cfg.milestone1 = 2;
    cfg.milestone2 = 3;
    cfg
}

/// First data line of the metrics log = the loss before any update.
fn initial_total(metrics: &std::path::Path) -> f64 {
    let text = std::fs::read_to_string(metrics).unwrap();
    let line = text.lines().nth(1).expect("at least one step logged");
    line.rsplit(',').next().unwrap().trim().parse().unwrap()
}

#[test]
fn overfit_drives_hybrid_loss_through_every_mechanism() {
    // Ten memorized scenes, augmentation off, every toggle on: the whole
    // gradient path (two-step regression + classification, margins,
    // supervision head, receptive-field blocks) must cooperate to push
    // the loss below 5% of its starting value.
    let mut cfg = small_config();
    cfg.seed = 41;
    cfg.channels = 16;
    cfg.head_depth = 2;
    cfg.augment_enabled = false;
    cfg.epochs = 200;
    cfg.warmup_epochs = 2;
    cfg.milestone1 = 150;
    cfg.milestone2 = 180;
    let out = tmp_dir("overfit");
    let summary = train(&cfg, &out).expect("training runs");
    let initial = initial_total(&summary.metrics);
    let final_loss = *summary.epoch_loss.last().unwrap();
    assert!(
        final_loss < 0.05 * initial,
        "final mean loss {final_loss:.4} is not below 5% of initial {initial:.4}"
    );

    // On the converged model, refinement must not hurt anchor coverage.
    let (unrefined, refined) = *summary.refine_iou.last().unwrap();
    assert!(
        refined >= unrefined - 1e-6,
        "refined mean IoU {refined:.4} fell below unrefined {unrefined:.4}"
    );
}

#[test]
fn fsm_changes_training_gradients_but_not_inference() {
    let cfg = small_config();
    let scenes = generate(
        5,
        4,
        cfg.image_size,
        &cfg.scale_mix,
        &cfg.aspect_mix,
        &cfg.scene_params(),
    );
    let refs: Vec<_> = scenes.iter().collect();
    let cascade = cfg.cascade_config();

    // Identical initializations, one step each way.
    let grads = |fsm_on: bool| -> Vec<f32> {
        let mut rng = Rng::new(17);
        let model = Detector::<f32>::new(&cfg.model_config(), &mut rng);
        let anchors = model.anchors_for(cfg.image_size, cfg.image_size);
        let (total, _, _) = batch_forward(&model, &cascade, &anchors, &refs, fsm_on);
        total.backward();
        model.parameters()[0].grad().expect("stem got a gradient")
    };
    let with_fsm = grads(true);
    let without = grads(false);
    assert!(
        with_fsm.iter().zip(&without).any(|(a, b)| a != b),
        "supervision head must alter backbone gradients during training"
    );

    // Inference is bit-identical across the toggle for equal parameters.
    let out = tmp_dir("fsm_inference");
    let ckpt = out.join("model.ckpt");
    let mut rng = Rng::new(17);
    let fsm_model = Detector::<f32>::new(&cfg.model_config(), &mut rng);
    fsm_model.save_checkpoint(&ckpt).unwrap();
    let mut no_fsm_cfg = cfg.model_config();
    no_fsm_cfg.fsm_enabled = false;
    let mut rng2 = Rng::new(99);
    let plain_model = Detector::<f32>::new(&no_fsm_cfg, &mut rng2);
    plain_model.load_checkpoint(&ckpt).unwrap();

    let images: Vec<_> = scenes.iter().map(|s| s.image.clone()).collect();
    let a = inference_pipeline(&fsm_model, &cascade, &images);
    let b = inference_pipeline(&plain_model, &cascade, &images);
    assert_eq!(a.len(), b.len());
    for (da, db) in a.iter().zip(&b) {
        assert_eq!(da.len(), db.len());
        for (x, y) in da.iter().zip(db) {
            assert_eq!(x.score.to_bits(), y.score.to_bits());
            assert_eq!(x.bbox.x1.to_bits(), y.bbox.x1.to_bits());
            assert_eq!(x.bbox.y2.to_bits(), y.bbox.y2.to_bits());
        }
    }
}

#[test]
fn same_seed_same_bytes() {
    let mut cfg = small_config();
    cfg.seed = 23;
    let out_a = tmp_dir("det_a");
    let out_b = tmp_dir("det_b");
    train(&cfg, &out_a).unwrap();
    train(&cfg, &out_b).unwrap();
    let ckpt_a = std::fs::read(out_a.join("model.ckpt")).unwrap();
    let ckpt_b = std::fs::read(out_b.join("model.ckpt")).unwrap();
    assert_eq!(ckpt_a, ckpt_b, "checkpoints must be byte-identical");
    let log_a = std::fs::read(out_a.join("metrics.txt")).unwrap();
    let log_b = std::fs::read(out_b.join("metrics.txt")).unwrap();
    assert_eq!(log_a, log_b, "metric logs must be byte-identical");
}

#[test]
fn zero_epochs_keeps_initialization() {
    let mut cfg = small_config();
    cfg.epochs = 0;
    let out = tmp_dir("zero_epochs");
    let summary = train(&cfg, &out).unwrap();
    assert_eq!(summary.steps, 0);

    // The checkpoint equals a freshly initialized model.
    let mut rng = Rng::new(cfg.seed).fork(0xde1);
    let fresh = Detector::<f32>::new(&cfg.model_config(), &mut rng);
    let trained = Detector::<f32>::new(&cfg.model_config(), &mut Rng::new(1));
    trained.load_checkpoint(&summary.checkpoint).unwrap();
    for ((_, a), (_, b)) in fresh.named_parameters().iter().zip(&trained.named_parameters()) {
        assert!(a.to_vec().iter().zip(b.to_vec()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn divergence_reports_the_offending_step() {
    let mut cfg = small_config();
    cfg.epochs = 3;
    cfg.warmup_epochs = 0;
    cfg.milestone1 = 1;
    cfg.milestone2 = 2;
    cfg.lr_warmup_start = 1e9;
    cfg.lr_peak = 1e9;
    cfg.grad_clip_norm = 0.0;
    let out = tmp_dir("diverge");
    match train(&cfg, &out) {
        Err(Error::Diverged { step }) => assert!(step < 10, "diverged late: step {step}"),
        other => panic!("expected divergence, got {other:?}"),
    }
}
