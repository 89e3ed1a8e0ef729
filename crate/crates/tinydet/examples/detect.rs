//! Train briefly, then walk one image through the five inference stages:
//! negative filtering, anchor refinement, decoding + score threshold,
//! suppression, final cap.
//!
//!     cargo run --release --example detect

use tinydet::boxgeom::{iou, nms};
use tinydet::cascade::{
    collect_candidates, finalize_detections, top_candidates, INFER_NMS_OVERLAP,
};
use tinydet::config::RunConfig;
use tinydet::netarch::Detector;
use tinydet::rng::Rng;
use tinydet::synthdata::generate;
use tinydet::trainloop::train;

fn main() {
    let mut cfg = RunConfig::default();
    cfg.train_scenes = 120;
    cfg.image_size = 96;
    cfg.epochs = 20;
    cfg.warmup_epochs = 2;
    cfg.milestone1 = 14;
    cfg.milestone2 = 18;
    cfg.batch_size = 8;
    cfg.fsm_enabled = false; // keep this example quick

    let out = std::env::temp_dir().join("tinydet_example_detect");
    let summary = train(&cfg, &out).expect("training failed");
    let mut rng = Rng::new(0);
    let model = Detector::<f32>::new(&cfg.model_config(), &mut rng);
    model.load_checkpoint(&summary.checkpoint).expect("checkpoint loads");

    let scene = &generate(
        cfg.eval_seed,
        1,
        cfg.image_size,
        &cfg.scale_mix,
        &cfg.aspect_mix,
        &cfg.scene_params(),
    )[0];
    let cascade = cfg.cascade_config();
    let pyramid = model.features(&scene.image);
    let preds = model.heads(&pyramid, &cascade.stc_levels, &cascade.str_levels);
    let anchors = model.anchors_for(cfg.image_size, cfg.image_size);

    let candidates =
        collect_candidates(&preds, &anchors, &cascade, (cfg.image_size, cfg.image_size));
    println!("{} candidates above the score threshold", candidates.len());
    let top = top_candidates(candidates);
    let kept = finalize_detections(nms(&top, INFER_NMS_OVERLAP));
    println!("{} detections after suppression:", kept.len());
    for d in &kept {
        let hit = scene.gts.iter().map(|g| iou(&d.bbox, g)).fold(0.0, f64::max);
        println!(
            "  score {:.3} level {} box ({:5.1},{:5.1})-({:5.1},{:5.1})  best gt IoU {:.2}",
            d.score, d.level, d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2, hit
        );
    }
    println!("ground truth: {} boxes", scene.gts.len());
}
