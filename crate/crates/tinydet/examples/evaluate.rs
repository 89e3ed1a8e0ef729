//! Full evaluation of a freshly trained model: AP at four IoU
//! thresholds, false positives at fixed recall levels, and the
//! localization/background split of the errors.
//!
//!     cargo run --release --example evaluate

use tinydet::boxgeom::BBox;
use tinydet::cascade::inference_pipeline;
use tinydet::config::RunConfig;
use tinydet::evalkit::evaluate;
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
    cfg.eval_scenes = 60;

    let out = std::env::temp_dir().join("tinydet_example_evaluate");
    let summary = train(&cfg, &out).expect("training failed");
    let mut rng = Rng::new(0);
    let model = Detector::<f32>::new(&cfg.model_config(), &mut rng);
    model.load_checkpoint(&summary.checkpoint).expect("checkpoint loads");

    let scenes = generate(
        cfg.eval_seed,
        cfg.eval_scenes,
        cfg.image_size,
        &cfg.scale_mix,
        &cfg.aspect_mix,
        &cfg.scene_params(),
    );
    let images: Vec<_> = scenes.iter().map(|s| s.image.clone()).collect();
    let dets = inference_pipeline(&model, &cfg.cascade_config(), &images);
    let gts: Vec<Vec<BBox>> = scenes.iter().map(|s| s.gts.clone()).collect();

    let report = evaluate(&dets, &gts, f64::NAN);
    print!("{}", report.to_text());
    let path = out.join("eval_report.txt");
    report.write(&path).expect("report written");
    report.write_pr_curve(&out.join("pr_curve.txt")).expect("pr curve written");
    println!("full report at {}", path.display());
}
