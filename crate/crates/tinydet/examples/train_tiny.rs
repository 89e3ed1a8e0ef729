//! Train a small detector on procedurally generated scenes, then score
//! it on a held-out set. Finishes in about a minute on one CPU core.
//!
//!     cargo run --release --example train_tiny

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
    cfg.seed = 7;
    cfg.image_size = 96;
    cfg.train_scenes = 80;
    cfg.eval_scenes = 40;
    cfg.batch_size = 8;
    cfg.epochs = 30;
    cfg.warmup_epochs = 2;
    cfg.milestone1 = 20;
    cfg.milestone2 = 26;
    cfg.fsm_enabled = false; // the supervision head doubles the step cost

    let out = std::env::temp_dir().join("tinydet_example_train");
    let start = std::time::Instant::now();
    let summary = train(&cfg, &out).expect("training failed");
    println!("trained {} steps in {:.1?}", summary.steps, start.elapsed());
    for (epoch, loss) in summary.epoch_loss.iter().enumerate() {
        println!("epoch {epoch:>2}: mean total loss {loss:.4}");
    }

    // Score on scenes the model never saw.
    let eval_scenes = generate(
        cfg.eval_seed,
        cfg.eval_scenes,
        cfg.image_size,
        &cfg.scale_mix,
        &cfg.aspect_mix,
        &cfg.scene_params(),
    );
    let mut rng = Rng::new(0);
    let model = Detector::<f32>::new(&cfg.model_config(), &mut rng);
    model.load_checkpoint(&summary.checkpoint).expect("checkpoint loads");
    let images: Vec<_> = eval_scenes.iter().map(|s| s.image.clone()).collect();
    let dets = inference_pipeline(&model, &cfg.cascade_config(), &images);
    let gts: Vec<Vec<BBox>> = eval_scenes.iter().map(|s| s.gts.clone()).collect();
    let report = evaluate(&dets, &gts, f64::NAN);
    println!("{}", report.summary_line());
}
