// debug: error anatomy of a trained full-scale checkpoint
use tinydet::boxgeom::BBox;
use tinydet::cascade::inference_pipeline;
use tinydet::config::RunConfig;
use tinydet::evalkit::{compute_ap_filtered, evaluate};
use tinydet::netarch::Detector;
use tinydet::rng::Rng;
use tinydet::synthdata::generate;

fn main() {
    let mut cfg = RunConfig::default();
    cfg.batch_size = 8;
    cfg.epochs = 18;
    cfg.eval_scenes = 100;
    // B5 used the pre-TAU generator, but the checkpoint still evaluates.
    let ckpt = std::path::Path::new("/tmp/tinydet_calib_all/model.ckpt");
    let mut rng = Rng::new(0);
    let model = Detector::<f32>::new(&cfg.model_config(), &mut rng);
    model.load_checkpoint(ckpt).expect("load");
    let scenes = generate(cfg.eval_seed, cfg.eval_scenes, cfg.image_size, &cfg.scale_mix, &cfg.aspect_mix, &cfg.scene_params());
    let images: Vec<_> = scenes.iter().map(|s| s.image.clone()).collect();
    let dets = inference_pipeline(&model, &cfg.cascade_config(), &images);
    let gts: Vec<Vec<BBox>> = scenes.iter().map(|s| s.gts.clone()).collect();
    let report = evaluate(&dets, &gts, f64::NAN);
    println!("{}", report.to_text());
    for (lo, hi, tag) in [(0.0, 16.0, "tiny"), (16.0, 24.0, "small"), (24.0, 34.0, "medium"), (34.0, 64.0, "large")] {
        let (ap, _) = compute_ap_filtered(&dets, &gts, 0.5, Some((lo, hi)));
        println!("ap@0.50 size [{lo:>2.0},{hi:>2.0}) = {ap:.4}  ({tag})");
    }
    // aspect bands
    let total: usize = gts.iter().map(|v| v.len()).sum();
    println!("gts total {total}");
}
