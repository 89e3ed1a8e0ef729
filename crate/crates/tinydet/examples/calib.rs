// Scratch calibration sweep (dev aid): args = scenes epochs size batch fsm(0/1) toggles(bsrmf: b=baseline)
use tinydet::boxgeom::BBox;
use tinydet::cascade::inference_pipeline;
use tinydet::config::RunConfig;
use tinydet::evalkit::evaluate;
use tinydet::netarch::Detector;
use tinydet::rng::Rng;
use tinydet::synthdata::generate;
use tinydet::trainloop::train;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut cfg = RunConfig::default();
    cfg.train_scenes = args.get(0).map(|s| s.parse().unwrap()).unwrap_or(80);
    cfg.epochs = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(30);
    cfg.image_size = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(96);
    cfg.batch_size = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(8);
    let mode = args.get(4).cloned().unwrap_or("all".to_string());
    match mode.as_str() {
        "base" => { cfg.str_enabled=false; cfg.stc_enabled=false; cfg.sml_enabled=false; cfg.fsm_enabled=false; cfg.rfe_enabled=false; }
        "nofsm" => { cfg.fsm_enabled = false; }
        _ => {}
    }
    for extra in args.get(5..).unwrap_or(&[]) {
        cfg.apply_override(extra).unwrap();
    }
    cfg.warmup_epochs = 2.min(cfg.epochs.saturating_sub(3));
    cfg.milestone1 = cfg.epochs * 2 / 3;
    cfg.milestone2 = cfg.epochs * 13 / 15;
    if cfg.milestone2 <= cfg.milestone1 { cfg.milestone2 = cfg.milestone1 + 1; }
    cfg.eval_scenes = 40;
    eprintln!("mode={mode} scenes={} epochs={} size={} batch={} warm={} ms=({},{})",
        cfg.train_scenes, cfg.epochs, cfg.image_size, cfg.batch_size, cfg.warmup_epochs, cfg.milestone1, cfg.milestone2);
    let out = std::env::temp_dir().join(format!("tinydet_calib_{mode}"));
    let t0 = std::time::Instant::now();
    let summary = train(&cfg, &out).expect("train");
    eprintln!("{} steps in {:.1?}", summary.steps, t0.elapsed());
    for (e, l) in summary.epoch_loss.iter().enumerate() {
        if e % 3 == 0 || e + 1 == summary.epoch_loss.len() { eprintln!("  epoch {e:>2}: {l:.4}"); }
    }
    let eval_scenes = generate(cfg.eval_seed, cfg.eval_scenes, cfg.image_size, &cfg.scale_mix, &cfg.aspect_mix, &cfg.scene_params());
    let mut rng = Rng::new(0);
    let model = Detector::<f32>::new(&cfg.model_config(), &mut rng);
    model.load_checkpoint(&summary.checkpoint).unwrap();
    let images: Vec<_> = eval_scenes.iter().map(|s| s.image.clone()).collect();
    let dets = inference_pipeline(&model, &cfg.cascade_config(), &images);
    let gts: Vec<Vec<BBox>> = eval_scenes.iter().map(|s| s.gts.clone()).collect();
    let n_dets: usize = dets.iter().map(|d| d.len()).sum();
    let n_gts: usize = gts.iter().map(|g| g.len()).sum();
    let report = evaluate(&dets, &gts, f64::NAN);
    eprintln!("dets={n_dets} gts={n_gts} {}", report.summary_line());

    // per-gt best anchor probability on a few TRAIN scenes
    let train_scenes = generate(cfg.seed, 3, cfg.image_size, &cfg.scale_mix, &cfg.aspect_mix, &cfg.scene_params());
    let cc = cfg.cascade_config();
    let anchors = model.anchors_for(cfg.image_size, cfg.image_size);
    for (si, sc) in train_scenes.iter().enumerate() {
        let pyr = model.features(&sc.image);
        let preds = model.heads(&pyr, &cc.stc_levels, &cc.str_levels);
        let cands = tinydet::cascade::collect_candidates(&preds, &anchors, &cc, (cfg.image_size, cfg.image_size));
        for gt in &sc.gts {
            let best = cands.iter().map(|d| (tinydet::boxgeom::iou(&d.bbox, gt), d.score))
                .filter(|(i, _)| *i >= 0.3)
                .fold((0.0f64, 0.0f64), |a, b| if b.1 > a.1 { b } else { a });
            eprintln!("  scene {si} gt {:.0}x{:.0}: best cand iou={:.2} score={:.3}", gt.width(), gt.height(), best.0, best.1);
        }
        // feature magnitude probe
        let p0 = pyr.p[0].to_vec();
        let rms = (p0.iter().map(|v| (v*v) as f64).sum::<f64>() / p0.len() as f64).sqrt();
        eprintln!("  scene {si}: P0 rms {:.4}", rms);
    }
}

// debug helper appended during calibration
