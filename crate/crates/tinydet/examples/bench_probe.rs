// Scratch timing probe (dev aid).
use std::time::Instant;
use tinydet::autodiff::Tensor;
use tinydet::config::RunConfig;
use tinydet::netarch::Detector;
use tinydet::rng::Rng;
use tinydet::synthdata::generate;
use tinydet::trainloop::batch_forward;

fn main() {
    // conv microbench: 16->16 3x3 @ 32x32, stride 1 pad 1
    let mut rng = Rng::new(1);
    let x = Tensor::<f32>::param(&[1, 16, 32, 32], (0..16*32*32).map(|_| rng.normal() as f32).collect());
    let k = Tensor::<f32>::param(&[16, 16, 3, 3], (0..16*16*9).map(|_| rng.normal() as f32).collect());
    let reps = 200;
    let t0 = Instant::now();
    for _ in 0..reps {
        let y = x.conv2d(&k, 1, (1, 1));
        std::hint::black_box(y.to_vec());
    }
    let dt = t0.elapsed().as_secs_f64();
    let macs = (32*32*16*16*9) as f64 * reps as f64;
    println!("conv fwd: {:.2} GMAC/s", macs / dt / 1e9);

    let t0 = Instant::now();
    for _ in 0..reps {
        let y = x.conv2d(&k, 1, (1, 1)).sum();
        y.backward();
        x.zero_grad(); k.zero_grad();
    }
    let dt = t0.elapsed().as_secs_f64();
    println!("conv fwd+bwd: {:.2} GMAC/s (x3 counted)", 3.0 * macs / dt / 1e9);

    // full batch forward/backward, fsm on vs off
    let mut cfg = RunConfig::default();
    cfg.image_size = 96; cfg.channels = 16; cfg.head_depth = 2;
    let scenes = generate(3, 4, 96, &cfg.scale_mix, &cfg.aspect_mix, &cfg.scene_params());
    for fsm in [false, true] {
        let mut mrng = Rng::new(5);
        let mut mc = cfg.model_config();
        mc.fsm_enabled = fsm;
        let model = Detector::<f32>::new(&mc, &mut mrng);
        let anchors = model.anchors_for(96, 96);
        let cc = cfg.cascade_config();
        let refs: Vec<&tinydet::synthdata::Scene> = scenes.iter().collect();
        let t0 = Instant::now();
        for _ in 0..3 {
            let (total, _, _) = batch_forward(&model, &cc, &anchors, &refs, fsm);
            total.backward();
            for p in model.parameters() { p.zero_grad(); }
        }
        println!("batch of 4 images 96px fsm={fsm}: {:.0} ms/image", t0.elapsed().as_secs_f64() / 12.0 * 1e3);
    }
}
