//! Generate a handful of scenes and write them as PPM images next to a
//! ground-truth sidecar, to eyeball what the detector trains on.
//!
//!     cargo run --release --example generate_scenes

use tinydet::synthdata::{augment, export_scenes, generate, SceneParams};

fn main() {
    let size = 128;
    let scale_mix = [0.4, 0.4, 0.2];
    let aspect_mix = [0.4, 0.8, 1.0, 1.25, 2.5];
    let scenes = generate(11, 8, size, &scale_mix, &aspect_mix, &SceneParams::default());

    let out = std::env::temp_dir().join("tinydet_scenes");
    export_scenes(&out, &scenes).expect("export failed");
    for (i, s) in scenes.iter().enumerate() {
        println!("scene {i}: {} targets", s.gts.len());
        for g in &s.gts {
            println!("    {:6.1} x {:5.1} at ({:.1}, {:.1})", g.width(), g.height(), g.cx(), g.cy());
        }
    }

    // The training pipeline never sees a scene twice: same scene, two draws.
    let once = augment(&scenes[0], 1);
    let twice = augment(&scenes[0], 2);
    export_scenes(&out.join("augmented"), &[once, twice]).expect("export failed");
    println!("wrote images and ground_truth.txt under {}", out.display());
}
