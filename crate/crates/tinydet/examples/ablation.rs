//! Miniature mechanism ablation: train the baseline, each mechanism
//! alone, and everything together, then tabulate AP deltas. Uses a small
//! configuration so the seven runs finish in a few minutes.
//!
//!     cargo run --release --example ablation

use tinydet::cli::cmd_ablate;
use tinydet::config::RunConfig;

fn main() {
    let mut cfg = RunConfig::default();
    cfg.train_scenes = 100;
    cfg.eval_scenes = 60;
    cfg.image_size = 96;
    cfg.batch_size = 8;
    cfg.epochs = 16;
    cfg.warmup_epochs = 2;
    cfg.milestone1 = 11;
    cfg.milestone2 = 14;
    cfg.fsm_pre_nms_top_k = 16;

    let out = std::env::temp_dir().join("tinydet_example_ablation");
    cmd_ablate(&cfg, &out).expect("ablation failed");
    println!("table written to {}", out.join("ablation.txt").display());
}
