//! Black-box tests of the command-line interface, driving the compiled
//! binary the way a user would.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tinydet::boxgeom::read_detection_dump;
use tinydet::config::RunConfig;
use tinydet::evalkit::compute_ap;
use tinydet::synthdata::generate;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tinydet"))
}

fn tmp(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("tinydet_cli_{tag}"));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

/// A configuration small enough that one training run takes a second.
fn micro_config() -> String {
    "\
image_size = 48
train_scenes = 6
eval_scenes = 5
channels = 8
head_depth = 1
fsm_channels = 8
fsm_pre_nms_top_k = 6
batch_size = 4
epochs = 4
warmup_epochs = 1
milestone1 = 2
milestone2 = 3
"
    .to_string()
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.cfg");
    std::fs::write(&path, micro_config() + extra).unwrap();
    path
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().unwrap();
    assert!(
        out.status.success(),
        "command {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn run_fail(args: &[&str]) -> Output {
    let out = bin().args(args).output().unwrap();
    assert!(!out.status.success(), "command {:?} unexpectedly succeeded", args);
    out
}

#[test]
fn train_twice_produces_identical_checkpoints() {
    let dir = tmp("det");
    let cfg = write_config(&dir, "");
    let (out_a, out_b) = (dir.join("a"), dir.join("b"));
    run_ok(&["train", "--config", cfg.to_str().unwrap(), "--seed", "7", "--out", out_a.to_str().unwrap()]);
    run_ok(&["train", "--config", cfg.to_str().unwrap(), "--seed", "7", "--out", out_b.to_str().unwrap()]);
    let a = std::fs::read(out_a.join("model.ckpt")).unwrap();
    let b = std::fs::read(out_b.join("model.ckpt")).unwrap();
    assert_eq!(a, b, "same seed must give byte-identical checkpoints");
    // The resolved configuration is echoed and parses back.
    let echoed = RunConfig::load(&out_a.join("config.txt")).unwrap();
    assert_eq!(echoed.seed, 7);
    assert!(out_a.join("run_report.txt").exists());
}

#[test]
fn missing_config_file_is_a_clean_error() {
    let out = run_fail(&["train", "--config", "/nonexistent/path/run.cfg"]);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("/nonexistent/path/run.cfg"), "{stderr}");
}

#[test]
fn malformed_config_reports_the_line() {
    let dir = tmp("badcfg");
    let path = dir.join("bad.cfg");
    std::fs::write(&path, "seed = 1\nnot_a_real_key = 2\n").unwrap();
    let out = run_fail(&["train", "--config", path.to_str().unwrap()]);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("line 2"), "{stderr}");
    assert!(stderr.contains("not_a_real_key"), "{stderr}");
}

#[test]
fn empty_level_sets_equal_disabled_toggles() {
    // The selectivity contract via the CLI: clearing the level sets must
    // reproduce the toggles-off baseline bit for bit.
    let dir = tmp("selectivity");
    let cfg = write_config(&dir, "");
    let (out_a, out_b) = (dir.join("toggles"), dir.join("levels"));
    run_ok(&[
        "train", "--config", cfg.to_str().unwrap(), "--seed", "11",
        "--override", "str_enabled=false", "--override", "stc_enabled=false",
        "--out", out_a.to_str().unwrap(),
    ]);
    run_ok(&[
        "train", "--config", cfg.to_str().unwrap(), "--seed", "11",
        "--override", "str_levels=[]", "--override", "stc_levels=[]",
        "--out", out_b.to_str().unwrap(),
    ]);
    let a = std::fs::read(out_a.join("model.ckpt")).unwrap();
    let b = std::fs::read(out_b.join("model.ckpt")).unwrap();
    assert_eq!(a, b, "empty level sets must equal the one-step baseline");
}

#[test]
fn eval_is_deterministic_and_matches_the_library() {
    let dir = tmp("eval");
    let cfg_path = write_config(&dir, "");
    let out = dir.join("run");
    run_ok(&["train", "--config", cfg_path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let run1 = run_ok(&["eval", "--config", cfg_path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let report1 = std::fs::read(out.join("eval_report.txt")).unwrap();
    run_ok(&["eval", "--config", cfg_path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let report2 = std::fs::read(out.join("eval_report.txt")).unwrap();
    assert_eq!(report1, report2, "same dataset seed must give identical report bytes");
    let stdout = String::from_utf8_lossy(&run1.stdout);
    assert!(stdout.contains("ap@0.50="), "summary line printed: {stdout}");

    // CLI/library parity: recompute AP from the dump it wrote.
    let cfg = RunConfig::load(&cfg_path).unwrap();
    let dets = read_detection_dump(&out.join("detections.txt")).unwrap();
    let scenes = generate(
        cfg.eval_seed,
        cfg.eval_scenes,
        cfg.image_size,
        &cfg.scale_mix,
        &cfg.aspect_mix,
        &cfg.scene_params(),
    );
    let gts: Vec<_> = scenes.iter().map(|s| s.gts.clone()).collect();
    let mut padded = dets;
    padded.resize(gts.len(), Vec::new());
    let (ap, _) = compute_ap(&padded, &gts, 0.5);
    let report_text = String::from_utf8_lossy(&report1).to_string();
    let reported: f64 = report_text
        .lines()
        .find(|l| l.starts_with("ap@0.50"))
        .and_then(|l| l.split('=').nth(1))
        .unwrap()
        .trim()
        .parse()
        .unwrap();
    assert!((ap - reported).abs() < 1e-6, "library {ap} vs report {reported}");
}

#[test]
fn eval_requires_an_existing_compatible_checkpoint() {
    let dir = tmp("evalerr");
    let cfg = write_config(&dir, "");
    let out = dir.join("run");
    // No checkpoint at all.
    let fail = run_fail(&["eval", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(String::from_utf8_lossy(&fail.stderr).contains("model.ckpt"));
    // Incompatible topology.
    run_ok(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let fail = run_fail(&[
        "eval", "--config", cfg.to_str().unwrap(), "--override", "channels=12",
        "--out", out.to_str().unwrap(),
    ]);
    let stderr = String::from_utf8_lossy(&fail.stderr);
    assert!(stderr.contains("topology") || stderr.contains("shape"), "{stderr}");
}

#[test]
fn eval_parallel_matches_single_thread() {
    let dir = tmp("evalpar");
    let cfg = write_config(&dir, "eval_scenes = 8\n");
    let out = dir.join("run");
    run_ok(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    run_ok(&["eval", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let single = std::fs::read(out.join("detections.txt")).unwrap();
    run_ok(&[
        "eval", "--config", cfg.to_str().unwrap(), "--threads", "2",
        "--out", out.to_str().unwrap(),
    ]);
    let multi = std::fs::read(out.join("detections.txt")).unwrap();
    assert_eq!(single, multi, "thread count must not change per-image results");
}

#[test]
fn train_rejects_worker_threads() {
    let dir = tmp("threads");
    let cfg = write_config(&dir, "");
    let fail = run_fail(&[
        "train", "--config", cfg.to_str().unwrap(), "--threads", "2",
        "--out", dir.join("x").to_str().unwrap(),
    ]);
    assert!(String::from_utf8_lossy(&fail.stderr).contains("generate and eval"));
}

#[test]
fn generate_exports_scenes_and_sidecar() {
    let dir = tmp("generate");
    let cfg = write_config(&dir, "");
    let out = dir.join("data");
    run_ok(&[
        "generate", "--config", cfg.to_str().unwrap(), "--threads", "2",
        "--out", out.to_str().unwrap(),
    ]);
    let scenes = out.join("scenes");
    assert!(scenes.join("scene_0000.ppm").exists());
    let gt = std::fs::read_to_string(scenes.join("ground_truth.txt")).unwrap();
    assert!(gt.lines().all(|l| l.split_whitespace().count() == 5));

    // Thread count must not change the exported bytes.
    let out1 = dir.join("data1");
    run_ok(&["generate", "--config", cfg.to_str().unwrap(), "--out", out1.to_str().unwrap()]);
    let a = std::fs::read(scenes.join("scene_0000.ppm")).unwrap();
    let b = std::fs::read(out1.join("scenes").join("scene_0000.ppm")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn ablation_table_has_seven_rows_and_reproduces_the_pipeline() {
    let dir = tmp("ablate");
    let cfg_path = write_config(&dir, "train_scenes = 4\neval_scenes = 4\n");
    let out = dir.join("table");
    run_ok(&["ablate", "--config", cfg_path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let table = std::fs::read_to_string(out.join("ablation.txt")).unwrap();
    assert_eq!(table.lines().count(), 8, "header + 7 rows:\n{table}");
    assert!(table.lines().nth(1).unwrap().starts_with("baseline"));
    assert!(table.lines().last().unwrap().starts_with("all-on"));

    // The all-on row equals an independent train+eval composition.
    let all_on_ap: f64 = table
        .lines()
        .last()
        .unwrap()
        .split_whitespace()
        .nth(6)
        .unwrap()
        .parse()
        .unwrap();
    let solo = dir.join("solo");
    run_ok(&["train", "--config", cfg_path.to_str().unwrap(), "--out", solo.to_str().unwrap()]);
    let eval_out = run_ok(&["eval", "--config", cfg_path.to_str().unwrap(), "--out", solo.to_str().unwrap()]);
    let stdout = String::from_utf8_lossy(&eval_out.stdout);
    let solo_ap: f64 = stdout
        .split_whitespace()
        .find(|t| t.starts_with("ap@0.50="))
        .unwrap()
        .trim_start_matches("ap@0.50=")
        .parse()
        .unwrap();
    assert!(
        (all_on_ap - solo_ap).abs() < 5e-5,
        "ablation all-on row {all_on_ap} vs train+eval {solo_ap}"
    );
}
