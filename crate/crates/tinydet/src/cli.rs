//! Command-line entry point: `train`, `eval`, `ablate` and `generate`
//! subcommands over one flat configuration file.
//!
//! Every command is deterministic under a fixed seed; `--threads` above 1
//! is allowed only where the work is embarrassingly parallel per item
//! (scene generation and per-image evaluation).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::autodiff::checkpoint;
use crate::boxgeom::{write_detection_dump, BBox, Detection};
use crate::cascade::{detect_image, observe_image_stats, CascadeConfig};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evalkit::{evaluate, EvalReport};
use crate::netarch::{Detector, ModelConfig};
use crate::rng::Rng;
use crate::synthdata::{export_scenes, generate_parallel, Scene};
use crate::trainloop::{train, Toggles};

const USAGE: &str = "\
tinydet - desk-scale two-step refinement detector on synthetic scenes

USAGE:
    tinydet <COMMAND> [OPTIONS]

COMMANDS:
    train       train a detector, write checkpoint + metrics
    eval        evaluate a checkpoint on a generated scene set
    ablate      toggle each mechanism and tabulate AP deltas
    generate    export scenes as PPM images with a ground-truth sidecar

OPTIONS:
    --config PATH         run configuration file (flat key = value)
    --seed N              train/generate: run seed; eval: dataset seed
    --override KEY=VALUE  override one config key (repeatable)
    --out DIR             output directory (default: out_dir key)
    --threads N           worker threads; >1 only for generate and eval
    --checkpoint PATH     eval: checkpoint to load (default OUT/model.ckpt)
";

#[derive(Debug, PartialEq, Eq, Clone, Copy)]
enum Command {
    Train,
    Eval,
    Ablate,
    Generate,
}

struct CliArgs {
    command: Command,
    config: Option<PathBuf>,
    seed: Option<u64>,
    overrides: Vec<String>,
    out: Option<PathBuf>,
    threads: Option<usize>,
    checkpoint: Option<PathBuf>,
}

fn parse_args(args: &[String]) -> Result<CliArgs> {
    let usage = |msg: String| Error::Invalid(format!("{msg}\n\n{USAGE}"));
    let command = match args.first().map(String::as_str) {
        Some("train") => Command::Train,
        Some("eval") => Command::Eval,
        Some("ablate") => Command::Ablate,
        Some("generate") => Command::Generate,
        Some(other) => return Err(usage(format!("unknown command '{other}'"))),
        None => return Err(usage("a command is required".to_string())),
    };
    let mut out = CliArgs {
        command,
        config: None,
        seed: None,
        overrides: Vec::new(),
        out: None,
        threads: None,
        checkpoint: None,
    };
    let mut iter = args[1..].iter();
    while let Some(flag) = iter.next() {
        let mut value = |name: &str| {
            iter.next().cloned().ok_or_else(|| usage(format!("{name} needs a value")))
        };
        match flag.as_str() {
            "--config" => out.config = Some(PathBuf::from(value("--config")?)),
            "--seed" => {
                let v = value("--seed")?;
                out.seed = Some(
                    v.parse::<u64>()
                        .map_err(|_| usage(format!("--seed expects an integer, got '{v}'")))?,
                );
            }
            "--override" => out.overrides.push(value("--override")?),
            "--out" => out.out = Some(PathBuf::from(value("--out")?)),
            "--threads" => {
                let v = value("--threads")?;
                out.threads = Some(
                    v.parse::<usize>()
                        .map_err(|_| usage(format!("--threads expects an integer, got '{v}'")))?,
                );
            }
            "--checkpoint" => out.checkpoint = Some(PathBuf::from(value("--checkpoint")?)),
            other => return Err(usage(format!("unknown option '{other}'"))),
        }
    }
    Ok(out)
}

fn resolve_config(args: &CliArgs) -> Result<(RunConfig, PathBuf)> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for spec in &args.overrides {
        cfg.apply_override(spec)?;
    }
    if let Some(seed) = args.seed {
        // For eval the seed names the dataset; elsewhere it is the run seed.
        if args.command == Command::Eval {
            cfg.eval_seed = seed;
        } else {
            cfg.seed = seed;
        }
    }
    if let Some(threads) = args.threads {
        cfg.threads = threads;
    }
    cfg.validate()?;
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.out_dir));
    Ok((cfg, out))
}

/// Run the CLI; returns the process exit code.
pub fn run(args: &[String]) -> i32 {
    match dispatch(args) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            1
        }
    }
}

fn dispatch(args: &[String]) -> Result<()> {
    let parsed = parse_args(args)?;
    let (cfg, out) = resolve_config(&parsed)?;
    match parsed.command {
        Command::Train => cmd_train(&cfg, &out),
        Command::Eval => cmd_eval(&cfg, &out, parsed.checkpoint.as_deref()),
        Command::Ablate => cmd_ablate(&cfg, &out),
        Command::Generate => cmd_generate(&cfg, &out),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))
}

/// Train end to end and echo the resolved configuration plus a topology
/// report next to the checkpoint.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<()> {
    if cfg.threads > 1 {
        return Err(Error::Invalid(
            "--threads above 1 is only permitted for generate and eval; training is \
             single-threaded for determinism"
                .to_string(),
        ));
    }
    ensure_dir(out)?;
    cfg.save(&out.join("config.txt"))?;
    let summary = train(cfg, out)?;
    write_run_report(cfg, out, &summary.epoch_loss)?;
    println!(
        "trained {} steps; checkpoint {} metrics {}",
        summary.steps,
        summary.checkpoint.display(),
        summary.metrics.display()
    );
    if let Some(report) = summary.final_loss {
        println!(
            "final losses: str={:.4} stc={:.4} fsm={:.4} total={:.4}",
            report.str_loss, report.stc_loss, report.fsm_loss, report.total
        );
    }
    Ok(())
}

fn write_run_report(cfg: &RunConfig, out: &Path, epoch_loss: &[f64]) -> Result<()> {
    let model_cfg = cfg.model_config();
    let mut rng = Rng::new(0);
    let probe = Detector::<f32>::new(&model_cfg, &mut rng);
    let n_params: usize = probe.named_parameters().iter().map(|(_, t)| t.numel()).sum();
    let mut s = String::new();
    s.push_str("# run report\n");
    let _ = writeln!(s, "strides = {:?}", model_cfg.strides);
    let _ = writeln!(s, "channels = {}", model_cfg.channels);
    let _ = writeln!(s, "head_depth = {}", model_cfg.head_depth);
    let _ = writeln!(s, "rfe_enabled = {}", model_cfg.rfe_enabled);
    let _ = writeln!(s, "fsm_enabled = {}", model_cfg.fsm_enabled);
    let _ = writeln!(s, "parameters = {n_params}");
    for (epoch, loss) in epoch_loss.iter().enumerate() {
        let _ = writeln!(s, "epoch_{epoch}_mean_total = {loss:.6}");
    }
    let path = out.join("run_report.txt");
    std::fs::write(&path, s).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Detections for a list of scenes; above one thread each worker
/// replicates the model from the checkpoint records, and results merge
/// in image order so the output never depends on the thread count.
pub fn detect_scenes(
    model_cfg: &ModelConfig,
    cascade: &CascadeConfig,
    records: &[checkpoint::Record],
    scenes: &[Scene],
    threads: usize,
) -> Result<Vec<Vec<Detection>>> {
    if threads <= 1 || scenes.len() < 2 {
        let mut rng = Rng::new(0);
        let model = Detector::<f32>::new(model_cfg, &mut rng);
        model.apply_records(records)?;
        return Ok(scenes.iter().map(|s| detect_image(&model, cascade, &s.image)).collect());
    }
    let raw: Vec<(Vec<f32>, usize, usize)> = scenes
        .iter()
        .map(|s| {
            let (h, w) = s.size();
            (s.image.to_vec(), h, w)
        })
        .collect();
    let chunk = raw.len().div_ceil(threads);
    let mut merged: Vec<Vec<Detection>> = vec![Vec::new(); raw.len()];
    let mut worker_error: Option<Error> = None;
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for t in 0..threads {
            let lo = t * chunk;
            let hi = ((t + 1) * chunk).min(raw.len());
            if lo >= hi {
                break;
            }
            let slice = &raw[lo..hi];
            handles.push((
                lo,
                scope.spawn(move || -> Result<Vec<Vec<Detection>>> {
                    let mut rng = Rng::new(0);
                    let model = Detector::<f32>::new(model_cfg, &mut rng);
                    model.apply_records(records)?;
                    Ok(slice
                        .iter()
                        .map(|(data, h, w)| {
                            let image = crate::autodiff::Tensor::from_vec(&[3, *h, *w], data.clone());
                            detect_image(&model, cascade, &image)
                        })
                        .collect())
                }),
            ));
        }
        for (lo, handle) in handles {
            match handle.join().expect("eval worker panicked") {
                Ok(results) => {
                    for (i, dets) in results.into_iter().enumerate() {
                        merged[lo + i] = dets;
                    }
                }
                Err(e) => worker_error = Some(e),
            }
        }
    });
    match worker_error {
        Some(e) => Err(e),
        None => Ok(merged),
    }
}

/// Shared by eval and ablate: generate the eval set, run inference, and
/// build the report.
fn evaluate_checkpoint(
    cfg: &RunConfig,
    checkpoint_path: &Path,
) -> Result<(EvalReport, Vec<Vec<Detection>>, Vec<Vec<BBox>>)> {
    let records = checkpoint::load(checkpoint_path)?;
    let model_cfg = cfg.model_config();
    let cascade = cfg.cascade_config();
    let scenes = generate_parallel(
        cfg.eval_seed,
        cfg.eval_scenes,
        cfg.image_size,
        &cfg.scale_mix,
        &cfg.aspect_mix,
        &cfg.scene_params(),
        cfg.threads,
    );
    let dets = detect_scenes(&model_cfg, &cascade, &records, &scenes, cfg.threads)?;
    let gts: Vec<Vec<BBox>> = scenes.iter().map(|s| s.gts.clone()).collect();

    // Observed anchor imbalance after filtering, aggregated over images.
    let mut rng = Rng::new(0);
    let model = Detector::<f32>::new(&model_cfg, &mut rng);
    model.apply_records(&records)?;
    let anchors = model.anchors_for(cfg.image_size, cfg.image_size);
    let (mut pos, mut neg) = (0usize, 0usize);
    for scene in &scenes {
        let pyramid = model.features(&scene.image);
        let preds = model.heads(&pyramid, &cascade.stc_levels, &cascade.str_levels);
        let stats = observe_image_stats(&preds, &anchors, &scene.gts, &cascade);
        pos += stats.pos_after;
        neg += stats.neg_after;
    }
    let ratio = if neg == 0 { f64::INFINITY } else { pos as f64 / neg as f64 };
    Ok((evaluate(&dets, &gts, ratio), dets, gts))
}

pub fn cmd_eval(cfg: &RunConfig, out: &Path, checkpoint_path: Option<&Path>) -> Result<()> {
    ensure_dir(out)?;
    let default_ckpt = out.join("model.ckpt");
    let ckpt = checkpoint_path.unwrap_or(&default_ckpt);
    let (report, dets, _) = evaluate_checkpoint(cfg, ckpt)?;
    write_detection_dump(&out.join("detections.txt"), &dets)?;
    report.write(&out.join("eval_report.txt"))?;
    report.write_pr_curve(&out.join("pr_curve.txt"))?;
    println!("{}", report.summary_line());
    Ok(())
}

/// The toggle table: baseline, each mechanism alone, and everything on.
pub fn ablation_rows() -> Vec<(&'static str, Toggles)> {
    let base = Toggles::all_off();
    vec![
        ("baseline", base),
        ("+str", Toggles { str_on: true, ..base }),
        ("+stc", Toggles { stc_on: true, ..base }),
        ("+rfe", Toggles { rfe_on: true, ..base }),
        ("+sml", Toggles { sml_on: true, ..base }),
        ("+fsm", Toggles { fsm_on: true, ..base }),
        ("all-on", Toggles::all_on()),
    ]
}

fn with_toggles(cfg: &RunConfig, toggles: Toggles) -> RunConfig {
    let mut c = cfg.clone();
    c.str_enabled = toggles.str_on;
    c.stc_enabled = toggles.stc_on;
    c.sml_enabled = toggles.sml_on;
    c.fsm_enabled = toggles.fsm_on;
    c.rfe_enabled = toggles.rfe_on;
    c
}

pub fn cmd_ablate(cfg: &RunConfig, out: &Path) -> Result<()> {
    if cfg.threads > 1 {
        return Err(Error::Invalid(
            "--threads above 1 is only permitted for generate and eval; ablation trains \
             single-threaded for determinism"
                .to_string(),
        ));
    }
    ensure_dir(out)?;
    let mut results: Vec<(&'static str, Toggles, f64, f64)> = Vec::new();
    for (name, toggles) in ablation_rows() {
        let row_cfg = with_toggles(cfg, toggles);
        let row_out = out.join(name.trim_start_matches('+'));
        ensure_dir(&row_out)?;
        let summary = train(&row_cfg, &row_out)?;
        let (report, _, _) = evaluate_checkpoint(&row_cfg, &summary.checkpoint)?;
        results.push((name, toggles, report.ap_at(0.5), report.ap_at(0.7)));
        println!("{name}: {}", report.summary_line());
    }
    let table = format_ablation_table(&results);
    print!("{table}");
    let path = out.join("ablation.txt");
    std::fs::write(&path, table).map_err(|e| Error::io(path.display().to_string(), e))
}

fn format_ablation_table(results: &[(&str, Toggles, f64, f64)]) -> String {
    let baseline_ap = results.first().map(|r| r.2).unwrap_or(0.0);
    let mark = |on: bool| if on { 'x' } else { '.' };
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<10} {:>3} {:>3} {:>3} {:>3} {:>3} {:>9} {:>9} {:>9}",
        "config", "STR", "STC", "RFE", "SML", "FSM", "ap@0.50", "ap@0.70", "delta"
    );
    for (name, t, ap50, ap70) in results {
        let _ = writeln!(
            s,
            "{:<10} {:>3} {:>3} {:>3} {:>3} {:>3} {:>9.4} {:>9.4} {:>+9.4}",
            name,
            mark(t.str_on),
            mark(t.stc_on),
            mark(t.rfe_on),
            mark(t.sml_on),
            mark(t.fsm_on),
            ap50,
            ap70,
            ap50 - baseline_ap
        );
    }
    s
}

pub fn cmd_generate(cfg: &RunConfig, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    let scenes = generate_parallel(
        cfg.seed,
        cfg.train_scenes,
        cfg.image_size,
        &cfg.scale_mix,
        &cfg.aspect_mix,
        &cfg.scene_params(),
        cfg.threads,
    );
    let dir = out.join("scenes");
    export_scenes(&dir, &scenes)?;
    let gts: usize = scenes.iter().map(|s| s.gts.len()).sum();
    println!("wrote {} scenes ({gts} ground truths) to {}", scenes.len(), dir.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn arg_parsing_covers_flags() {
        let args = s(&[
            "train",
            "--config",
            "run.cfg",
            "--seed",
            "9",
            "--override",
            "stc_levels=[]",
            "--override",
            "epochs=2",
            "--out",
            "tmp",
            "--threads",
            "3",
        ]);
        let parsed = parse_args(&args).unwrap();
        assert_eq!(parsed.command, Command::Train);
        assert_eq!(parsed.seed, Some(9));
        assert_eq!(parsed.overrides.len(), 2);
        assert_eq!(parsed.threads, Some(3));
        assert!(parse_args(&s(&["frobnicate"])).is_err());
        assert!(parse_args(&s(&[])).is_err());
        assert!(parse_args(&s(&["train", "--seed"])).is_err());
    }

    #[test]
    fn overrides_apply_in_order_and_seed_wins() {
        let args = parse_args(&s(&[
            "train",
            "--override",
            "seed=5",
            "--override",
            "epochs=0",
            "--seed",
            "11",
        ]))
        .unwrap();
        let (cfg, _) = resolve_config(&args).unwrap();
        assert_eq!(cfg.seed, 11, "--seed wins over overrides");
        assert_eq!(cfg.epochs, 0);
    }

    #[test]
    fn eval_seed_flag_names_the_dataset() {
        let args = parse_args(&s(&["eval", "--seed", "42"])).unwrap();
        let (cfg, _) = resolve_config(&args).unwrap();
        assert_eq!(cfg.eval_seed, 42);
        assert_eq!(cfg.seed, RunConfig::default().seed);
    }

    #[test]
    fn missing_config_file_names_the_path() {
        let args = parse_args(&s(&["train", "--config", "/no/such/run.cfg"])).unwrap();
        let err = resolve_config(&args).unwrap_err();
        assert!(format!("{err}").contains("/no/such/run.cfg"));
    }

    #[test]
    fn train_rejects_multiple_threads() {
        let mut cfg = RunConfig::default();
        cfg.threads = 4;
        let err = cmd_train(&cfg, Path::new("/tmp/tinydet_nope")).unwrap_err();
        assert!(format!("{err}").contains("generate and eval"));
    }

    #[test]
    fn ablation_has_seven_rows_with_baseline_first() {
        let rows = ablation_rows();
        assert_eq!(rows.len(), 7);
        assert_eq!(rows[0].0, "baseline");
        assert_eq!(rows[0].1, Toggles::all_off());
        assert_eq!(rows[6].1, Toggles::all_on());
        // Each single-toggle row flips exactly one switch.
        for (_, t) in &rows[1..6] {
            let flips = [t.str_on, t.stc_on, t.sml_on, t.fsm_on, t.rfe_on]
                .iter()
                .filter(|&&b| b)
                .count();
            assert_eq!(flips, 1);
        }
    }

    #[test]
    fn ablation_table_is_well_formed() {
        let rows = ablation_rows();
        let results: Vec<(&str, Toggles, f64, f64)> =
            rows.iter().enumerate().map(|(i, (n, t))| (*n, *t, 0.5 + i as f64 * 0.01, 0.3)).collect();
        let table = format_ablation_table(&results);
        assert_eq!(table.lines().count(), 8, "header plus seven rows");
        assert!(table.contains("baseline"));
        assert!(table.contains("all-on"));
        assert!(table.contains("+0.0600"));
    }
}
