//! Flat `key = value` run configuration: one file drives generation,
//! model topology, cascade selection, training and evaluation, which
//! keeps ablation configs diffable. Unknown keys are errors, values are
//! typed, and serialization round-trips losslessly.

use std::path::Path;

use crate::cascade::CascadeConfig;
use crate::error::{Error, Result};
use crate::netarch::ModelConfig;
use crate::trainloop::{Toggles, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,
    pub out_dir: String,
    // data
    pub image_size: usize,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub eval_seed: u64,
    pub scale_mix: [f64; 3],
    pub aspect_mix: Vec<f64>,
    pub min_objects: usize,
    pub max_objects: usize,
    pub clutter: usize,
    /// Apply the training-time augmentation pipeline.
    pub augment_enabled: bool,
    // model
    pub strides: Vec<usize>,
    pub channels: usize,
    pub head_depth: usize,
    pub fsm_channels: usize,
    pub anchor_aspect: f64,
    // module toggles
    pub str_enabled: bool,
    pub stc_enabled: bool,
    pub sml_enabled: bool,
    pub fsm_enabled: bool,
    pub rfe_enabled: bool,
    // cascade
    pub str_levels: Vec<usize>,
    pub stc_levels: Vec<usize>,
    pub stc_threshold: f64,
    pub step1_neg_iou: f64,
    pub step1_pos_iou: f64,
    pub step2_neg_iou: f64,
    pub step2_pos_iou: f64,
    pub sml_alpha: f64,
    pub fsm_max_proposals: usize,
    pub fsm_pre_nms_top_k: usize,
    // optimization
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub milestone1: usize,
    pub milestone2: usize,
    pub lr_warmup_start: f64,
    pub lr_peak: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm cap before each update; 0 disables.
    pub grad_clip_norm: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            threads: 1,
            out_dir: "runs/default".to_string(),
            image_size: 128,
            train_scenes: 500,
            eval_scenes: 100,
            eval_seed: 900_001,
            scale_mix: [0.4, 0.4, 0.2],
            aspect_mix: vec![0.7, 0.9, 1.0, 1.25, 1.6, 2.5],
            min_objects: 1,
            max_objects: 4,
            clutter: 8,
            augment_enabled: true,
            strides: vec![4, 8, 16],
            channels: 16,
            head_depth: 2,
            fsm_channels: 64,
            anchor_aspect: 1.25,
            str_enabled: true,
            stc_enabled: true,
            sml_enabled: true,
            fsm_enabled: true,
            rfe_enabled: true,
            str_levels: vec![1, 2],
            stc_levels: vec![0, 1],
            stc_threshold: 0.99,
            step1_neg_iou: 0.3,
            step1_pos_iou: 0.7,
            step2_neg_iou: 0.4,
            step2_pos_iou: 0.5,
            sml_alpha: 15.0,
            fsm_max_proposals: 512,
            fsm_pre_nms_top_k: 32,
            batch_size: 16,
            epochs: 30,
            warmup_epochs: 5,
            milestone1: 20,
            milestone2: 26,
            lr_warmup_start: 3.125e-4,
            lr_peak: 1e-2,
            momentum: 0.9,
            weight_decay: 1e-4,
            grad_clip_norm: 10.0,
        }
    }
}

macro_rules! config_keys {
    ($($key:ident : $kind:ident),* $(,)?) => {
        /// Apply one `key = value` pair.
        fn apply(cfg: &mut RunConfig, key: &str, value: &str) -> std::result::Result<(), String> {
            match key {
                $(stringify!($key) => parse_into!(cfg.$key, $kind, value, stringify!($key)),)*
                _ => return Err(format!("unknown key '{key}'")),
            }
            Ok(())
        }

        /// Canonical serialization, one line per key in declaration order.
        pub fn serialize(cfg: &RunConfig) -> String {
            let mut out = String::new();
            $(out.push_str(&format!("{} = {}\n", stringify!($key), emit!(cfg.$key, $kind)));)*
            out
        }
    };
}

macro_rules! parse_into {
    ($slot:expr, u64, $v:expr, $k:expr) => {
        $slot = $v.parse::<u64>().map_err(|_| format!("{}: expected an integer, got '{}'", $k, $v))?
    };
    ($slot:expr, usize, $v:expr, $k:expr) => {
        $slot =
            $v.parse::<usize>().map_err(|_| format!("{}: expected an integer, got '{}'", $k, $v))?
    };
    ($slot:expr, f64, $v:expr, $k:expr) => {
        $slot = $v.parse::<f64>().map_err(|_| format!("{}: expected a number, got '{}'", $k, $v))?
    };
    ($slot:expr, bool, $v:expr, $k:expr) => {
        $slot = match $v {
            "true" => true,
            "false" => false,
            other => return Err(format!("{}: expected true or false, got '{}'", $k, other)),
        }
    };
    ($slot:expr, string, $v:expr, $k:expr) => {
        $slot = $v.to_string()
    };
    ($slot:expr, usize_list, $v:expr, $k:expr) => {
        $slot = parse_list::<usize>($v).map_err(|e| format!("{}: {}", $k, e))?
    };
    ($slot:expr, f64_list, $v:expr, $k:expr) => {
        $slot = parse_list::<f64>($v).map_err(|e| format!("{}: {}", $k, e))?
    };
    ($slot:expr, f64_mix3, $v:expr, $k:expr) => {{
        let items = parse_list::<f64>($v).map_err(|e| format!("{}: {}", $k, e))?;
        if items.len() != 3 {
            return Err(format!("{}: expected exactly 3 weights, got {}", $k, items.len()));
        }
        $slot = [items[0], items[1], items[2]];
    }};
}

macro_rules! emit {
    ($slot:expr, u64) => {
        format!("{}", $slot)
    };
    ($slot:expr, usize) => {
        format!("{}", $slot)
    };
    ($slot:expr, f64) => {
        emit_f64($slot)
    };
    ($slot:expr, bool) => {
        format!("{}", $slot)
    };
    ($slot:expr, string) => {
        $slot.clone()
    };
    ($slot:expr, usize_list) => {
        emit_list(&$slot.iter().map(|v| format!("{v}")).collect::<Vec<_>>())
    };
    ($slot:expr, f64_list) => {
        emit_list(&$slot.iter().map(|v| emit_f64(*v)).collect::<Vec<_>>())
    };
    ($slot:expr, f64_mix3) => {
        emit_list(&$slot.iter().map(|v| emit_f64(*v)).collect::<Vec<_>>())
    };
}

config_keys! {
    seed: u64,
    threads: usize,
    out_dir: string,
    image_size: usize,
    train_scenes: usize,
    eval_scenes: usize,
    eval_seed: u64,
    scale_mix: f64_mix3,
    aspect_mix: f64_list,
    min_objects: usize,
    max_objects: usize,
    clutter: usize,
    augment_enabled: bool,
    strides: usize_list,
    channels: usize,
    head_depth: usize,
    fsm_channels: usize,
    anchor_aspect: f64,
    str_enabled: bool,
    stc_enabled: bool,
    sml_enabled: bool,
    fsm_enabled: bool,
    rfe_enabled: bool,
    str_levels: usize_list,
    stc_levels: usize_list,
    stc_threshold: f64,
    step1_neg_iou: f64,
    step1_pos_iou: f64,
    step2_neg_iou: f64,
    step2_pos_iou: f64,
    sml_alpha: f64,
    fsm_max_proposals: usize,
    fsm_pre_nms_top_k: usize,
    batch_size: usize,
    epochs: usize,
    warmup_epochs: usize,
    milestone1: usize,
    milestone2: usize,
    lr_warmup_start: f64,
    lr_peak: f64,
    momentum: f64,
    weight_decay: f64,
    grad_clip_norm: f64,
}

fn emit_f64(v: f64) -> String {
    // Shortest representation that parses back to the same bits.
    let s = format!("{v}");
    debug_assert_eq!(s.parse::<f64>().unwrap().to_bits(), v.to_bits());
    s
}

fn emit_list(items: &[String]) -> String {
    format!("[{}]", items.join(","))
}

fn parse_list<T: std::str::FromStr>(v: &str) -> std::result::Result<Vec<T>, String> {
    let inner = v
        .strip_prefix('[')
        .and_then(|s| s.strip_suffix(']'))
        .ok_or_else(|| format!("expected a [a,b,...] list, got '{v}'"))?;
    let trimmed = inner.trim();
    if trimmed.is_empty() {
        return Ok(Vec::new());
    }
    trimmed
        .split(',')
        .map(|item| {
            item.trim().parse::<T>().map_err(|_| format!("bad list element '{}'", item.trim()))
        })
        .collect()
}

impl RunConfig {
    /// Parse a whole config file; every line is `key = value`, `#` starts
    /// a comment. Unknown keys and malformed values are reported with
    /// their line number.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(i + 1, format!("expected 'key = value', got '{line}'")))?;
            apply(&mut cfg, key.trim(), value.trim()).map_err(|msg| Error::config(i + 1, msg))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        RunConfig::parse(&text)
    }

    pub fn to_text(&self) -> String {
        serialize(self)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path.display().to_string(), e))
    }

    /// Apply one `KEY=VALUE` override.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (key, value) = spec.split_once('=').ok_or_else(|| {
            Error::Config { line: None, message: format!("override '{spec}' is not KEY=VALUE") }
        })?;
        apply(self, key.trim(), value.trim())
            .map_err(|message| Error::Config { line: None, message })
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config { line: None, message: msg });
        if self.threads == 0 {
            return fail("threads must be at least 1".into());
        }
        if self.min_objects > self.max_objects {
            return fail(format!(
                "min_objects {} exceeds max_objects {}",
                self.min_objects, self.max_objects
            ));
        }
        if self.image_size % self.strides.last().copied().unwrap_or(1) != 0 {
            return fail(format!(
                "image_size {} must be divisible by the maximum stride {}",
                self.image_size,
                self.strides.last().copied().unwrap_or(1)
            ));
        }
        if let Err(msg) = self.model_config().validate() {
            return fail(msg);
        }
        if let Err(msg) = self.cascade_config().validate() {
            return fail(msg);
        }
        let levels = self.strides.len();
        for (name, set) in [("str_levels", &self.str_levels), ("stc_levels", &self.stc_levels)] {
            if let Some(&bad) = set.iter().find(|&&l| l >= levels) {
                return fail(format!("{name} references level {bad}, but only {levels} exist"));
            }
        }
        if let Err(msg) = self.train_config().validate() {
            return fail(msg);
        }
        Ok(())
    }

    /// Model topology with the rfe/fsm toggles applied.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            strides: self.strides.clone(),
            channels: self.channels,
            head_depth: self.head_depth,
            rfe_enabled: self.rfe_enabled,
            fsm_enabled: self.fsm_enabled,
            fsm_channels: self.fsm_channels,
            anchor_aspect: self.anchor_aspect,
        }
    }

    /// Cascade selection with the str/stc/sml toggles applied: a
    /// disabled module degenerates to the baseline (empty level set,
    /// zero margin).
    pub fn cascade_config(&self) -> CascadeConfig {
        CascadeConfig {
            str_levels: if self.str_enabled { self.str_levels.clone() } else { Vec::new() },
            stc_levels: if self.stc_enabled { self.stc_levels.clone() } else { Vec::new() },
            stc_threshold: self.stc_threshold,
            step1_thresholds: (self.step1_neg_iou, self.step1_pos_iou),
            step2_thresholds: (self.step2_neg_iou, self.step2_pos_iou),
            sml_alpha: if self.sml_enabled { self.sml_alpha } else { 0.0 },
            fsm_max_proposals: self.fsm_max_proposals,
            fsm_pre_nms_top_k: self.fsm_pre_nms_top_k,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            epochs: self.epochs,
            warmup_epochs: self.warmup_epochs,
            milestones: (self.milestone1, self.milestone2),
            lr_warmup_start: self.lr_warmup_start,
            lr_peak: self.lr_peak,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            grad_clip_norm: self.grad_clip_norm,
            seed: self.seed,
            toggles: Toggles {
                str_on: self.str_enabled,
                stc_on: self.stc_enabled,
                sml_on: self.sml_enabled,
                fsm_on: self.fsm_enabled,
                rfe_on: self.rfe_enabled,
            },
        }
    }

    pub fn scene_params(&self) -> crate::synthdata::SceneParams {
        crate::synthdata::SceneParams {
            min_objects: self.min_objects,
            max_objects: self.max_objects,
            clutter: self.clutter,
        }
    }
}
