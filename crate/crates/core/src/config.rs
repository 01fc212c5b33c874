//! Plain-text `key=value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys and
//! malformed values are rejected with their line number.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::data::ToyDataSpec;
use crate::error::{Error, Result};
use crate::optim::TrainSchedule;
use crate::prompt::{PromptConfig, PromptWeights};
use crate::ptq::LossWeights;
use crate::quantizer::BitConfig;
use crate::vit::{CalibrationOptions, QuantMode, ViTConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ViTConfig,
    pub bits: BitConfig,
    pub quantize_attn_probs: bool,
    pub calibration: CalibrationOptions,
    pub calib_samples: usize,
    pub loss: LossWeights,
    pub ptq: TrainSchedule,
    pub pretrain: TrainSchedule,
    pub data: ToyDataSpec,
    pub prompt: PromptConfig,
    pub prompt_m: usize,
    pub prompt_classes: usize,
    pub prompt_tokens: usize,
    pub prompt_semantic: usize,
    pub prompt_dim: usize,
    pub ckpt: Option<PathBuf>,
    pub data_dir: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ViTConfig::default(),
            bits: "W4A4".parse().expect("valid bit label"),
            quantize_attn_probs: true,
            calibration: CalibrationOptions::default(),
            calib_samples: 32,
            loss: LossWeights::default(),
            ptq: TrainSchedule::default(),
            pretrain: TrainSchedule {
                total_iters: 3000,
                warmup_iters: 300,
                base_lr: 3e-3,
                ..TrainSchedule::default()
            },
            data: ToyDataSpec::default(),
            prompt: PromptConfig::default(),
            prompt_m: 4,
            prompt_classes: 10,
            prompt_tokens: 6,
            prompt_semantic: 2,
            prompt_dim: 16,
            ckpt: None,
            data_dir: None,
            out: None,
            report: None,
        }
    }
}

fn val<T: FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("bad value {v:?} for {key}"))
}

fn path_str(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

impl RunConfig {
    /// Parses a config file over the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
                line: i + 1,
                msg: format!("expected key=value, got {line:?}"),
            })?;
            self.set(k.trim(), v.trim())
                .map_err(|msg| Error::Config { line: i + 1, msg })?;
        }
        Ok(())
    }

    /// Sets one key; the error names the problem but not the location.
    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        match key {
            "model.image_size" => self.model.image_size = val(key, v)?,
            "model.patch_size" => self.model.patch_size = val(key, v)?,
            "model.channels" => self.model.channels = val(key, v)?,
            "model.embed_dim" => self.model.embed_dim = val(key, v)?,
            "model.depth" => self.model.depth = val(key, v)?,
            "model.heads" => self.model.heads = val(key, v)?,
            "model.mlp_ratio" => self.model.mlp_ratio = val(key, v)?,
            "model.classes" => self.model.classes = val(key, v)?,
            "model.seed" => self.model.seed = val(key, v)?,
            "quant.bits" => self.bits = v.parse().map_err(|e| format!("{key}: {e}"))?,
            "quant.attn_probs" => self.quantize_attn_probs = val(key, v)?,
            "calib.act_lo" => self.calibration.act_pct.0 = val(key, v)?,
            "calib.act_hi" => self.calibration.act_pct.1 = val(key, v)?,
            "calib.rescale_lo" => self.calibration.rescale_pct.0 = val(key, v)?,
            "calib.rescale_hi" => self.calibration.rescale_pct.1 = val(key, v)?,
            "calib.samples" => self.calib_samples = val(key, v)?,
            "loss.lambda_feat" => self.loss.lambda_feat = val(key, v)?,
            "loss.lambda_kl" => self.loss.lambda_kl = val(key, v)?,
            "loss.lambda_reg" => self.loss.lambda_reg = val(key, v)?,
            "loss.tau" => self.loss.tau = val(key, v)?,
            "ptq.iters" => self.ptq.total_iters = val(key, v)?,
            "ptq.warmup" => self.ptq.warmup_iters = val(key, v)?,
            "ptq.lr" => self.ptq.base_lr = val(key, v)?,
            "ptq.refine_lr" => self.ptq.refine_lr = val(key, v)?,
            "ptq.batch_size" => self.ptq.batch_size = val(key, v)?,
            "ptq.seed" => self.ptq.seed = val(key, v)?,
            "pretrain.iters" => self.pretrain.total_iters = val(key, v)?,
            "pretrain.warmup" => self.pretrain.warmup_iters = val(key, v)?,
            "pretrain.lr" => self.pretrain.base_lr = val(key, v)?,
            "pretrain.batch_size" => self.pretrain.batch_size = val(key, v)?,
            "pretrain.seed" => self.pretrain.seed = val(key, v)?,
            "data.classes" => self.data.classes = val(key, v)?,
            "data.per_class" => self.data.per_class = val(key, v)?,
            "data.seed" => self.data.seed = val(key, v)?,
            "data.image_size" => self.data.image_size = val(key, v)?,
            "data.channels" => self.data.channels = val(key, v)?,
            "data.noise" => self.data.noise = val(key, v)?,
            "prompt.m" => self.prompt_m = val(key, v)?,
            "prompt.classes" => self.prompt_classes = val(key, v)?,
            "prompt.tokens" => self.prompt_tokens = val(key, v)?,
            "prompt.semantic" => self.prompt_semantic = val(key, v)?,
            "prompt.dim" => self.prompt_dim = val(key, v)?,
            "prompt.iters" => self.prompt.iters = val(key, v)?,
            "prompt.lr" => self.prompt.lr = val(key, v)?,
            "prompt.lambda_cls" => self.prompt.weights.cls = val(key, v)?,
            "prompt.lambda_orth" => self.prompt.weights.orth = val(key, v)?,
            "prompt.lambda_rgb" => self.prompt.weights.rgb = val(key, v)?,
            "prompt.lambda_feat" => self.prompt.weights.feat = val(key, v)?,
            "prompt.lambda_attn" => self.prompt.weights.attn = val(key, v)?,
            "prompt.reinit_every" => self.prompt.reinit_every = val(key, v)?,
            "prompt.threshold_factor" => self.prompt.threshold_factor = val(key, v)?,
            "prompt.freeze_semantic" => self.prompt.freeze_semantic = val(key, v)?,
            "prompt.seed" => self.prompt.seed = val(key, v)?,
            "path.ckpt" => self.ckpt = opt_path(v),
            "path.data" => self.data_dir = opt_path(v),
            "path.out" => self.out = opt_path(v),
            "path.report" => self.report = opt_path(v),
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Every key with its resolved value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let w = &self.prompt.weights;
        vec![
            ("model.image_size", m.image_size.to_string()),
            ("model.patch_size", m.patch_size.to_string()),
            ("model.channels", m.channels.to_string()),
            ("model.embed_dim", m.embed_dim.to_string()),
            ("model.depth", m.depth.to_string()),
            ("model.heads", m.heads.to_string()),
            ("model.mlp_ratio", m.mlp_ratio.to_string()),
            ("model.classes", m.classes.to_string()),
            ("model.seed", m.seed.to_string()),
            ("quant.bits", self.bits.label.clone()),
            ("quant.attn_probs", self.quantize_attn_probs.to_string()),
            ("calib.act_lo", format!("{:?}", self.calibration.act_pct.0)),
            ("calib.act_hi", format!("{:?}", self.calibration.act_pct.1)),
            ("calib.rescale_lo", format!("{:?}", self.calibration.rescale_pct.0)),
            ("calib.rescale_hi", format!("{:?}", self.calibration.rescale_pct.1)),
            ("calib.samples", self.calib_samples.to_string()),
            ("loss.lambda_feat", format!("{:?}", self.loss.lambda_feat)),
            ("loss.lambda_kl", format!("{:?}", self.loss.lambda_kl)),
            ("loss.lambda_reg", format!("{:?}", self.loss.lambda_reg)),
            ("loss.tau", format!("{:?}", self.loss.tau)),
            ("ptq.iters", self.ptq.total_iters.to_string()),
            ("ptq.warmup", self.ptq.warmup_iters.to_string()),
            ("ptq.lr", format!("{:?}", self.ptq.base_lr)),
            ("ptq.refine_lr", format!("{:?}", self.ptq.refine_lr)),
            ("ptq.batch_size", self.ptq.batch_size.to_string()),
            ("ptq.seed", self.ptq.seed.to_string()),
            ("pretrain.iters", self.pretrain.total_iters.to_string()),
            ("pretrain.warmup", self.pretrain.warmup_iters.to_string()),
            ("pretrain.lr", format!("{:?}", self.pretrain.base_lr)),
            ("pretrain.batch_size", self.pretrain.batch_size.to_string()),
            ("pretrain.seed", self.pretrain.seed.to_string()),
            ("data.classes", self.data.classes.to_string()),
            ("data.per_class", self.data.per_class.to_string()),
            ("data.seed", self.data.seed.to_string()),
            ("data.image_size", self.data.image_size.to_string()),
            ("data.channels", self.data.channels.to_string()),
            ("data.noise", format!("{:?}", self.data.noise)),
            ("prompt.m", self.prompt_m.to_string()),
            ("prompt.classes", self.prompt_classes.to_string()),
            ("prompt.tokens", self.prompt_tokens.to_string()),
            ("prompt.semantic", self.prompt_semantic.to_string()),
            ("prompt.dim", self.prompt_dim.to_string()),
            ("prompt.iters", self.prompt.iters.to_string()),
            ("prompt.lr", format!("{:?}", self.prompt.lr)),
            ("prompt.lambda_cls", format!("{:?}", w.cls)),
            ("prompt.lambda_orth", format!("{:?}", w.orth)),
            ("prompt.lambda_rgb", format!("{:?}", w.rgb)),
            ("prompt.lambda_feat", format!("{:?}", w.feat)),
            ("prompt.lambda_attn", format!("{:?}", w.attn)),
            ("prompt.reinit_every", self.prompt.reinit_every.to_string()),
            ("prompt.threshold_factor", format!("{:?}", self.prompt.threshold_factor)),
            ("prompt.freeze_semantic", self.prompt.freeze_semantic.to_string()),
            ("prompt.seed", self.prompt.seed.to_string()),
            ("path.ckpt", path_str(&self.ckpt)),
            ("path.data", path_str(&self.data_dir)),
            ("path.out", path_str(&self.out)),
            ("path.report", path_str(&self.report)),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            writeln!(s, "{k}={v}").expect("string write");
        }
        s
    }

    pub fn quant_mode(&self) -> QuantMode {
        QuantMode {
            bits: self.bits.clone(),
            enabled: true,
            quantize_attn_probs: self.quantize_attn_probs,
            calibrated: false,
        }
    }

    pub fn prompt_weights(&self) -> &PromptWeights {
        &self.prompt.weights
    }
}
