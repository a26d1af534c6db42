//! Training configuration as flat `key = value` text.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;

/// Which class activation map supervises the segmentation decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CamSource {
    Final,
    Aux,
}

impl CamSource {
    fn as_str(self) -> &'static str {
        match self {
            CamSource::Final => "final",
            CamSource::Aux => "aux",
        }
    }
}

impl FromStr for CamSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "final" => Ok(CamSource::Final),
            "aux" => Ok(CamSource::Aux),
            _ => Err(Error::config(format!("cam source must be final or aux, got {s}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub encoder: EncoderConfig,
    pub decoder_hidden: usize,
    pub proj_dim: usize,
    pub mask_ratio: f64,
    pub mask_scale: usize,
    pub mu: f64,
    pub num_views: usize,
    pub beta_bg: f64,
    pub beta_fg: f64,
    pub tau: f64,
    pub eps: f64,
    pub momentum: f64,
    pub pool_negatives: bool,
    /// Treat the global query as a constant in the contrast loss.
    pub detach_query: bool,
    pub seg_cam: CamSource,
    pub weights: LossWeights,
    pub batch_size: usize,
    pub iters: usize,
    pub warmup_iters: usize,
    pub lr_init: f64,
    pub lr_peak: f64,
    pub poly_power: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub data_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            encoder: EncoderConfig::default(),
            decoder_hidden: 64,
            proj_dim: 128,
            mask_ratio: 0.95,
            mask_scale: 4,
            mu: 0.5,
            num_views: 4,
            beta_bg: 0.25,
            beta_fg: 0.7,
            tau: 0.5,
            eps: 1e-8,
            momentum: 0.9,
            pool_negatives: false,
            detach_query: true,
            seg_cam: CamSource::Final,
            weights: LossWeights::default(),
            batch_size: 8,
            iters: 3000,
            warmup_iters: 150,
            lr_init: 1e-6,
            lr_peak: 6e-5,
            poly_power: 0.9,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            seed: 0,
            n_train: 500,
            n_val: 100,
            data_seed: 1234,
        }
    }
}

/// Every accepted key, its default, and a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("crop_size", "image side in pixels (64)"),
    ("patch_size", "patch side in pixels (8)"),
    ("depth", "transformer blocks (4)"),
    ("heads", "attention heads (2)"),
    ("dim", "token width (64)"),
    ("mlp_hidden", "MLP hidden width (256)"),
    ("num_classes", "foreground classes, at most 6 (3)"),
    ("aux_layer", "1-based layer of the auxiliary classifier (3)"),
    ("decoder_hidden", "decoder hidden width (64)"),
    ("proj_dim", "contrast embedding width (128)"),
    ("mask_ratio", "block drop probability (0.95)"),
    ("mask_scale", "block side on the token grid (4)"),
    ("mu", "positiveness threshold (0.5)"),
    ("num_views", "masked views per image (4)"),
    ("beta_bg", "background threshold (0.25)"),
    ("beta_fg", "foreground threshold (0.7)"),
    ("tau", "contrast temperature (0.5)"),
    ("eps", "contrast denominator guard (1e-8)"),
    ("momentum", "EMA momentum of the global projector (0.9)"),
    ("pool_negatives", "also contrast against other images' negative views (false)"),
    ("detach_query", "no gradient through the global query of the contrast loss (true)"),
    ("seg_cam", "CAM supervising the decoder: final or aux (final)"),
    ("lambda_aff", "affinity loss weight (0.2)"),
    ("lambda_mcc", "contrast loss weight (0.5)"),
    ("lambda_seg", "segmentation loss weight (0.1)"),
    ("lambda_reg", "regulariser weight (0.05)"),
    ("batch_size", "images per step (8)"),
    ("iters", "optimizer steps (3000)"),
    ("warmup_iters", "linear warmup steps (150)"),
    ("lr_init", "learning rate at step 0 (1e-6)"),
    ("lr_peak", "learning rate at the end of warmup (6e-5)"),
    ("poly_power", "poly decay exponent (0.9)"),
    ("weight_decay", "decoupled weight decay (0.01)"),
    ("beta1", "first-moment decay (0.9)"),
    ("beta2", "second-moment decay (0.999)"),
    ("seed", "training seed (0)"),
    ("n_train", "training images (500)"),
    ("n_val", "validation images (100)"),
    ("data_seed", "dataset seed (1234)"),
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("bad value for {key}: {value:?}")))
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let e = &mut self.encoder;
        match key {
            "crop_size" => e.image_size = parse(key, value)?,
            "patch_size" => e.patch_size = parse(key, value)?,
            "depth" => e.depth = parse(key, value)?,
            "heads" => e.heads = parse(key, value)?,
            "dim" => e.dim = parse(key, value)?,
            "mlp_hidden" => e.mlp_hidden = parse(key, value)?,
            "num_classes" => e.num_classes = parse(key, value)?,
            "aux_layer" => e.aux_layer = parse(key, value)?,
            "decoder_hidden" => self.decoder_hidden = parse(key, value)?,
            "proj_dim" => self.proj_dim = parse(key, value)?,
            "mask_ratio" => self.mask_ratio = parse(key, value)?,
            "mask_scale" => self.mask_scale = parse(key, value)?,
            "mu" => self.mu = parse(key, value)?,
            "num_views" => self.num_views = parse(key, value)?,
            "beta_bg" => self.beta_bg = parse(key, value)?,
            "beta_fg" => self.beta_fg = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "eps" => self.eps = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "pool_negatives" => self.pool_negatives = parse(key, value)?,
            "detach_query" => self.detach_query = parse(key, value)?,
            "seg_cam" => self.seg_cam = parse(key, value)?,
            "lambda_aff" => self.weights.affinity = parse(key, value)?,
            "lambda_mcc" => self.weights.mcc = parse(key, value)?,
            "lambda_seg" => self.weights.seg = parse(key, value)?,
            "lambda_reg" => self.weights.reg = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "iters" => self.iters = parse(key, value)?,
            "warmup_iters" => self.warmup_iters = parse(key, value)?,
            "lr_init" => self.lr_init = parse(key, value)?,
            "lr_peak" => self.lr_peak = parse(key, value)?,
            "poly_power" => self.poly_power = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "n_train" => self.n_train = parse(key, value)?,
            "n_val" => self.n_val = parse(key, value)?,
            "data_seed" => self.data_seed = parse(key, value)?,
            _ => return Err(Error::config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Defaults overridden by `text`. Blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical text form; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let e = &self.encoder;
        let w = &self.weights;
        let values: Vec<String> = vec![
            e.image_size.to_string(),
            e.patch_size.to_string(),
            e.depth.to_string(),
            e.heads.to_string(),
            e.dim.to_string(),
            e.mlp_hidden.to_string(),
            e.num_classes.to_string(),
            e.aux_layer.to_string(),
            self.decoder_hidden.to_string(),
            self.proj_dim.to_string(),
            format!("{:?}", self.mask_ratio),
            self.mask_scale.to_string(),
            format!("{:?}", self.mu),
            self.num_views.to_string(),
            format!("{:?}", self.beta_bg),
            format!("{:?}", self.beta_fg),
            format!("{:?}", self.tau),
            format!("{:?}", self.eps),
            format!("{:?}", self.momentum),
            self.pool_negatives.to_string(),
            self.detach_query.to_string(),
            self.seg_cam.as_str().to_string(),
            format!("{:?}", w.affinity),
            format!("{:?}", w.mcc),
            format!("{:?}", w.seg),
            format!("{:?}", w.reg),
            self.batch_size.to_string(),
            self.iters.to_string(),
            self.warmup_iters.to_string(),
            format!("{:?}", self.lr_init),
            format!("{:?}", self.lr_peak),
            format!("{:?}", self.poly_power),
            format!("{:?}", self.weight_decay),
            format!("{:?}", self.beta1),
            format!("{:?}", self.beta2),
            self.seed.to_string(),
            self.n_train.to_string(),
            self.n_val.to_string(),
            self.data_seed.to_string(),
        ];
        let mut out = String::new();
        for ((k, _), v) in KEYS.iter().zip(values) {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let grid = self.encoder.grid();
        let checks: [(bool, &str); 14] = [
            (self.encoder.num_classes >= 1 && self.encoder.num_classes <= 6, "num_classes must be in [1, 6]"),
            ((0.0..1.0).contains(&self.mask_ratio), "mask_ratio must be in [0, 1)"),
            (self.mask_scale >= 1 && self.mask_scale <= grid, "mask_scale must be in [1, grid]"),
            (self.mu > 0.0 && self.mu < 1.0, "mu must be in (0, 1)"),
            (self.num_views >= 1, "num_views must be at least 1"),
            (0.0 < self.beta_bg && self.beta_bg < self.beta_fg && self.beta_fg < 1.0, "need 0 < beta_bg < beta_fg < 1"),
            (self.tau > 0.0 && self.eps >= 0.0, "tau must be positive and eps non-negative"),
            ((0.0..=1.0).contains(&self.momentum), "momentum must be in [0, 1]"),
            (self.batch_size >= 1 && self.iters >= 1, "batch_size and iters must be positive"),
            (self.warmup_iters < self.iters, "warmup_iters must be below iters"),
            (self.lr_init >= 0.0 && self.lr_peak > 0.0, "learning rates must be positive"),
            (self.n_train >= 1 && self.n_val >= 1, "datasets must be nonempty"),
            (self.decoder_hidden >= 1 && self.proj_dim >= 1, "decoder_hidden and proj_dim must be positive"),
            (
                [self.weights.affinity, self.weights.mcc, self.weights.seg, self.weights.reg]
                    .iter()
                    .all(|w| w.is_finite() && *w >= 0.0),
                "loss weights must be non-negative",
            ),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::config(msg));
            }
        }
        Ok(())
    }
}

/// Learning rate for `step`: linear warmup from `lr_init` to `lr_peak`, then
/// polynomial decay to zero at `iters`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let w = cfg.warmup_iters;
    if step < w {
        return cfg.lr_init + (cfg.lr_peak - cfg.lr_init) * step as f64 / w as f64;
    }
    let t = (step - w) as f64 / (cfg.iters - w) as f64;
    cfg.lr_peak * (1.0 - t.min(1.0)).powf(cfg.poly_power)
}
