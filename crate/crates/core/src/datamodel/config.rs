use serde::{Deserialize, Serialize};

use crate::{CbmtError, Result, CLASS_CUP};

/// Which pixels feed the dataset-wide loss means.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    /// Keep a pixel when `|p - y| / |gamma - y| > alpha`: confident pixels are dropped.
    DistanceFromLabel,
    /// Keep a pixel when `|p - gamma| / |y - gamma| > alpha`, the formula as usually printed.
    LiteralPaperFormula,
}

/// When accumulated statistics start weighting the loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatsTiming {
    /// Weights computed at the end of epoch `t` are used throughout epoch `t + 1`.
    Frozen,
    /// Running estimates of the current epoch are applied immediately.
    Streaming,
}

/// Which per-pixel loss is accumulated into the statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatsLoss {
    /// Plain BCE with unit background weight.
    Raw,
    /// The calibrated loss actually optimized.
    Calibrated,
}

/// Whose probabilities feed the filter and the accumulated losses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatsSource {
    /// The weak-view teacher predictions that produced the pseudo-labels.
    Teacher,
    /// The strong-view student predictions being trained.
    Student,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalModel {
    Teacher,
    Student,
    Both,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub scale_range: [f64; 2],
    /// Independent probability of each strong operation.
    pub strong_op_prob: f64,
    /// Erased rectangle area as a fraction of the image.
    pub erase_area: [f64; 2],
    pub contrast_range: [f64; 2],
    /// Fraction of pixels hit by salt-and-pepper noise.
    pub noise_fraction: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            scale_range: [0.9, 1.1],
            strong_op_prob: 0.8,
            erase_area: [0.02, 0.10],
            contrast_range: [0.5, 1.5],
            noise_fraction: [0.01, 0.05],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Channel widths of the four encoder stages.
    pub widths: [usize; 4],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            widths: [8, 16, 32, 64],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CbmtConfig {
    pub gamma: f64,
    pub lambda_ema: f64,
    pub alpha: f64,
    pub calibrated_classes: Vec<usize>,
    pub lr_adapt: f64,
    pub lr_source: f64,
    pub lr_source_decay: f64,
    pub epochs_adapt: usize,
    pub epochs_source: usize,
    pub batch_size: usize,
    pub optimizer_momenta: [f64; 2],
    pub filter_mode: FilterMode,
    pub seed: u64,
    pub roi_size: [usize; 2],
    pub num_classes: usize,
    /// Student sees strongly augmented views; off means it sees the weak view.
    pub strong_aug: bool,
    /// Erased pixels contribute to the loss.
    pub loss_on_erased: bool,
    /// Normalization running statistics take part in the moving average.
    pub ema_buffers: bool,
    pub stats_timing: StatsTiming,
    pub stats_loss: StatsLoss,
    pub stats_source: StatsSource,
    pub eval_model: EvalModel,
    /// Multiplier on `lr_adapt` when the teacher is the student itself (`lambda_ema = 0`).
    pub pl_lr_factor: f64,
    /// Teacher checkpoint every this many adaptation epochs; 0 disables.
    pub ckpt_every: usize,
    /// Augment source images (weak geometry plus the strong photometric ops).
    pub source_augment: bool,
    pub augment: AugmentConfig,
    pub model: ModelConfig,
}

impl Default for CbmtConfig {
    fn default() -> Self {
        Self {
            gamma: 0.75,
            lambda_ema: 0.98,
            alpha: 0.2,
            calibrated_classes: vec![CLASS_CUP],
            lr_adapt: 5e-4,
            lr_source: 1e-3,
            lr_source_decay: 0.98,
            epochs_adapt: 20,
            epochs_source: 200,
            batch_size: 8,
            optimizer_momenta: [0.9, 0.99],
            filter_mode: FilterMode::DistanceFromLabel,
            seed: 0,
            roi_size: [512, 512],
            num_classes: 2,
            strong_aug: true,
            loss_on_erased: true,
            ema_buffers: true,
            stats_timing: StatsTiming::Frozen,
            stats_loss: StatsLoss::Raw,
            stats_source: StatsSource::Teacher,
            eval_model: EvalModel::Teacher,
            pl_lr_factor: 1.0,
            ckpt_every: 10,
            source_augment: true,
            augment: AugmentConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl CbmtConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CbmtError::config("<file>", e.to_string()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Stable 64-bit FNV-1a digest of the serialized config.
    pub fn hash(&self) -> u64 {
        crate::rng::fnv1a(self.to_toml_string().as_bytes())
    }

    /// Effective adaptation learning rate, including the vanilla pseudo-labeling factor.
    pub fn effective_lr_adapt(&self) -> f64 {
        if self.lambda_ema == 0.0 {
            self.lr_adapt * self.pl_lr_factor
        } else {
            self.lr_adapt
        }
    }

    /// Source learning rate at zero-based epoch `epoch`.
    pub fn lr_source_at(&self, epoch: usize) -> f64 {
        self.lr_source * self.lr_source_decay.powi(epoch as i32)
    }

    pub fn is_calibrated(&self, class: usize) -> bool {
        self.calibrated_classes.contains(&class)
    }
}

fn check_range(field: &str, v: [f64; 2], lo: f64, hi: f64) -> Result<()> {
    if !(v[0] >= lo && v[1] <= hi && v[0] <= v[1]) {
        return Err(CbmtError::config(
            field,
            format!("range {v:?} must be ordered within [{lo},{hi}]"),
        ));
    }
    Ok(())
}

fn check_prob(field: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(CbmtError::config(field, "out of [0,1]"));
    }
    Ok(())
}

/// Returns the config unchanged when every field is within range.
pub fn validate_config(cfg: CbmtConfig) -> Result<CbmtConfig> {
    if !(cfg.gamma > 0.0 && cfg.gamma < 1.0) {
        return Err(CbmtError::config("gamma", "gamma out of (0,1)"));
    }
    if !(0.0..=1.0).contains(&cfg.lambda_ema) {
        return Err(CbmtError::config("lambda_ema", "lambda_ema out of [0,1]"));
    }
    if !(cfg.alpha >= 0.0 && cfg.alpha < 1.0) {
        return Err(CbmtError::config("alpha", "alpha out of [0,1)"));
    }
    for (name, lr) in [
        ("lr_adapt", cfg.lr_adapt),
        ("lr_source", cfg.lr_source),
        ("pl_lr_factor", cfg.pl_lr_factor),
    ] {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(CbmtError::config(name, "must be positive and finite"));
        }
    }
    if !(cfg.lr_source_decay > 0.0 && cfg.lr_source_decay <= 1.0) {
        return Err(CbmtError::config("lr_source_decay", "out of (0,1]"));
    }
    if cfg.batch_size == 0 {
        return Err(CbmtError::config("batch_size", "must be at least 1"));
    }
    for (i, m) in cfg.optimizer_momenta.iter().enumerate() {
        if !(0.0..1.0).contains(m) {
            return Err(CbmtError::config(
                "optimizer_momenta",
                format!("entry {i} out of [0,1)"),
            ));
        }
    }
    if cfg.seed > i64::MAX as u64 {
        return Err(CbmtError::config("seed", "must fit in a signed 64-bit integer"));
    }
    if cfg.num_classes == 0 {
        return Err(CbmtError::config("num_classes", "must be at least 1"));
    }
    if let Some(&k) = cfg.calibrated_classes.iter().find(|&&k| k >= cfg.num_classes) {
        return Err(CbmtError::config(
            "calibrated_classes",
            format!("class {k} >= num_classes {}", cfg.num_classes),
        ));
    }
    for (i, &s) in cfg.roi_size.iter().enumerate() {
        if s == 0 || s % 8 != 0 {
            return Err(CbmtError::config(
                "roi_size",
                format!("dimension {i} = {s} must be a positive multiple of 8"),
            ));
        }
    }
    if cfg.model.widths.contains(&0) {
        return Err(CbmtError::config("model.widths", "widths must be positive"));
    }
    let a = &cfg.augment;
    check_prob("augment.flip_prob", a.flip_prob)?;
    check_prob("augment.strong_op_prob", a.strong_op_prob)?;
    check_range("augment.scale_range", a.scale_range, 0.1, 10.0)?;
    check_range("augment.erase_area", a.erase_area, 0.0, 1.0)?;
    check_range("augment.contrast_range", a.contrast_range, 0.0, 10.0)?;
    check_range("augment.noise_fraction", a.noise_fraction, 0.0, 1.0)?;
    Ok(cfg)
}
