use std::fmt::Write as _;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::lru::{LruOptions, ScanMode};
use crate::matryoshka::SizeLadder;
use crate::model::{ModalityMode, ModelConfig, NormMode};
use crate::scalar::Precision;

/// Which positions of each training sequence contribute to the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetMode {
    /// Every position predicts the next item.
    Every,
    /// Only the final position predicts the last training item.
    Last,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub dropout: f64,
    pub d: usize,
    pub ladder_min: usize,
    /// Explicit ladder; overrides `d` and `ladder_min`.
    pub ladder: Option<SizeLadder>,
    pub n_blocks: usize,
    pub ffn_k: usize,
    pub norm_mode: NormMode,
    pub modality: ModalityMode,
    pub r_min: f64,
    pub r_max: f64,
    pub gamma_norm: bool,
    pub complex: bool,
    pub masked: bool,
    pub loss_weights: Option<Vec<f64>>,
    pub grad_clip: Option<f64>,
    pub exclude_seen: bool,
    pub targets: TargetMode,
    pub scan: ScanMode,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            weight_decay: 1e-2,
            max_epochs: 500,
            patience: 10,
            batch_size: 64,
            eval_batch_size: 256,
            dropout: 0.5,
            d: 1024,
            ladder_min: 8,
            ladder: None,
            n_blocks: 2,
            ffn_k: 2,
            norm_mode: NormMode::Segment,
            modality: ModalityMode::Both,
            r_min: 0.0,
            r_max: 0.1,
            gamma_norm: true,
            complex: true,
            masked: true,
            loss_weights: None,
            grad_clip: None,
            exclude_seen: false,
            targets: TargetMode::Every,
            scan: ScanMode::Parallel,
            seed: 0,
            precision: Precision::F32,
        }
    }
}

fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!(
            "invalid boolean `{value}` for `{key}`"
        ))),
    }
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "learning_rate" | "lr" => self.learning_rate = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "max_epochs" => self.max_epochs = parse(key, v)?,
            "patience" => self.patience = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "eval_batch_size" => self.eval_batch_size = parse(key, v)?,
            "dropout" => self.dropout = parse(key, v)?,
            "d" => self.d = parse(key, v)?,
            "ladder_min" => self.ladder_min = parse(key, v)?,
            "ladder" => {
                self.ladder = if v.is_empty() || v == "auto" {
                    None
                } else {
                    Some(
                        v.parse()
                            .map_err(|e| Error::Config(format!("ladder: {e}")))?,
                    )
                }
            }
            "n_blocks" => self.n_blocks = parse(key, v)?,
            "ffn_k" => self.ffn_k = parse(key, v)?,
            "norm_mode" => self.norm_mode = v.parse()?,
            "modality_mode" | "modality" => self.modality = v.parse()?,
            "r_min" => self.r_min = parse(key, v)?,
            "r_max" => self.r_max = parse(key, v)?,
            "gamma_norm" => self.gamma_norm = parse_bool(key, v)?,
            "complex" => self.complex = parse_bool(key, v)?,
            "masked" => self.masked = parse_bool(key, v)?,
            "loss_weights" => {
                self.loss_weights = if v.is_empty() || v == "uniform" {
                    None
                } else {
                    Some(v.split(',').map(|x| parse(key, x)).collect::<Result<_>>()?)
                }
            }
            "grad_clip" => {
                self.grad_clip = if v == "none" || v.is_empty() {
                    None
                } else {
                    Some(parse(key, v)?)
                }
            }
            "exclude_seen" => self.exclude_seen = parse_bool(key, v)?,
            "targets" => {
                self.targets = match v {
                    "every" => TargetMode::Every,
                    "last" => TargetMode::Last,
                    _ => return Err(Error::Config(format!("invalid targets `{v}` (every|last)"))),
                }
            }
            "scan" => {
                self.scan = match v {
                    "parallel" => ScanMode::Parallel,
                    "sequential" => ScanMode::Sequential,
                    _ => {
                        return Err(Error::Config(format!(
                            "invalid scan `{v}` (parallel|sequential)"
                        )))
                    }
                }
            }
            "seed" => self.seed = parse(key, v)?,
            "precision" => self.precision = v.parse().map_err(Error::Config)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines; blank lines and `#` comments are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected key=value, found `{line}`",
                    no + 1
                ))
            })?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {}", no + 1, inner(e))))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn size_ladder(&self) -> Result<SizeLadder> {
        match &self.ladder {
            Some(l) => Ok(l.clone()),
            None => {
                SizeLadder::geometric(self.ladder_min, self.d).map_err(|e| Error::Config(inner(e)))
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patience < 1 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.batch_size < 1 || self.eval_batch_size < 1 {
            return Err(Error::Config("batch sizes must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight_decay {} must be non-negative",
                self.weight_decay
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0,1)",
                self.dropout
            )));
        }
        if !(0.0 <= self.r_min && self.r_min < self.r_max && self.r_max <= 1.0) {
            return Err(Error::Config(format!(
                "ring radii must satisfy 0 <= r_min < r_max <= 1, got {}, {}",
                self.r_min, self.r_max
            )));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("grad_clip {c} must be positive")));
            }
        }
        let ladder = self.size_ladder()?;
        if let Some(w) = &self.loss_weights {
            if w.len() != ladder.len() {
                return Err(Error::Config(format!(
                    "{} loss weights for {} ladder sizes",
                    w.len(),
                    ladder.len()
                )));
            }
        }
        Ok(())
    }

    pub fn model_config(&self, data: &Dataset) -> Result<ModelConfig> {
        self.validate()?;
        let ladder = self.size_ladder()?;
        let d_lang = data.text.as_ref().map_or(0, |e| e.cols);
        let d_img = data.image.as_ref().map_or(0, |e| e.cols);
        let needs = |what: &str, have: usize| {
            if have == 0 {
                Err(Error::Data(format!(
                    "modality mode {} needs {what} embeddings, which the dataset lacks",
                    self.modality
                )))
            } else {
                Ok(())
            }
        };
        let (d_lang, d_img) = match self.modality {
            ModalityMode::Both => {
                needs("text", d_lang)?;
                needs("image", d_img)?;
                (d_lang, d_img)
            }
            ModalityMode::Text => {
                needs("text", d_lang)?;
                (d_lang, 0)
            }
            ModalityMode::Image => {
                needs("image", d_img)?;
                (0, d_img)
            }
            ModalityMode::None => (0, 0),
        };
        let mut c = ModelConfig::new(ladder, data.num_items(), d_lang, d_img);
        c.n_blocks = self.n_blocks;
        c.ffn_k = self.ffn_k;
        c.norm_mode = self.norm_mode;
        c.modality = self.modality;
        c.lru = LruOptions {
            gamma_norm: self.gamma_norm,
            complex: self.complex,
        };
        c.r_min = self.r_min;
        c.r_max = self.r_max;
        c.dropout = self.dropout;
        c.masked = self.masked;
        c.scan = self.scan;
        c.loss_weights = self.loss_weights.clone();
        c.validate()?;
        Ok(c)
    }

    /// Canonical `key=value` listing of every field.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("learning_rate", self.learning_rate.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("max_epochs", self.max_epochs.to_string()),
            ("patience", self.patience.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("eval_batch_size", self.eval_batch_size.to_string()),
            ("dropout", self.dropout.to_string()),
            ("d", self.d.to_string()),
            ("ladder_min", self.ladder_min.to_string()),
            (
                "ladder",
                self.ladder
                    .as_ref()
                    .map_or("auto".into(), |l| l.to_string()),
            ),
            ("n_blocks", self.n_blocks.to_string()),
            ("ffn_k", self.ffn_k.to_string()),
            ("norm_mode", self.norm_mode.to_string()),
            ("modality_mode", self.modality.to_string()),
            ("r_min", self.r_min.to_string()),
            ("r_max", self.r_max.to_string()),
            ("gamma_norm", self.gamma_norm.to_string()),
            ("complex", self.complex.to_string()),
            ("masked", self.masked.to_string()),
            (
                "loss_weights",
                self.loss_weights.as_ref().map_or("uniform".into(), |w| {
                    w.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
                }),
            ),
            (
                "grad_clip",
                self.grad_clip.map_or("none".into(), |c| c.to_string()),
            ),
            ("exclude_seen", self.exclude_seen.to_string()),
            (
                "targets",
                match self.targets {
                    TargetMode::Every => "every",
                    TargetMode::Last => "last",
                }
                .into(),
            ),
            (
                "scan",
                match self.scan {
                    ScanMode::Parallel => "parallel",
                    ScanMode::Sequential => "sequential",
                }
                .into(),
            ),
            ("seed", self.seed.to_string()),
            ("precision", self.precision.to_string()),
        ]
    }
}

fn inner(e: Error) -> String {
    match e {
        Error::Config(s) | Error::Param(s) => s,
        other => other.to_string(),
    }
}
