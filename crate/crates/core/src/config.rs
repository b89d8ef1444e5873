//! Run configuration in a plain `key = value` format.
//!
//! ```text
//! # comment
//! seed = 7
//! backbone.stage_dims = 16, 32, 64, 128
//! msts.keep_ratio.1 = 0.25
//! aggregation = gate
//! ```
//!
//! One assignment per line, dotted keys, `#` starts a comment, lists are
//! comma separated. Unknown keys and malformed values are errors; later
//! assignments override earlier ones.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::eval::{RunSpec, ScoreMode};
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::optim::OptimConfig;
use crate::train::TrainConfig;

/// Optimizer defaults used by this implementation; see the README for the
/// reason the rate differs from the recipe value.
pub const DEFAULT_LR: f64 = 0.01;
pub const RECIPE_LR: f64 = 0.045;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub seed: u64,
    /// Dataset directory produced by `data gen`.
    pub data_dir: Option<PathBuf>,
    pub score_mode: ScoreMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig {
                lr: DEFAULT_LR,
                ..OptimConfig::default()
            },
            train: TrainConfig::default(),
            seed: 0,
            data_dir: None,
            score_mode: ScoreMode::Prose,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
}

fn parse_list<T: FromStr + Copy, const N: usize>(key: &str, v: &str) -> Result<[T; N]> {
    let items: Vec<T> = v
        .split(',')
        .map(|s| parse_value(key, s.trim()))
        .collect::<Result<_>>()?;
    items
        .try_into()
        .map_err(|_| Error::Config(format!("`{key}` needs exactly {N} comma-separated values")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("`{key}` must be true or false, got `{v}`"))),
    }
}

fn join<T: std::fmt::Debug>(xs: &[T]) -> String {
    xs.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(", ")
}

impl RunConfig {
    /// Apply one assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let m = &mut self.model;
        let b = &mut m.backbone;
        match key {
            "seed" => self.seed = parse_value(key, v)?,
            "backbone.image_size" => {
                let s = parse_value(key, v)?;
                b.image_h = s;
                b.image_w = s;
            }
            "backbone.patch_size" => b.patch_size = parse_value(key, v)?,
            "backbone.classes" => b.n_classes = parse_value(key, v)?,
            "backbone.stage_dims" => b.stage_dims = parse_list(key, v)?,
            "backbone.stage_depths" => b.stage_depths = parse_list(key, v)?,
            "backbone.stage_heads" => b.stage_heads = parse_list(key, v)?,
            "backbone.kv_pool_stride" => b.kv_pool_stride = parse_value(key, v)?,
            "backbone.mlp_ratio" => b.mlp_ratio = parse_value(key, v)?,
            "msca.enabled" => m.ablation.msca = parse_bool(key, v)?,
            "msca.gamma" => m.msca.gamma = parse_value(key, v)?,
            "msca.min_factor" => m.msca.min_factor = parse_value(key, v)?,
            "msts.enabled" => m.ablation.msts = parse_bool(key, v)?,
            "msts.deep_share" => m.msts.deep_share = parse_value(key, v)?,
            "msts.se_ratio" => m.msts.se_ratio = parse_value(key, v)?,
            "msda.enabled" => m.ablation.msda = parse_bool(key, v)?,
            "msda.pre_softmax" => m.msda.pre_softmax = parse_bool(key, v)?,
            "aggregation" => m.aggregation = parse_value(key, v)?,
            "loss.alpha" => self.loss.alpha = parse_value(key, v)?,
            "loss.betas" => self.loss.betas = parse_list(key, v)?,
            "loss.normalized_smoothing" => self.loss.normalized_smoothing = parse_bool(key, v)?,
            "optim.lr" => self.optim.lr = parse_value(key, v)?,
            "optim.momentum" => self.optim.momentum = parse_value(key, v)?,
            "optim.weight_decay" => self.optim.weight_decay = parse_value(key, v)?,
            "train.epochs" => self.train.epochs = parse_value(key, v)?,
            "train.batch_size" => self.train.batch_size = parse_value(key, v)?,
            "data.dir" => self.data_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            "eval.score_mode" => self.score_mode = parse_value(key, v)?,
            _ => {
                if let Some(i) = key.strip_prefix("msts.keep_ratio.") {
                    let idx: usize = i
                        .parse()
                        .ok()
                        .filter(|i| (1..=4).contains(i))
                        .ok_or_else(|| Error::Config(format!("unknown key `{key}`")))?;
                    m.msts.keep_ratio[idx - 1] = parse_value(key, v)?;
                } else {
                    return Err(Error::Config(format!("unknown key `{key}`")));
                }
            }
        }
        Ok(())
    }

    /// Apply a `key = value` assignment string.
    pub fn set_assignment(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got `{assignment}`")))?;
        self.set(k.trim(), v)
    }

    /// Parse a config text on top of the defaults.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let content = line.split('#').next().unwrap_or("").trim();
            if !content.is_empty() {
                let (k, v) = content.split_once('=').ok_or_else(|| Error::Parse {
                    offset,
                    message: format!("expected `key = value`, got `{content}`"),
                })?;
                self.set(k.trim(), v).map_err(|e| Error::Parse {
                    offset,
                    message: e.to_string(),
                })?;
            }
            offset += line.len();
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        if !(self.optim.lr > 0.0) || !(0.0..1.0).contains(&self.optim.momentum) || !(self.optim.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "optim.lr must be positive, momentum in [0, 1), weight decay >= 0 (got {}, {}, {})",
                self.optim.lr, self.optim.momentum, self.optim.weight_decay
            )));
        }
        Ok(())
    }

    /// Every key with its resolved value; parsing the output reproduces
    /// `self` exactly.
    pub fn render(&self) -> String {
        let m = &self.model;
        let b = &m.backbone;
        let mut o = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(o, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("backbone.image_size", b.image_h.to_string());
        kv("backbone.patch_size", b.patch_size.to_string());
        kv("backbone.classes", b.n_classes.to_string());
        kv("backbone.stage_dims", join(&b.stage_dims));
        kv("backbone.stage_depths", join(&b.stage_depths));
        kv("backbone.stage_heads", join(&b.stage_heads));
        kv("backbone.kv_pool_stride", b.kv_pool_stride.to_string());
        kv("backbone.mlp_ratio", b.mlp_ratio.to_string());
        kv("msca.enabled", m.ablation.msca.to_string());
        kv("msca.gamma", format!("{:?}", m.msca.gamma));
        kv("msca.min_factor", format!("{:?}", m.msca.min_factor));
        kv("msts.enabled", m.ablation.msts.to_string());
        for (i, r) in m.msts.keep_ratio.iter().enumerate() {
            kv(&format!("msts.keep_ratio.{}", i + 1), format!("{r:?}"));
        }
        kv("msts.deep_share", format!("{:?}", m.msts.deep_share));
        kv("msts.se_ratio", m.msts.se_ratio.to_string());
        kv("msda.enabled", m.ablation.msda.to_string());
        kv("msda.pre_softmax", m.msda.pre_softmax.to_string());
        kv("aggregation", m.aggregation.to_string());
        kv("loss.alpha", format!("{:?}", self.loss.alpha));
        kv("loss.betas", join(&self.loss.betas));
        kv("loss.normalized_smoothing", self.loss.normalized_smoothing.to_string());
        kv("optim.lr", format!("{:?}", self.optim.lr));
        kv("optim.momentum", format!("{:?}", self.optim.momentum));
        kv("optim.weight_decay", format!("{:?}", self.optim.weight_decay));
        kv("train.epochs", self.train.epochs.to_string());
        kv("train.batch_size", self.train.batch_size.to_string());
        kv(
            "data.dir",
            self.data_dir.as_ref().map_or(String::new(), |p| p.display().to_string()),
        );
        kv(
            "eval.score_mode",
            match self.score_mode {
                ScoreMode::Prose => "prose".into(),
                ScoreMode::Equation => "equation".into(),
            },
        );
        o
    }

    pub fn run_spec(&self) -> RunSpec {
        RunSpec {
            model: self.model.clone(),
            loss: self.loss.clone(),
            optim: self.optim.clone(),
            train: self.train.clone(),
            seed: self.seed,
        }
    }
}
