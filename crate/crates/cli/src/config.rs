//! Run configuration: defaults, then profile, then JSON file, then flags.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use tsdistill::distill::DistillConfig;
use tsdistill::mobo::{BetaSampler, MoboConfig, Strategy};
use tsdistill::models::{BlockSetting, StudentSetting, DEFAULT_FILTERS};
use tsdistill::teachers::TeacherConfig;

use crate::UsageError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Adaptive distillation with guided teacher removal.
    #[value(alias = "guided")]
    Lightts,
    /// Plain distillation from the ensemble average.
    Classic,
    /// Adaptive distillation with all teachers, no removal.
    AedOne,
    /// Adaptive distillation with leave-one-out teacher removal.
    AedLoo,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Lightts => "lightts",
            Method::Classic => "classic",
            Method::AedOne => "aed-one",
            Method::AedLoo => "aed-loo",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchStrategy {
    Encoded,
    Raw,
    Random,
}

impl SearchStrategy {
    pub fn name(self) -> &'static str {
        match self {
            SearchStrategy::Encoded => "encoded",
            SearchStrategy::Raw => "raw",
            SearchStrategy::Random => "random",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Profile {
    /// Full-scale defaults.
    Full,
    /// Shorter runs that finish in minutes.
    Desk,
}

/// Every knob of a run. Serialized flat into config files and manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub val_fraction: f64,
    pub blocks: usize,
    pub filters: usize,
    pub teachers: usize,
    pub teacher_epochs: usize,
    pub teacher_lr: f64,
    pub teacher_batch_size: usize,
    pub alpha: f64,
    pub tau: f64,
    pub validation_interval: usize,
    pub epochs: usize,
    pub lr: f64,
    pub lr_lambda: f64,
    pub batch_size: usize,
    pub method: Method,
    pub setting: Option<StudentSetting>,
    pub loo_budget: Option<usize>,
    pub initial: usize,
    pub total: usize,
    pub autoencoder_samples: usize,
    pub pool_size: usize,
    pub encoder_epochs: usize,
    pub finetune_epochs: usize,
    pub fine_tune: bool,
    pub strategy: SearchStrategy,
    /// Fixed scalarization weight; uniform per iteration when absent.
    pub beta: Option<f64>,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let distill = DistillConfig::default();
        let mobo = MoboConfig::default();
        RunConfig {
            train: None,
            test: None,
            val_fraction: 0.2,
            blocks: 3,
            filters: DEFAULT_FILTERS,
            teachers: 10,
            teacher_epochs: 1500,
            teacher_lr: 0.01,
            teacher_batch_size: 64,
            alpha: distill.alpha,
            tau: distill.tau,
            validation_interval: distill.validation_interval,
            epochs: distill.epochs,
            lr: distill.lr_w,
            lr_lambda: distill.lr_lambda,
            batch_size: distill.batch_size,
            method: Method::Lightts,
            setting: None,
            loo_budget: None,
            initial: mobo.initial,
            total: mobo.total,
            autoencoder_samples: mobo.autoencoder_samples,
            pool_size: mobo.pool_size,
            encoder_epochs: mobo.encoder_epochs,
            finetune_epochs: mobo.finetune_epochs,
            fine_tune: mobo.fine_tune,
            strategy: SearchStrategy::Encoded,
            beta: None,
            seed: 0,
        }
    }
}

fn profile_overrides(profile: Profile) -> Vec<(&'static str, Value)> {
    match profile {
        Profile::Full => Vec::new(),
        Profile::Desk => vec![
            ("teacher_epochs", 200.into()),
            ("epochs", 200.into()),
            ("total", 20.into()),
            ("autoencoder_samples", 200.into()),
        ],
    }
}

/// Flags shared by the commands; each one overrides the same-named config key.
#[derive(Args, Debug, Default, Serialize)]
pub struct ConfigFlags {
    /// JSON file with flat config keys (applied after the profile).
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Preset applied over the defaults.
    #[arg(long, value_enum)]
    #[serde(skip)]
    pub profile: Option<Profile>,

    /// UCR training file (for multivariate sets, the `_dim1` file).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<PathBuf>,
    /// UCR test file.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_fraction: Option<f64>,
    /// Blocks per network (B).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub blocks: Option<usize>,
    /// Filters per convolution layer (K).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub filters: Option<usize>,
    /// Ensemble size (N).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub teachers: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub teacher_epochs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub teacher_lr: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub teacher_batch_size: Option<usize>,
    /// Weight of the label loss.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    /// Gumbel-softmax temperature.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    /// Epochs between teacher-weight updates (v).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub validation_interval: Option<usize>,
    /// Distillation epochs (E).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    /// Student learning rate.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    /// Teacher-weight learning rate.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_lambda: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub method: Option<Method>,
    /// Student setting as JSON, e.g. `[[3,40,8],[2,20,4]]`.
    #[arg(long, value_parser = parse_setting)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub setting: Option<StudentSetting>,
    /// Maximum distillation runs for leave-one-out removal.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loo_budget: Option<usize>,
    /// Random settings evaluated before the search (P).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial: Option<usize>,
    /// Total settings evaluated (Q).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub total: Option<usize>,
    /// Unevaluated settings for encoder reconstruction training (R).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub autoencoder_samples: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pool_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub encoder_epochs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub finetune_epochs: Option<usize>,
    /// Warm-start the encoder each iteration (false retrains it).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fine_tune: Option<bool>,
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub strategy: Option<SearchStrategy>,
    /// Fixed accuracy/size trade-off in [0, 1] instead of a uniform draw.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn parse_setting(text: &str) -> Result<StudentSetting, String> {
    StudentSetting::from_json(text).map_err(|e| e.to_string())
}

fn usage(msg: String) -> anyhow::Error {
    UsageError(msg).into()
}

fn overlay(base: &mut Map<String, Value>, layer: Map<String, Value>, source: &str) -> anyhow::Result<()> {
    for (k, v) in layer {
        if !base.contains_key(&k) {
            return Err(usage(format!("unknown config key {k:?} in {source}")));
        }
        base.insert(k, v);
    }
    Ok(())
}

fn read_file_layer(path: &Path) -> anyhow::Result<Map<String, Value>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read config file {}: {e}", path.display())))?;
    match serde_json::from_str(&text) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(usage(format!("{} must hold a JSON object", path.display()))),
        Err(e) => Err(usage(format!("{}: {e}", path.display()))),
    }
}

impl ConfigFlags {
    /// Layers defaults, profile, config file and flags, in that order.
    pub fn resolve(&self) -> anyhow::Result<RunConfig> {
        let Value::Object(mut map) = serde_json::to_value(RunConfig::default())? else {
            unreachable!("config serializes to an object");
        };
        if let Some(p) = self.profile {
            let layer = profile_overrides(p).into_iter().map(|(k, v)| (k.to_string(), v)).collect();
            overlay(&mut map, layer, "profile")?;
        }
        if let Some(path) = &self.config {
            overlay(&mut map, read_file_layer(path)?, &path.display().to_string())?;
        }
        let Value::Object(flags) = serde_json::to_value(self)? else {
            unreachable!("flags serialize to an object");
        };
        overlay(&mut map, flags, "flags")?;
        let cfg: RunConfig =
            serde_json::from_value(Value::Object(map)).map_err(|e| usage(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

impl RunConfig {
    pub fn validate(&self) -> anyhow::Result<()> {
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(usage(format!("val_fraction must lie in (0, 1), got {}", self.val_fraction)));
        }
        if self.blocks == 0 || self.filters == 0 || self.teachers == 0 {
            return Err(usage("blocks, filters and teachers must be positive".into()));
        }
        if self.teacher_epochs == 0 || self.teacher_batch_size == 0 {
            return Err(usage("teacher_epochs and teacher_batch_size must be positive".into()));
        }
        if let Some(b) = self.beta {
            if !(0.0..=1.0).contains(&b) {
                return Err(usage(format!("beta must lie in [0, 1], got {b}")));
            }
        }
        self.distill_config().validate()?;
        Ok(())
    }

    /// The configured setting, or `(3, 40, 8)` in every block.
    pub fn student_setting(&self) -> anyhow::Result<StudentSetting> {
        match &self.setting {
            Some(s) => Ok(s.clone()),
            None => Ok(StudentSetting::uniform(self.blocks, BlockSetting::new(3, 40, 8))?),
        }
    }

    pub fn teacher_config(&self) -> anyhow::Result<TeacherConfig> {
        let mut t = TeacherConfig::new(self.teachers, self.blocks, self.seed)?;
        t.epochs = self.teacher_epochs;
        t.lr = self.teacher_lr;
        t.batch_size = self.teacher_batch_size;
        t.filters = self.filters;
        Ok(t)
    }

    pub fn distill_config(&self) -> DistillConfig {
        DistillConfig {
            alpha: self.alpha,
            tau: self.tau,
            validation_interval: self.validation_interval,
            epochs: self.epochs,
            lr_w: self.lr,
            lr_lambda: self.lr_lambda,
            batch_size: self.batch_size,
            filters: self.filters,
            seed: self.seed,
            ..DistillConfig::default()
        }
    }

    pub fn mobo_config(&self) -> MoboConfig {
        MoboConfig {
            initial: self.initial,
            total: self.total,
            autoencoder_samples: self.autoencoder_samples,
            pool_size: self.pool_size,
            encoder_epochs: self.encoder_epochs,
            finetune_epochs: self.finetune_epochs,
            fine_tune: self.fine_tune,
            strategy: match self.strategy {
                SearchStrategy::Encoded => Strategy::Encoded,
                SearchStrategy::Raw => Strategy::Raw,
                SearchStrategy::Random => Strategy::Random,
            },
            beta: self.beta.map_or(BetaSampler::Uniform, BetaSampler::Fixed),
            seed: self.seed,
            ..MoboConfig::default()
        }
    }
}
