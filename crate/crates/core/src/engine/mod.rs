//! The three training stages (LM pretraining, LM fine-tuning, classifier
//! fine-tuning), evaluation, checkpoints and per-epoch metrics.

mod checkpoint;
mod clf_train;
mod lm_train;
mod metrics;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{Checkpoint, CheckpointMeta, ModelKind, MAGIC, VERSION};
pub use clf_train::{
    encode_docs, error_rate, evaluate, label_set, predict, random_lm_checkpoint, run_clf_finetune, ClfData,
};
pub use lm_train::{lm_perplexity, run_lm_finetune, run_pretrain, transfer_vocab};
pub use metrics::{MetricsRow, RunMetrics};

use crate::classifier::{ClfError, HeadConfig};
use crate::finetune::{LrSchedule, OptimizerKind, ScheduleError, UnfreezeMode, UnfreezePolicy};
use crate::lm::{Direction, LmDropouts, LmError};
use crate::tensor::TensorError;
use crate::text::{TextError, TokenizeMode};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint checksum mismatch (corrupt or truncated file)")]
    Checksum,
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint has tensor {0} that the model does not")]
    UnknownTensor(String),
    #[error("checkpoint lacks tensor {0}")]
    MissingTensor(String),
    #[error("tensor {name} has shape {found:?}, model expects {expected:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("{0}")]
    Data(String),
    #[error("labeled data has a single class {0:?}")]
    SingleClass(String),
    #[error("model knows {model} classes but the data has label {label:?} outside them")]
    ClassMismatch { model: usize, label: String },
    #[error("target corpus shares no tokens with the pretrained vocabulary")]
    VocabMismatch,
    #[error("non-finite loss in {stage} at iteration {iteration}")]
    NonFinite { stage: String, iteration: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Clf(#[from] ClfError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl EngineError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        EngineError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    LmFinetune,
    ClfFinetune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::LmFinetune => "lm_finetune",
            Stage::ClfFinetune => "clf_finetune",
        }
    }
}

/// Language-model architecture and tokenisation used when pretraining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub n_layers: usize,
    pub dropouts: LmDropouts,
    pub tie_weights: bool,
    pub tokenize: TokenizeMode,
    pub max_vocab: usize,
    pub min_freq: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            hidden_dim: 128,
            n_layers: 3,
            dropouts: LmDropouts::PAPER,
            tie_weights: true,
            tokenize: TokenizeMode::Char,
            max_vocab: 60_000,
            min_freq: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadSpec {
    pub hidden: usize,
    pub drops: (f64, f64),
    pub use_batch_norm: bool,
}

impl Default for HeadSpec {
    fn default() -> Self {
        let h = HeadConfig::new(2);
        Self {
            hidden: h.hidden,
            drops: h.drops,
            use_batch_norm: h.use_batch_norm,
        }
    }
}

impl HeadSpec {
    pub fn config(&self, n_classes: usize) -> HeadConfig {
        HeadConfig {
            hidden: self.hidden,
            n_classes,
            drops: self.drops,
            use_batch_norm: self.use_batch_norm,
        }
    }
}

/// Everything one training stage needs besides its data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    /// BPTT window for language modelling and chunk length for classification.
    pub bptt: usize,
    /// Peak learning rate of the top layer group.
    pub base_lr: f64,
    pub schedule: LrSchedule,
    /// Divide the learning rate by 2.6 per group going down.
    pub discriminative: bool,
    /// Without `discriminative`, the learning rate of every group below the
    /// top one; `None` means all groups share `base_lr`.
    pub lower_lr: Option<f64>,
    pub unfreeze: UnfreezePolicy,
    pub optimizer: OptimizerKind,
    /// Global gradient-norm clipping threshold.
    pub clip: Option<f64>,
    /// Patience in epochs on validation loss; the best epoch is restored.
    pub early_stopping: Option<usize>,
    /// Trailing chunks kept on the tape per document batch; `None` keeps all.
    pub grad_window: Option<usize>,
    /// Multiplier on the loaded language model's dropouts while fine-tuning.
    pub dropout_scale: f64,
    /// Fraction of a language-model corpus held out for validation.
    pub val_frac: f64,
    pub seed: u64,
    /// Direction of the language model trained by `pretrain`.
    pub direction: Direction,
    pub model: ModelSpec,
    pub head: HeadSpec,
}

impl StageConfig {
    /// Desk-scale defaults for `stage`.
    pub fn for_stage(stage: Stage) -> Self {
        let base = Self {
            stage,
            epochs: 5,
            batch_size: 32,
            bptt: 50,
            base_lr: 0.004,
            schedule: LrSchedule::default(),
            discriminative: false,
            lower_lr: None,
            unfreeze: UnfreezePolicy::new(UnfreezeMode::Full),
            optimizer: OptimizerKind::adam(),
            clip: Some(0.25),
            early_stopping: None,
            grad_window: None,
            dropout_scale: 1.0,
            val_frac: 0.05,
            seed: 1,
            direction: Direction::Forward,
            model: ModelSpec::default(),
            head: HeadSpec::default(),
        };
        match stage {
            Stage::Pretrain => Self {
                base_lr: 0.005,
                ..base
            },
            Stage::LmFinetune => Self {
                epochs: 4,
                discriminative: true,
                val_frac: 0.1,
                ..base
            },
            Stage::ClfFinetune => Self {
                epochs: 10,
                batch_size: 16,
                base_lr: 0.01,
                dropout_scale: 0.0,
                discriminative: true,
                unfreeze: UnfreezePolicy::new(UnfreezeMode::Gradual),
                ..base
            },
        }
    }

    /// Stage defaults overlaid with the fields present in `overrides`.
    pub fn from_json(stage: Stage, overrides: &serde_json::Value) -> Result<Self, EngineError> {
        let mut value = serde_json::to_value(Self::for_stage(stage)).expect("config serialises");
        let Some(obj) = overrides.as_object() else {
            return Err(EngineError::Config("config must be a JSON object".into()));
        };
        merge(&mut value, obj);
        value["stage"] = serde_json::to_value(stage).expect("stage serialises");
        let cfg: Self = serde_json::from_value(value).map_err(|e| EngineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: String| Err(EngineError::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(self.base_lr > 0.0) {
            return bad(format!("base_lr {} must be positive", self.base_lr));
        }
        if self.batch_size == 0 || self.bptt == 0 {
            return bad("batch_size and bptt must be positive".into());
        }
        if !(0.0..1.0).contains(&self.val_frac) {
            return bad(format!("val_frac {} outside [0, 1)", self.val_frac));
        }
        if !(0.0..=1.0).contains(&self.dropout_scale) {
            return bad(format!("dropout_scale {} outside [0, 1]", self.dropout_scale));
        }
        if self.lower_lr.is_some_and(|x| !(x > 0.0)) {
            return bad("lower_lr must be positive".into());
        }
        Ok(())
    }
}

fn merge(dst: &mut serde_json::Value, src: &serde_json::Map<String, serde_json::Value>) {
    for (k, v) in src {
        match (dst.get_mut(k), v) {
            (Some(d @ serde_json::Value::Object(_)), serde_json::Value::Object(o)) => merge(d, o),
            (_, v) => dst[k] = v.clone(),
        }
    }
}
