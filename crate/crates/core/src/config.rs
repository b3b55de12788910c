//! Run configuration: a TOML document with `sre`, `heads`, `train`, and
//! `data` sections. Unknown keys are rejected; every field has a documented
//! default; the FNV hash of the raw text is recorded in checkpoints and logs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{SynthSpec, TaskId};
use crate::error::{Error, Result};
use crate::heads::{HeadConfig, HeadKind, OutputKind};
use crate::losses::AngularSoftmaxConfig;
use crate::optim::AdamConfig;
use crate::rng::fnv1a64;
use crate::sre::SREConfig;
use crate::trainer::{Ablation, TrainConfig, TrainMode};

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "d_seed")]
    pub seed: u64,
    #[serde(default)]
    pub sre: SreSection,
    #[serde(default = "default_heads")]
    pub heads: Vec<HeadSection>,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub data: DataSection,
}

fn d_seed() -> u64 {
    7
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: d_seed(),
            sre: SreSection::default(),
            heads: default_heads(),
            train: TrainSection::default(),
            data: DataSection::default(),
        }
    }
}

macro_rules! section_with_defaults {
    ($name:ident { $($field:ident : $ty:ty = $default:expr),+ $(,)? }) => {
        #[derive(Debug, Clone, Deserialize, Serialize)]
        #[serde(deny_unknown_fields, default)]
        pub struct $name {
            $(pub $field: $ty),+
        }
        impl Default for $name {
            fn default() -> Self {
                $name { $($field: $default),+ }
            }
        }
    };
}

section_with_defaults!(SreSection {
    conv_channels: usize = 64,
    d_model: usize = 64,
    n_layers: usize = 2,
    n_heads: usize = 4,
    ffn_dim: usize = 256,
    codebooks: usize = 2,
    codebook_entries: usize = 64,
    code_dim: usize = 64,
    mask_prob: f64 = 0.065,
    mask_span: usize = 4,
    distractors: usize = 32,
    contrastive_temp: f64 = 0.1,
    gumbel_start: f64 = 2.0,
    gumbel_min: f64 = 0.5,
    gumbel_decay: f64 = 0.9995,
    diversity_weight: f64 = 0.1,
    weight_decay: f64 = 1e-4,
});

impl SreSection {
    pub fn build(&self) -> Result<SREConfig> {
        let cfg = SREConfig {
            conv_channels: self.conv_channels,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            ffn_dim: self.ffn_dim,
            codebooks: self.codebooks,
            codebook_entries: self.codebook_entries,
            code_dim: self.code_dim,
            mask_prob: self.mask_prob,
            mask_span: self.mask_span,
            distractors: self.distractors,
            contrastive_temp: self.contrastive_temp,
            gumbel_start: self.gumbel_start,
            gumbel_min: self.gumbel_min,
            gumbel_decay: self.gumbel_decay,
            diversity_weight: self.diversity_weight,
            weight_decay: self.weight_decay,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

section_with_defaults!(HeadSection {
    task: String = "kws".to_string(),
    kind: String = "linear".to_string(),
    classes: usize = 12,
    embedding_dim: usize = 256,
    lstm_hidden: usize = 256,
    cnn_filters: usize = 128,
    cnn_kernel: usize = 25,
    bilstm_all_endpoints: bool = false,
});

fn default_heads() -> Vec<HeadSection> {
    vec![
        HeadSection::default(),
        HeadSection {
            task: "sv".into(),
            ..Default::default()
        },
    ]
}

impl HeadSection {
    pub fn task_id(&self) -> Result<TaskId> {
        match self.task.as_str() {
            "kws" => Ok(TaskId::Kws),
            "sv" => Ok(TaskId::Sv),
            other => Err(Error::config(format!(
                "heads.task must be 'kws' or 'sv', got '{other}'"
            ))),
        }
    }

    pub fn build(&self) -> Result<HeadConfig> {
        let kind = match self.kind.as_str() {
            "linear" => HeadKind::Linear,
            "bilstm" => HeadKind::BiLstm,
            "cnn1d" => HeadKind::Cnn1d,
            other => {
                return Err(Error::config(format!(
                    "heads.kind must be linear|bilstm|cnn1d, got '{other}'"
                )))
            }
        };
        let task = self.task_id()?;
        let output = match task {
            TaskId::Kws => OutputKind::ClassScores(self.classes),
            TaskId::Sv => OutputKind::Embedding(self.embedding_dim),
            TaskId::Pretrain => return Err(Error::config("heads.task cannot be 'pretrain'")),
        };
        let mut cfg = HeadConfig::new(kind, output);
        cfg.lstm_hidden = self.lstm_hidden;
        cfg.cnn_filters = self.cnn_filters;
        cfg.cnn_kernel = self.cnn_kernel;
        cfg.bilstm_all_endpoints = self.bilstm_all_endpoints;
        cfg.input_seconds = match task {
            TaskId::Sv => 2,
            _ => 1,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

section_with_defaults!(TrainSection {
    max_iterations: u64 = 2000,
    pretrain_iterations: u64 = 1000,
    freeze_iters: u64 = 1000,
    lr_head: f64 = 1e-4,
    lr_sre: f64 = 1e-5,
    lr_pretrain: f64 = 5e-4,
    adam_beta1: f64 = 0.9,
    adam_beta2: f64 = 0.999,
    adam_eps: f64 = 1e-8,
    batch_kws: usize = 8,
    batch_sv: usize = 8,
    batch_pretrain: usize = 8,
    mode: String = "multi_task".to_string(),
    ablation: String = "normal".to_string(),
});

impl TrainSection {
    pub fn build(&self) -> Result<TrainConfig> {
        let mode = match self.mode.as_str() {
            "pretrain" => TrainMode::Pretrain,
            "single_task" => TrainMode::SingleTask,
            "multi_task" => TrainMode::MultiTask,
            other => {
                return Err(Error::config(format!(
                    "train.mode must be pretrain|single_task|multi_task, got '{other}'"
                )))
            }
        };
        let ablation = match self.ablation.as_str() {
            "normal" => Ablation::Normal,
            "random_sre" => Ablation::RandomSre,
            "frozen_sre" => Ablation::FrozenSre,
            other => {
                return Err(Error::config(format!(
                    "train.ablation must be normal|random_sre|frozen_sre, got '{other}'"
                )))
            }
        };
        let cfg = TrainConfig {
            max_iterations: self.max_iterations,
            pretrain_iterations: self.pretrain_iterations,
            freeze_iters: self.freeze_iters,
            lr_head: self.lr_head,
            lr_sre: self.lr_sre,
            lr_pretrain: self.lr_pretrain,
            adam: AdamConfig {
                beta1: self.adam_beta1,
                beta2: self.adam_beta2,
                eps: self.adam_eps,
            },
            batch_kws: self.batch_kws,
            batch_sv: self.batch_sv,
            batch_pretrain: self.batch_pretrain,
            mode,
            ablation,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

section_with_defaults!(SynthSection {
    n_keywords: usize = 12,
    n_speakers: usize = 20,
    clips_per_class: usize = 40,
    held_out_speakers: usize = 4,
    trial_pairs: usize = 200,
});

impl SynthSection {
    pub fn build(&self) -> SynthSpec {
        SynthSpec {
            n_keywords: self.n_keywords,
            n_speakers: self.n_speakers,
            clips_per_class: self.clips_per_class,
            held_out_speakers: self.held_out_speakers,
            trial_pairs: self.trial_pairs,
        }
    }
}

/// Either a synthetic corpus spec or directory roots; exactly one source.
#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub synthetic: Option<SynthSection>,
    pub kws_root: Option<PathBuf>,
    pub sv_root: Option<PathBuf>,
    pub trials: Option<PathBuf>,
}

impl DataSection {
    pub fn validate(&self) -> Result<()> {
        let dirs = self.kws_root.is_some() || self.sv_root.is_some() || self.trials.is_some();
        if self.synthetic.is_some() && dirs {
            return Err(Error::config(
                "data: choose either synthetic or directory roots, not both",
            ));
        }
        Ok(())
    }

    /// Synthetic spec in effect when no directory roots are given.
    pub fn synthetic_spec(&self) -> Option<SynthSpec> {
        if self.kws_root.is_some() || self.sv_root.is_some() || self.trials.is_some() {
            None
        } else {
            Some(
                self.synthetic
                    .clone()
                    .unwrap_or_default()
                    .build(),
            )
        }
    }
}

/// Angular-softmax hyperparameters are the cited recipe's defaults; they are
/// compile-time fixed here but kept in one place.
pub fn angular_config() -> AngularSoftmaxConfig {
    AngularSoftmaxConfig::default()
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig =
        toml::from_str(text).map_err(|e| Error::config(format!("config parse error: {e}")))?;
    cfg.data.validate()?;
    // surface section-level problems immediately
    cfg.sre.build()?;
    cfg.train.build()?;
    if cfg.heads.is_empty() {
        return Err(Error::config("at least one head must be declared"));
    }
    let mut seen = Vec::new();
    for h in &cfg.heads {
        let t = h.task_id()?;
        if seen.contains(&t) {
            return Err(Error::config(format!("duplicate head for task '{}'", h.task)));
        }
        seen.push(t);
        h.build()?;
    }
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<(RunConfig, u64)> {
    let text = std::fs::read_to_string(path)?;
    let cfg = parse_config(&text)?;
    Ok((cfg, config_hash(&text)))
}

/// Hash of the raw config document text.
pub fn config_hash(text: &str) -> u64 {
    fnv1a64(text.as_bytes())
}

/// `MTL_SEED` environment override for the config seed.
pub fn seed_override_from_env() -> Result<Option<u64>> {
    match std::env::var("MTL_SEED") {
        Ok(v) => v
            .trim()
            .parse::<u64>()
            .map(Some)
            .map_err(|_| Error::config(format!("MTL_SEED must be an unsigned integer, got '{v}'"))),
        Err(_) => Ok(None),
    }
}
