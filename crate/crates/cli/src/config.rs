//! Run configuration file. Every field is optional; the command falls back
//! to its own default when neither a flag nor the file sets a value.

use std::path::Path;

use anyhow::Context;
use evidence_core::training::{Decay, MaskingPolicy, TrainSchedule};
use evidence_core::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::Usage;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: Option<u64>,
    pub ingest: IngestConfig,
    pub model: ModelSection,
    pub pretrain: PretrainConfig,
    pub masking: MaskingConfig,
    pub finetune: FinetuneConfig,
    pub explain: ExplainConfig,
    pub fewshot: FewshotConfig,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    pub ratios: Option<[f64; 3]>,
    pub page_size: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub num_blocks: Option<usize>,
    pub context_width: Option<usize>,
    pub embed_dim: Option<usize>,
    pub hidden_dim: Option<usize>,
    pub num_heads: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub accumulation: Option<usize>,
    pub learning_rate: Option<f64>,
    pub warmup_steps: Option<usize>,
    pub decay: Option<Decay>,
    pub max_grad_norm: Option<f64>,
    pub min_tokens: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskingConfig {
    pub mask_rate: Option<f64>,
    pub random_rate: Option<f64>,
    pub revert_rate: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub seeds: Option<Vec<u64>>,
    pub grid_learning_rates: Option<Vec<f64>>,
    pub grid_batch_sizes: Option<Vec<usize>>,
    pub seeds_per_cell: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainConfig {
    pub steps: Option<usize>,
    pub baseline: Option<String>,
    pub top: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FewshotConfig {
    pub shots: Option<Vec<usize>>,
    pub repetitions: Option<usize>,
    pub per_level: Option<usize>,
    pub token_budget: Option<usize>,
}

impl Config {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Config> {
        let Some(path) = path else {
            return Ok(Config::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).map_err(|e| Usage(format!("config {}: {e}", path.display())).into())
    }

    /// Desk-scale model with any overrides from the file.
    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        let d = ModelConfig::default();
        let m = &self.model;
        ModelConfig {
            num_blocks: m.num_blocks.unwrap_or(d.num_blocks),
            context_width: m.context_width.unwrap_or(d.context_width),
            embed_dim: m.embed_dim.unwrap_or(d.embed_dim),
            hidden_dim: m.hidden_dim.unwrap_or(d.hidden_dim),
            num_heads: m.num_heads.unwrap_or(d.num_heads),
            vocab_size,
            ..d
        }
    }

    pub fn schedule(&self, steps: Option<usize>, seed: Option<u64>) -> TrainSchedule {
        let d = TrainSchedule::pretraining();
        let p = &self.pretrain;
        TrainSchedule {
            steps: steps.or(p.steps).unwrap_or(d.steps),
            batch_size: p.batch_size.unwrap_or(d.batch_size),
            accumulation: p.accumulation.unwrap_or(d.accumulation),
            learning_rate: p.learning_rate.unwrap_or(d.learning_rate),
            warmup_steps: p.warmup_steps.unwrap_or(d.warmup_steps),
            decay: p.decay.unwrap_or(d.decay),
            max_grad_norm: p.max_grad_norm.or(d.max_grad_norm),
            seed: seed.or(self.seed).unwrap_or(d.seed),
            ..d
        }
    }

    pub fn masking(&self) -> MaskingPolicy {
        let d = MaskingPolicy::default();
        let m = &self.masking;
        MaskingPolicy {
            mask_rate: m.mask_rate.unwrap_or(d.mask_rate),
            random_rate: m.random_rate.unwrap_or(d.random_rate),
            revert_rate: m.revert_rate.unwrap_or(d.revert_rate),
        }
    }
}
