//! Compact encoder-only transformer: token + learned positional
//! embeddings, pre-layer-norm blocks of unmasked multi-head self-attention
//! and a GELU feed-forward, a final layer norm, a bare linear MLM head
//! (`X W`) and a bare linear classification head over the first position
//! (`e_cls W`). All gradients are derived by hand for this fixed
//! architecture.

mod checkpoint;
mod layers;
mod model;
#[cfg(test)]
mod tests;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use layers::{gelu, gelu_grad};
pub use model::{
    loss_mlm, loss_multilabel, BlockParams, EncoderModel, ForwardCache, MlmTarget, Objective, Params,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::NUM_LEVELS;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_blocks: usize,
    pub context_width: usize,
    pub embed_dim: usize,
    /// Feed-forward width.
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub vocab_size: usize,
    #[serde(default = "default_labels")]
    pub num_labels: usize,
    #[serde(default = "default_ln_eps")]
    pub layer_norm_eps: f64,
}

fn default_labels() -> usize {
    NUM_LEVELS
}

fn default_ln_eps() -> f64 {
    1e-5
}

impl Default for ModelConfig {
    /// Desk-scale configuration.
    fn default() -> Self {
        Self {
            num_blocks: 2,
            context_width: 128,
            embed_dim: 64,
            hidden_dim: 256,
            num_heads: 4,
            vocab_size: 8192,
            num_labels: NUM_LEVELS,
            layer_norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// 12 blocks, width 768, 512 positions. Feed-forward at 4x width.
    pub fn full_scale(vocab_size: usize) -> Self {
        Self {
            num_blocks: 12,
            context_width: 512,
            embed_dim: 768,
            hidden_dim: 3072,
            num_heads: 12,
            vocab_size,
            num_labels: NUM_LEVELS,
            layer_norm_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("num_blocks", self.num_blocks),
            ("context_width", self.context_width),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("vocab_size", self.vocab_size),
            ("num_labels", self.num_labels),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be at least 1")));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::invalid(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::invalid("layer_norm_eps must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    /// Closed-form parameter count.
    pub fn parameter_count(&self) -> usize {
        let (v, n, e, h, l) = (
            self.vocab_size,
            self.context_width,
            self.embed_dim,
            self.hidden_dim,
            self.num_labels,
        );
        let block = 2 * e + 4 * (e * e + e) + 2 * e + (e * h + h) + (h * e + e);
        v * e + n * e + self.num_blocks * block + 2 * e + e * v + e * l
    }
}
