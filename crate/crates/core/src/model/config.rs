use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ROPE_BASE: f64 = 10_000.0;

/// Shape of the frozen target model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub vocab: usize,
    pub max_seq: usize,
    pub ffn_dim: usize,
}

impl TargetConfig {
    pub fn model_dim(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn decoder(&self) -> DecoderConfig {
        DecoderConfig {
            vocab: self.vocab,
            model_dim: self.model_dim(),
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            ffn_dim: self.ffn_dim,
            max_seq: self.max_seq,
            cross: None,
        }
    }
}

/// Shape of a draft model. With `cross_attention == false` this is the
/// vanilla drafter: the same stack without the cross-attention sub-layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlideConfig {
    pub n_layers: usize,
    pub draft_dim: usize,
    pub draft_heads: usize,
    pub ffn_dim: usize,
    pub block_length: usize,
    pub cross_attention: bool,
    pub target: TargetConfig,
}

impl GlideConfig {
    pub fn decoder(&self) -> DecoderConfig {
        DecoderConfig {
            vocab: self.target.vocab,
            model_dim: self.draft_dim,
            n_layers: self.n_layers,
            n_heads: self.draft_heads,
            ffn_dim: self.ffn_dim,
            max_seq: self.target.max_seq,
            cross: self.cross_attention.then_some(CrossSpec {
                target_layers: self.target.n_layers,
                target_heads: self.target.n_heads,
                target_head_dim: self.target.head_dim,
            }),
        }
    }

    /// 1-based target layer read by 1-based draft layer `m`, counted from
    /// the top of the target stack.
    pub fn source_layer(&self, m: usize) -> usize {
        self.target.n_layers - self.n_layers + m
    }
}

/// Dimensions of the target KV cache a cross-attention sub-layer reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossSpec {
    pub target_layers: usize,
    pub target_heads: usize,
    pub target_head_dim: usize,
}

/// Internal shape shared by target, GliDe and vanilla draft stacks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub vocab: usize,
    pub model_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub max_seq: usize,
    pub cross: Option<CrossSpec>,
}

impl DecoderConfig {
    pub fn head_dim(&self) -> usize {
        self.model_dim / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab < 2 {
            return bad(format!("vocab {} < 2", self.vocab));
        }
        if self.n_layers == 0 || self.n_heads == 0 || self.ffn_dim == 0 || self.max_seq == 0 {
            return bad("layer, head, ffn and max_seq counts must be positive".into());
        }
        if self.model_dim % self.n_heads != 0 {
            return bad(format!(
                "model_dim {} not divisible by {} heads",
                self.model_dim, self.n_heads
            ));
        }
        if self.head_dim() % 2 != 0 {
            return bad(format!("head_dim {} must be even for rotary", self.head_dim()));
        }
        if let Some(c) = self.cross {
            if c.target_layers < self.n_layers {
                return bad(format!(
                    "draft has {} layers but target only {}",
                    self.n_layers, c.target_layers
                ));
            }
            if c.target_head_dim % 2 != 0 || c.target_heads == 0 {
                return bad("target head_dim must be even and heads positive".into());
            }
        }
        Ok(())
    }
}
