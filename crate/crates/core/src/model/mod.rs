//! Target and draft model runtimes.

mod cache;
pub mod checkpoint;
mod config;
mod decoder;

pub use cache::KvCache;
pub use checkpoint::{load_checkpoint, Checkpoint};
pub use config::{CrossSpec, DecoderConfig, GlideConfig, TargetConfig, ROPE_BASE};
pub use decoder::{CrossSource, CrossSpan, CrossVisibility, Decoder, ForwardArgs, Tape};

use crate::error::{contract, Result};
use crate::mask::{AttentionMask, BlockAssignment};
use crate::tensor::{seeded_rng, Matrix, ProbabilityVector, TokenId};

fn logits_to_dists(logits: &Matrix) -> Vec<ProbabilityVector> {
    (0..logits.rows())
        .map(|r| ProbabilityVector::from_logits(logits.row(r)))
        .collect()
}

/// The frozen target model.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetModel {
    pub cfg: TargetConfig,
    pub decoder: Decoder,
}

impl TargetModel {
    pub fn new(cfg: TargetConfig, seed: u64) -> Result<Self> {
        let decoder = Decoder::new(cfg.decoder(), &mut seeded_rng(seed))?;
        Ok(Self { cfg, decoder })
    }

    pub fn new_cache(&self) -> KvCache {
        self.decoder.new_cache()
    }

    /// Processes `ctx` right after the cached prefix and returns one
    /// next-token distribution per input token. Keys and values of `ctx`
    /// are appended to `cache`; callers truncate rejected rows afterwards.
    pub fn forward(&self, ctx: &[TokenId], cache: &mut KvCache) -> Result<Vec<ProbabilityVector>> {
        let positions: Vec<usize> = (cache.len()..cache.len() + ctx.len()).collect();
        self.forward_masked(ctx, &positions, None, cache)
    }

    /// Like [`TargetModel::forward`] with explicit positions and an
    /// explicit visibility mask among the new tokens.
    pub fn forward_masked(
        &self,
        tokens: &[TokenId],
        positions: &[usize],
        chunk_mask: Option<&AttentionMask>,
        cache: &mut KvCache,
    ) -> Result<Vec<ProbabilityVector>> {
        let args = ForwardArgs {
            tokens,
            positions,
            chunk_mask,
            cross: None,
        };
        let logits = self.decoder.forward(&args, cache, None, None)?;
        Ok(logits_to_dists(&logits))
    }

    /// Full causal pass over `tokens` from position 0, returning the filled
    /// cache. This is the key/value source for draft training.
    pub fn encode(&self, tokens: &[TokenId]) -> Result<(Vec<ProbabilityVector>, KvCache)> {
        let mut cache = self.new_cache();
        let dists = self.forward(tokens, &mut cache)?;
        Ok((dists, cache))
    }

    pub fn checksum(&self) -> u64 {
        self.decoder.checksum()
    }
}

/// Cuts every layer and head of `cache` back to `keep` rows.
pub fn truncate_cache(cache: &mut KvCache, keep: usize) -> Result<()> {
    cache.truncate(keep)
}

/// A GliDe draft model, or the vanilla drafter when cross-attention is off.
#[derive(Debug, Clone, PartialEq)]
pub struct DraftModel {
    pub cfg: GlideConfig,
    pub decoder: Decoder,
}

impl DraftModel {
    pub fn new(cfg: GlideConfig, seed: u64) -> Result<Self> {
        if cfg.block_length == 0 {
            return Err(crate::error::Error::Config("block_length must be >= 1".into()));
        }
        let decoder = Decoder::new(cfg.decoder(), &mut seeded_rng(seed))?;
        Ok(Self { cfg, decoder })
    }

    pub fn has_cross_attention(&self) -> bool {
        self.cfg.cross_attention
    }

    /// The draft's own self-attention cache.
    pub fn new_cache(&self) -> KvCache {
        self.decoder.new_cache()
    }

    pub fn blocks(&self) -> BlockAssignment {
        BlockAssignment {
            block_length: self.cfg.block_length,
        }
    }

    /// Incremental draft step. `draft_ctx` continues right after the rows in
    /// `draft_cache`; `target_cache` is the delayed target cache and must
    /// hold exactly `query_start` rows, i.e. every verified token before
    /// the one at 0-based position `query_start`. Rows at positions before
    /// `query_start` skip cross-attention.
    pub fn forward(
        &self,
        draft_ctx: &[TokenId],
        draft_cache: &mut KvCache,
        target_cache: &KvCache,
        query_start: usize,
        probe: Option<&mut Vec<CrossSpan>>,
    ) -> Result<Vec<ProbabilityVector>> {
        let positions: Vec<usize> = (draft_cache.len()..draft_cache.len() + draft_ctx.len()).collect();
        let cross = if self.cfg.cross_attention {
            if target_cache.len() != query_start {
                return Err(contract(format!(
                    "delayed cache must hold {query_start} rows, has {}",
                    target_cache.len()
                )));
            }
            Some(CrossSource {
                kv: target_cache,
                visibility: CrossVisibility::Delayed { query_start },
            })
        } else {
            None
        };
        let args = ForwardArgs {
            tokens: draft_ctx,
            positions: &positions,
            chunk_mask: None,
            cross,
        };
        let logits = self.decoder.forward(&args, draft_cache, None, probe)?;
        Ok(logits_to_dists(&logits))
    }

    /// One-shot pass over `draft_ctx` from position 0 with a fresh draft cache.
    pub fn glide_forward(
        &self,
        draft_ctx: &[TokenId],
        target_cache: &KvCache,
        query_start: usize,
    ) -> Result<Vec<ProbabilityVector>> {
        let mut cache = self.new_cache();
        self.forward(draft_ctx, &mut cache, target_cache, query_start, None)
    }

    /// Training-time pass over a whole sequence: cross-attention reads the
    /// target's full-sequence cache through the block-wise mask.
    pub fn forward_blocked(
        &self,
        tokens: &[TokenId],
        target_kv: Option<&KvCache>,
        tape: Option<&mut Tape>,
        probe: Option<&mut Vec<CrossSpan>>,
    ) -> Result<Matrix> {
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let cross = match (self.cfg.cross_attention, target_kv) {
            (true, Some(kv)) => Some(CrossSource {
                kv,
                visibility: CrossVisibility::Block(self.blocks()),
            }),
            (true, None) => return Err(contract("GliDe training needs the target cache")),
            (false, _) => None,
        };
        let args = ForwardArgs {
            tokens,
            positions: &positions,
            chunk_mask: None,
            cross,
        };
        let mut cache = self.new_cache();
        self.decoder.forward(&args, &mut cache, tape, probe)
    }

    /// Copy of this model with every cross-attention sub-layer removed.
    pub fn without_cross_attention(&self) -> Self {
        let mut cfg = self.cfg;
        cfg.cross_attention = false;
        let mut decoder = self.decoder.clone();
        decoder.cfg = cfg.decoder();
        for l in &mut decoder.layers {
            l.cross = None;
        }
        Self { cfg, decoder }
    }
}
