//! Proposal generation and confidence-aware proposal expansion.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::mask::{cape_mask, AttentionMask, PositionMap};
use crate::model::{DraftModel, KvCache};
use crate::tensor::{sample_token, ProbabilityVector, SeededRng, TokenId};

/// How many runner-up tokens to attach to each proposal position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "size")]
pub enum ExpansionRule {
    /// Size from the draft's confidence via [`expansion_size`].
    Confidence,
    /// The same size at every position.
    Fixed(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeculationConfig {
    pub gamma: usize,
    pub max_verify_tokens: usize,
    pub expansion: ExpansionRule,
}

impl Default for SpeculationConfig {
    fn default() -> Self {
        Self {
            gamma: 5,
            max_verify_tokens: 32,
            expansion: ExpansionRule::Confidence,
        }
    }
}

impl SpeculationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma == 0 {
            return Err(contract("gamma must be at least 1"));
        }
        if self.max_verify_tokens < self.gamma {
            return Err(contract(format!(
                "max_verify_tokens {} < gamma {}",
                self.max_verify_tokens, self.gamma
            )));
        }
        Ok(())
    }
}

/// Expansion-set size for a proposal token drafted with confidence `p`:
/// 7 on (0, 0.3], 5 on (0.3, 0.6], 3 on (0.6, 0.8], 1 on (0.8, 1].
pub fn expansion_size(p: f64) -> Result<usize> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(contract(format!("confidence {p} outside (0, 1]")));
    }
    Ok(if p <= 0.3 {
        7
    } else if p <= 0.6 {
        5
    } else if p <= 0.8 {
        3
    } else {
        1
    })
}

/// How proposal tokens are chosen from the draft distribution.
pub enum Sampler<'a> {
    Greedy,
    Sample(&'a mut SeededRng),
}

/// A standard proposal with the draft distribution behind every token.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub tokens: Vec<TokenId>,
    pub dists: Vec<ProbabilityVector>,
}

impl Proposal {
    pub fn gamma(&self) -> usize {
        self.tokens.len()
    }

    /// `p_i`: the top draft probability at each position.
    pub fn confidences(&self) -> Vec<f64> {
        self.dists.iter().map(|d| d.max_prob()).collect()
    }
}

/// Drafts `gamma` tokens continuing `committed`.
///
/// `draft_cache` holds draft self-attention rows for a prefix of
/// `committed` (at least the final token must be uncached) and is left
/// holding rows through the second-to-last proposed token. `target_cache`
/// is the delayed target cache: rows for every committed token except the
/// last.
pub fn propose(
    draft: &DraftModel,
    committed: &[TokenId],
    draft_cache: &mut KvCache,
    target_cache: &KvCache,
    gamma: usize,
    sampler: &mut Sampler<'_>,
) -> Result<Proposal> {
    if gamma == 0 || committed.is_empty() {
        return Err(contract("propose needs gamma >= 1 and a nonempty prefix"));
    }
    if draft_cache.len() >= committed.len() {
        return Err(contract("draft cache must leave the newest committed token uncached"));
    }
    let query_start = committed.len() - 1;
    let mut feed: Vec<TokenId> = committed[draft_cache.len()..].to_vec();
    let mut tokens = Vec::with_capacity(gamma);
    let mut dists = Vec::with_capacity(gamma);
    for i in 0..gamma {
        let rows = draft.forward(&feed, draft_cache, target_cache, query_start, None)?;
        let dist = rows.into_iter().last().expect("nonempty feed");
        let tok = match sampler {
            Sampler::Greedy => dist.argmax(),
            Sampler::Sample(rng) => sample_token(&dist, rng),
        };
        tokens.push(tok);
        dists.push(dist);
        if i + 1 < gamma {
            feed = vec![tok];
        }
    }
    Ok(Proposal { tokens, dists })
}

/// A proposal plus one expansion set per position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpandedProposal {
    pub tokens: Vec<TokenId>,
    pub confidences: Vec<f64>,
    /// `X_i`, best first.
    pub sets: Vec<Vec<TokenId>>,
    /// Draft probability of each member of `sets`.
    pub set_probs: Vec<Vec<f64>>,
}

impl ExpandedProposal {
    pub fn gamma(&self) -> usize {
        self.tokens.len()
    }

    pub fn set_sizes(&self) -> Vec<usize> {
        self.sets.iter().map(Vec::len).collect()
    }
}

/// Attaches to each proposal token its next-best draft candidates. Ties in
/// probability go to the lower token id; set sizes are capped at `V - 1`.
pub fn expand(proposal: &Proposal, rule: ExpansionRule) -> Result<ExpandedProposal> {
    let mut sets = Vec::with_capacity(proposal.gamma());
    let mut set_probs = Vec::with_capacity(proposal.gamma());
    let confidences = proposal.confidences();
    for ((dist, &tok), &p) in proposal.dists.iter().zip(&proposal.tokens).zip(&confidences) {
        let k = match rule {
            ExpansionRule::Confidence => expansion_size(p)?,
            ExpansionRule::Fixed(k) => k,
        }
        .min(dist.len() - 1);
        let set: Vec<TokenId> = dist.ranked().into_iter().filter(|&t| t != tok).take(k).collect();
        set_probs.push(set.iter().map(|&t| dist.prob(t)).collect());
        sets.push(set);
    }
    Ok(ExpandedProposal {
        tokens: proposal.tokens.clone(),
        confidences,
        sets,
        set_probs,
    })
}

/// A flat sequence ready for one masked verification pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizedProposal {
    /// Proposal tokens followed by surviving expansion tokens.
    pub tokens: Vec<TokenId>,
    pub posmap: PositionMap,
    pub mask: AttentionMask,
    /// Surviving expansion-set sizes per position.
    pub set_sizes: Vec<usize>,
    /// Draft probability of each expansion slot, in linearized order.
    pub expansion_probs: Vec<f64>,
    /// Expansion tokens dropped to fit the verification budget.
    pub dropped: usize,
}

impl LinearizedProposal {
    pub fn gamma(&self) -> usize {
        self.posmap.gamma()
    }

    pub fn beta(&self) -> usize {
        self.tokens.len()
    }
}

/// Flattens an expanded proposal: proposal tokens, then expansion tokens by
/// ascending position and, within a position, descending draft probability.
///
/// When the total exceeds `max_verify_tokens`, the lowest-probability
/// expansion tokens are dropped (ties: later position first, then higher
/// token id). Proposal tokens are never dropped.
pub fn linearize(ep: &ExpandedProposal, cfg: &SpeculationConfig) -> Result<LinearizedProposal> {
    cfg.validate()?;
    let gamma = ep.gamma();
    if gamma > cfg.max_verify_tokens {
        return Err(contract("proposal alone exceeds the verification budget"));
    }
    // (position, rank within set, token, prob)
    let mut slots: Vec<(usize, usize, TokenId, f64)> = ep
        .sets
        .iter()
        .zip(&ep.set_probs)
        .enumerate()
        .flat_map(|(i, (set, probs))| {
            set.iter()
                .zip(probs)
                .enumerate()
                .map(move |(r, (&t, &p))| (i + 1, r, t, p))
        })
        .collect();
    let budget = cfg.max_verify_tokens - gamma;
    let mut dropped = 0;
    if slots.len() > budget {
        let mut order: Vec<usize> = (0..slots.len()).collect();
        order.sort_by(|&a, &b| {
            let (sa, sb) = (&slots[a], &slots[b]);
            sa.3.total_cmp(&sb.3)
                .then(sb.0.cmp(&sa.0))
                .then(sb.2.cmp(&sa.2))
        });
        dropped = slots.len() - budget;
        let mut keep = vec![true; slots.len()];
        for &idx in &order[..dropped] {
            keep[idx] = false;
        }
        let mut k = keep.into_iter();
        slots.retain(|_| k.next().expect("same length"));
    }
    slots.sort_by_key(|s| (s.0, s.1));
    let mut set_sizes = vec![0; gamma];
    for s in &slots {
        set_sizes[s.0 - 1] += 1;
    }
    let positions: Vec<usize> = slots.iter().map(|s| s.0).collect();
    let posmap = PositionMap::new(gamma, &positions)?;
    let mask = cape_mask(gamma, &posmap)?;
    let mut tokens = ep.tokens.clone();
    tokens.extend(slots.iter().map(|s| s.2));
    Ok(LinearizedProposal {
        tokens,
        posmap,
        mask,
        set_sizes,
        expansion_probs: slots.iter().map(|s| s.3).collect(),
        dropped,
    })
}

/// One confidence bucket of width 0.1; the last bucket includes 1.0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketStat {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub accepted: usize,
    pub acceptance: f64,
}

impl BucketStat {
    pub fn midpoint(&self) -> f64 {
        (self.lo + self.hi) / 2.0
    }
}

/// Per-bucket acceptance fraction of proposed tokens, keyed by the draft
/// confidence they were proposed with. Empty buckets are omitted.
pub fn confidence_acceptance_profile(log: &[(f64, bool)]) -> Vec<BucketStat> {
    let mut counts = [(0usize, 0usize); 10];
    for &(p, ok) in log {
        let b = ((p * 10.0).floor() as usize).min(9);
        counts[b].0 += 1;
        counts[b].1 += ok as usize;
    }
    counts
        .iter()
        .enumerate()
        .filter(|(_, c)| c.0 > 0)
        .map(|(b, &(count, accepted))| BucketStat {
            lo: b as f64 / 10.0,
            hi: (b + 1) as f64 / 10.0,
            count,
            accepted,
            acceptance: accepted as f64 / count as f64,
        })
        .collect()
}

/// Spearman rank correlation with average ranks for ties. `None` when
/// fewer than two points or either side is constant.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(cov / (vx * vy).sqrt())
}
