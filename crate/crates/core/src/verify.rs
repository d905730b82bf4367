//! Target-side verification and the speculative decoding loop.
//!
//! Cache convention used throughout: once the committed sequence is
//! `x_1..x_c`, the target cache holds rows for `x_1..x_{c-1}`. The newest
//! committed token (the bonus from the last round) is fed to the target at
//! the start of the next verification pass, and the draft cross-attends to
//! exactly those `c - 1` rows while proposing.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::mask::AttentionMask;
use crate::model::{DraftModel, KvCache, TargetModel};
use crate::speculation::{expand, linearize, propose, LinearizedProposal, Sampler, SpeculationConfig};
use crate::tensor::{sample_token, seeded_rng, ProbabilityVector, SeededRng, TokenId};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Substitution {
    /// 1-based proposal position that was replaced.
    pub position: usize,
    pub token: TokenId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationResult {
    pub accepted_len: usize,
    pub accepted_tokens: Vec<TokenId>,
    pub bonus_token: TokenId,
    pub commit_len: usize,
    pub accepted_from_expansion: Option<Substitution>,
}

impl VerificationResult {
    /// Original proposal tokens accepted, not counting a substitution.
    pub fn plain_accepted(&self) -> usize {
        self.accepted_len - usize::from(self.accepted_from_expansion.is_some())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcceptanceStrategy {
    Greedy,
    Sampling,
}

fn check_rows(rows: usize, expected: usize) -> Result<()> {
    if rows != expected {
        return Err(contract(format!(
            "expected {expected} target rows, got {rows}"
        )));
    }
    Ok(())
}

/// Greedy verification. `target` row `i` is the target distribution after
/// the committed prefix and the first `i` proposal tokens (`gamma + 1`
/// rows). `prefix_len` is the committed length before this round.
pub fn verify_greedy(
    proposal: &[TokenId],
    target: &[ProbabilityVector],
    prefix_len: usize,
) -> Result<VerificationResult> {
    check_rows(target.len(), proposal.len() + 1)?;
    let n = proposal
        .iter()
        .zip(target)
        .take_while(|(&tok, row)| row.argmax() == tok)
        .count();
    Ok(VerificationResult {
        accepted_len: n,
        accepted_tokens: proposal[..n].to_vec(),
        bonus_token: target[n].argmax(),
        commit_len: prefix_len + n + 1,
        accepted_from_expansion: None,
    })
}

/// Speculative sampling: accept `x` with probability
/// `min(1, p_T(x) / p_D(x))`; on rejection, draw the replacement from
/// `norm(max(0, p_T - p_D))`; on full acceptance, draw one more token from
/// the final target row.
pub fn verify_sampling(
    proposal: &[TokenId],
    draft: &[ProbabilityVector],
    target: &[ProbabilityVector],
    rng: &mut SeededRng,
    prefix_len: usize,
) -> Result<VerificationResult> {
    check_rows(target.len(), proposal.len() + 1)?;
    check_rows(draft.len(), proposal.len())?;
    for (i, &tok) in proposal.iter().enumerate() {
        let pd = draft[i].prob(tok);
        let pt = target[i].prob(tok);
        let accept = pd <= pt || rng.gen::<f64>() < pt / pd;
        if !accept {
            let bonus = sample_token(&residual(&target[i], &draft[i]), rng);
            return Ok(VerificationResult {
                accepted_len: i,
                accepted_tokens: proposal[..i].to_vec(),
                bonus_token: bonus,
                commit_len: prefix_len + i + 1,
                accepted_from_expansion: None,
            });
        }
    }
    let n = proposal.len();
    Ok(VerificationResult {
        accepted_len: n,
        accepted_tokens: proposal.to_vec(),
        bonus_token: sample_token(&target[n], rng),
        commit_len: prefix_len + n + 1,
        accepted_from_expansion: None,
    })
}

/// `norm(max(0, p_T - p_D))`, falling back to `p_T` when the difference
/// carries no mass.
pub fn residual(target: &ProbabilityVector, draft: &ProbabilityVector) -> ProbabilityVector {
    let diff: Vec<f64> = target
        .probs()
        .iter()
        .zip(draft.probs())
        .map(|(t, d)| (t - d).max(0.0))
        .collect();
    let mass: f64 = diff.iter().sum();
    if mass <= 0.0 {
        return target.clone();
    }
    ProbabilityVector::new(diff.into_iter().map(|v| v / mass).collect())
        .unwrap_or_else(|_| target.clone())
}

/// Greedy verification of a linearized expanded proposal.
///
/// `target` has `beta + 1` rows: row 0 belongs to the newest committed
/// token, row `s` to linearized slot `s` (1-based), each computed under the
/// expanded-proposal mask. When proposal token `i` is rejected but the
/// target's choice is in `X_i`, that candidate is accepted and the bonus
/// comes from its own row.
pub fn verify_cape(
    lin: &LinearizedProposal,
    target: &[ProbabilityVector],
    prefix_len: usize,
) -> Result<(VerificationResult, Option<usize>)> {
    let gamma = lin.gamma();
    check_rows(target.len(), lin.beta() + 1)?;
    let mut accepted = Vec::with_capacity(gamma);
    for i in 1..=gamma {
        let want = target[i - 1].argmax();
        if lin.tokens[i - 1] == want {
            accepted.push(want);
            continue;
        }
        let slot = (gamma + 1..=lin.beta()).find(|&s| lin.posmap.pos(s) == i && lin.tokens[s - 1] == want);
        let n = accepted.len();
        return Ok(match slot {
            Some(s) => {
                accepted.push(want);
                (
                    VerificationResult {
                        accepted_len: n + 1,
                        accepted_tokens: accepted,
                        bonus_token: target[s].argmax(),
                        commit_len: prefix_len + n + 2,
                        accepted_from_expansion: Some(Substitution {
                            position: i,
                            token: want,
                        }),
                    },
                    Some(s),
                )
            }
            None => (
                VerificationResult {
                    accepted_len: n,
                    accepted_tokens: accepted,
                    bonus_token: want,
                    commit_len: prefix_len + n + 1,
                    accepted_from_expansion: None,
                },
                None,
            ),
        });
    }
    Ok((
        VerificationResult {
            accepted_len: gamma,
            accepted_tokens: accepted,
            bonus_token: target[gamma].argmax(),
            commit_len: prefix_len + gamma + 1,
            accepted_from_expansion: None,
        },
        None,
    ))
}

/// Attention mask for a verification chunk `[x_t, slots...]`: `x_t` sees
/// itself, every slot sees `x_t`, and slots see each other through `lin.mask`.
fn verification_chunk_mask(lin: &LinearizedProposal) -> AttentionMask {
    let beta = lin.beta();
    AttentionMask::from_fn(beta + 1, beta + 1, |r, c| {
        if r == 0 {
            c == 0
        } else {
            c == 0 || (c >= 1 && lin.mask.allowed(r - 1, c - 1))
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub strategy: AcceptanceStrategy,
    pub speculation: SpeculationConfig,
    pub cape: bool,
    pub max_new: usize,
    pub eos: Option<TokenId>,
    pub seed: u64,
}

impl DecodeConfig {
    pub fn greedy(gamma: usize, max_new: usize) -> Self {
        Self {
            strategy: AcceptanceStrategy::Greedy,
            speculation: SpeculationConfig {
                gamma,
                ..SpeculationConfig::default()
            },
            cape: false,
            max_new,
            eos: None,
            seed: 0,
        }
    }
}

/// One speculation-and-verification round, as written to the trace log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub round: usize,
    pub proposal_tokens: Vec<TokenId>,
    pub confidences: Vec<f64>,
    pub set_sizes: Vec<usize>,
    pub beta: usize,
    pub accepted_len: usize,
    pub bonus_token: TokenId,
    pub accepted_tokens: Vec<TokenId>,
    pub substitution: Option<Substitution>,
    pub commit_len: usize,
    /// Original proposal tokens accepted (a substitution is not counted).
    pub proposal_accepted: usize,
    pub draft_us: u64,
    pub expand_us: u64,
    pub verify_us: u64,
}

impl RoundTrace {
    /// `(confidence, accepted)` for every proposal token the target judged.
    /// Tokens after the first rejection were never judged.
    pub fn judged(&self) -> impl Iterator<Item = (f64, bool)> + '_ {
        let gamma = self.proposal_tokens.len();
        let judged = (self.proposal_accepted + 1).min(gamma);
        self.confidences[..judged]
            .iter()
            .enumerate()
            .map(move |(i, &p)| (p, i < self.proposal_accepted))
    }

    pub fn committed(&self) -> usize {
        self.accepted_len + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeOutput {
    pub tokens: Vec<TokenId>,
    pub trace: Vec<RoundTrace>,
}

impl DecodeOutput {
    pub fn rounds(&self) -> usize {
        self.trace.len()
    }

    /// Committed tokens per round, before truncation to `max_new`.
    pub fn tokens_per_step(&self) -> f64 {
        let total: usize = self.trace.iter().map(RoundTrace::committed).sum();
        total as f64 / self.trace.len().max(1) as f64
    }
}

fn micros(t: Instant) -> u64 {
    t.elapsed().as_micros() as u64
}

/// Runs speculative decoding from `prompt` until `max_new` tokens or `eos`.
pub fn decode_session(
    prompt: &[TokenId],
    draft: &DraftModel,
    target: &TargetModel,
    cfg: &DecodeConfig,
) -> Result<DecodeOutput> {
    if prompt.is_empty() {
        return Err(contract("prompt must be nonempty"));
    }
    cfg.speculation.validate()?;
    if cfg.cape && cfg.strategy != AcceptanceStrategy::Greedy {
        return Err(contract("expanded proposals are verified greedily only"));
    }
    if draft.cfg.target.vocab != target.cfg.vocab {
        return Err(contract("draft and target vocabularies differ"));
    }
    let gamma = cfg.speculation.gamma;
    let mut rng = seeded_rng(cfg.seed);
    let mut committed = prompt.to_vec();
    let mut target_cache = target.new_cache();
    if committed.len() > 1 {
        target.forward(&committed[..committed.len() - 1], &mut target_cache)?;
    }
    let mut draft_cache = draft.new_cache();
    let mut trace = Vec::new();

    while committed.len() - prompt.len() < cfg.max_new {
        let t = committed.len();
        debug_assert_eq!(target_cache.len(), t - 1);
        let last = committed[t - 1];

        let clock = Instant::now();
        let proposal = {
            let mut sampler = match cfg.strategy {
                AcceptanceStrategy::Greedy => Sampler::Greedy,
                AcceptanceStrategy::Sampling => Sampler::Sample(&mut rng),
            };
            propose(draft, &committed, &mut draft_cache, &target_cache, gamma, &mut sampler)?
        };
        let draft_us = micros(clock);

        let base = t - 1;
        let (result, set_sizes, beta, expand_us, verify_us);
        if cfg.cape {
            let clock = Instant::now();
            let ep = expand(&proposal, cfg.speculation.expansion)?;
            let lin = linearize(&ep, &cfg.speculation)?;
            expand_us = micros(clock);
            let clock = Instant::now();
            let mut tokens = vec![last];
            tokens.extend_from_slice(&lin.tokens);
            let mut positions = vec![base];
            positions.extend(lin.posmap.as_slice().iter().map(|&p| base + p));
            let mask = verification_chunk_mask(&lin);
            let rows = target.forward_masked(&tokens, &positions, Some(&mask), &mut target_cache)?;
            let (res, slot) = verify_cape(&lin, &rows, t)?;
            let mut keep: Vec<usize> = (0..base + 1 + res.plain_accepted()).collect();
            if let Some(s) = slot {
                keep.push(base + s);
            }
            target_cache.retain_rows(&keep)?;
            verify_us = micros(clock);
            set_sizes = lin.set_sizes.clone();
            beta = lin.beta();
            result = res;
        } else {
            expand_us = 0;
            let clock = Instant::now();
            let mut tokens = vec![last];
            tokens.extend_from_slice(&proposal.tokens);
            let rows = target.forward(&tokens, &mut target_cache)?;
            let res = match cfg.strategy {
                AcceptanceStrategy::Greedy => verify_greedy(&proposal.tokens, &rows, t)?,
                AcceptanceStrategy::Sampling => {
                    verify_sampling(&proposal.tokens, &proposal.dists, &rows, &mut rng, t)?
                }
            };
            target_cache.truncate(base + 1 + res.accepted_len)?;
            verify_us = micros(clock);
            set_sizes = vec![0; gamma];
            beta = gamma;
            result = res;
        }

        committed.extend_from_slice(&result.accepted_tokens);
        committed.push(result.bonus_token);
        debug_assert_eq!(committed.len(), result.commit_len);
        debug_assert_eq!(target_cache.len(), committed.len() - 1);
        // draft rows stay valid through the last accepted proposal token it processed
        let keep = draft_cache.len().min(t + result.plain_accepted());
        draft_cache.truncate(keep)?;

        let new_tokens = &committed[t..];
        let hit_eos = cfg.eos.is_some_and(|e| new_tokens.contains(&e));
        trace.push(RoundTrace {
            round: trace.len(),
            proposal_tokens: proposal.tokens.clone(),
            confidences: proposal.confidences(),
            set_sizes,
            beta,
            accepted_len: result.accepted_len,
            bonus_token: result.bonus_token,
            accepted_tokens: result.accepted_tokens.clone(),
            substitution: result.accepted_from_expansion.clone(),
            commit_len: result.commit_len,
            proposal_accepted: result.plain_accepted(),
            draft_us,
            expand_us,
            verify_us,
        });
        if hit_eos {
            break;
        }
    }

    let mut tokens = committed[prompt.len()..].to_vec();
    if let Some(e) = cfg.eos {
        if let Some(i) = tokens.iter().position(|&t| t == e) {
            tokens.truncate(i + 1);
        }
    }
    tokens.truncate(cfg.max_new);
    Ok(DecodeOutput { tokens, trace })
}

/// Plain autoregressive greedy decoding with the target alone.
pub fn target_greedy_decode(
    target: &TargetModel,
    prompt: &[TokenId],
    max_new: usize,
    eos: Option<TokenId>,
) -> Result<Vec<TokenId>> {
    if prompt.is_empty() {
        return Err(contract("prompt must be nonempty"));
    }
    let mut cache = target.new_cache();
    if prompt.len() > 1 {
        target.forward(&prompt[..prompt.len() - 1], &mut cache)?;
    }
    let mut last = *prompt.last().expect("nonempty");
    let mut out = Vec::with_capacity(max_new);
    while out.len() < max_new {
        let row = target.forward(&[last], &mut cache)?;
        last = row[0].argmax();
        out.push(last);
        if eos == Some(last) {
            break;
        }
    }
    Ok(out)
}

/// A prefilled target cache for `prefix`, following the session convention
/// (rows for every token but the last).
pub fn prefill(target: &TargetModel, prefix: &[TokenId]) -> Result<KvCache> {
    let mut cache = target.new_cache();
    if prefix.len() > 1 {
        target.forward(&prefix[..prefix.len() - 1], &mut cache)?;
    }
    Ok(cache)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::PositionMap;

    fn onehot(v: usize, t: TokenId) -> ProbabilityVector {
        ProbabilityVector::one_hot(v, t)
    }

    #[test]
    fn greedy_full_and_zero_acceptance() {
        let rows = vec![onehot(4, 1), onehot(4, 2), onehot(4, 3)];
        let r = verify_greedy(&[1, 2], &rows, 10).unwrap();
        assert_eq!((r.accepted_len, r.bonus_token, r.commit_len), (2, 3, 13));
        let r = verify_greedy(&[0, 2], &rows, 10).unwrap();
        assert_eq!((r.accepted_len, r.bonus_token, r.commit_len), (0, 1, 11));
        assert!(verify_greedy(&[1], &rows, 0).is_err());
    }

    #[test]
    fn sampling_equal_dists_always_accepts() {
        let p = ProbabilityVector::new(vec![0.2, 0.3, 0.5]).unwrap();
        let mut rng = seeded_rng(1);
        for _ in 0..1000 {
            let r = verify_sampling(&[2, 0], &[p.clone(), p.clone()], &[p.clone(), p.clone(), p.clone()], &mut rng, 0)
                .unwrap();
            assert_eq!(r.accepted_len, 2);
        }
    }

    #[test]
    fn residual_removes_draft_mass() {
        let t = ProbabilityVector::new(vec![0.25, 0.75]).unwrap();
        let d = ProbabilityVector::new(vec![0.5, 0.5]).unwrap();
        assert_eq!(residual(&t, &d).probs(), &[0.0, 1.0]);
        assert_eq!(residual(&t, &t), t);
    }

    fn lin_for(tokens: Vec<TokenId>, sizes: &[usize]) -> LinearizedProposal {
        let posmap = PositionMap::from_set_sizes(sizes).unwrap();
        let mask = crate::mask::cape_mask(sizes.len(), &posmap).unwrap();
        LinearizedProposal {
            set_sizes: sizes.to_vec(),
            expansion_probs: vec![0.0; posmap.beta() - sizes.len()],
            tokens,
            posmap,
            mask,
            dropped: 0,
        }
    }

    #[test]
    fn cape_without_sets_matches_greedy() {
        let rows = vec![onehot(5, 1), onehot(5, 4), onehot(5, 3)];
        let lin = lin_for(vec![1, 2], &[0, 0]);
        let (c, slot) = verify_cape(&lin, &rows, 7).unwrap();
        assert_eq!(c, verify_greedy(&[1, 2], &rows, 7).unwrap());
        assert_eq!(slot, None);
    }

    #[test]
    fn cape_substitution_at_position_two() {
        // proposal (1, 2), X_1 = {0}, X_2 = {4, 3}; target wants 1 then 3
        let lin = lin_for(vec![1, 2, 0, 4, 3], &[1, 2]);
        let rows = vec![
            onehot(5, 1), // after x_t
            onehot(5, 3), // after proposal token 1
            onehot(5, 0), // after proposal token 2 (discarded)
            onehot(5, 0), // slot for expansion 0
            onehot(5, 0), // slot for expansion 4
            onehot(5, 2), // slot for expansion 3: continuation
        ];
        let (r, slot) = verify_cape(&lin, &rows, 4).unwrap();
        assert_eq!(r.accepted_tokens, vec![1, 3]);
        assert_eq!(r.accepted_len, 2);
        assert_eq!(r.bonus_token, 2);
        assert_eq!(r.commit_len, 7);
        assert_eq!(slot, Some(5));
        assert_eq!(
            r.accepted_from_expansion,
            Some(Substitution {
                position: 2,
                token: 3
            })
        );
        assert_eq!(r.plain_accepted(), 1);
    }

    #[test]
    fn chunk_mask_layout() {
        let lin = lin_for(vec![1, 2, 0], &[1, 0]);
        let m = verification_chunk_mask(&lin);
        assert_eq!(m.to_grid(), "#...\n##..\n###.\n#..#\n");
    }
}
