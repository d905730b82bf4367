//! Draft training against a frozen target.
//!
//! The target itself is first fit to the synthetic corpus with the same
//! machinery (causal self-attention only), then frozen. Drafts are trained
//! with cross-attention restricted by the block mask.

pub mod corpus;
pub mod gradcheck;
pub mod optim;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use corpus::{Corpus, CorpusKind, CorpusSpec, SyntheticCorpus};
pub use gradcheck::{grad_check, GradCheckReport};
pub use optim::{AdamW, AdamWConfig};

use crate::bench::acceptance_rate_exact;
use crate::error::{contract, Error, Result};
use crate::model::{Decoder, DraftModel, ForwardArgs, GlideConfig, KvCache, Tape, TargetConfig, TargetModel};
use crate::par;
use crate::tensor::{seeded_rng, Matrix, ProbabilityVector, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub block_length: usize,
    /// Sequences per micro-batch.
    pub batch_size: usize,
    /// Micro-batches summed into one optimizer step.
    pub accumulation: usize,
    pub epochs: usize,
    /// Stops early once this many optimizer steps have run.
    pub max_steps: Option<usize>,
    pub warmup_steps: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            block_length: 5,
            batch_size: 16,
            accumulation: 1,
            epochs: 1,
            max_steps: None,
            warmup_steps: 0,
            optimizer: AdamWConfig::default(),
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_length == 0 {
            return Err(Error::Config("block_length must be >= 1".into()));
        }
        if !(self.optimizer.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if self.batch_size == 0 || self.accumulation == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size, accumulation and epochs must be >= 1".into()));
        }
        Ok(())
    }

    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.accumulation
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let lr = self.optimizer.learning_rate;
        if step < self.warmup_steps {
            lr * (step + 1) as f64 / self.warmup_steps as f64
        } else {
            lr
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

pub fn log_to_csv(rows: &[StepStats]) -> String {
    let mut out = String::from("step,loss,grad_norm,lr\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.step, r.loss, r.grad_norm, r.lr);
    }
    out
}

pub fn write_log_csv(rows: &[StepStats], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, log_to_csv(rows))?;
    Ok(())
}

/// Summed next-token cross-entropy over rows that have a label, and its
/// gradient with respect to the logits (also summed, not averaged).
pub fn cross_entropy(logits: &Matrix, tokens: &[TokenId]) -> (f64, usize, Matrix) {
    let n = tokens.len();
    let mut d = Matrix::zeros(logits.rows(), logits.cols());
    let mut loss = 0.0;
    for r in 0..n.saturating_sub(1) {
        let p = ProbabilityVector::from_logits(logits.row(r));
        let label = tokens[r + 1] as usize;
        loss -= p.probs()[label].max(f64::MIN_POSITIVE).ln();
        let row = d.row_mut(r);
        row.copy_from_slice(p.probs());
        row[label] -= 1.0;
    }
    (loss, n.saturating_sub(1), d)
}

/// Loss sum, label count and summed parameter gradients for one sequence.
pub(crate) struct SequenceGrad {
    pub loss: f64,
    pub count: usize,
    pub grads: Decoder,
}

fn target_sequence_grad(target: &Decoder, tokens: &[TokenId]) -> Result<SequenceGrad> {
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let args = ForwardArgs {
        tokens,
        positions: &positions,
        chunk_mask: None,
        cross: None,
    };
    let mut tape = Tape::default();
    let logits = target.forward(&args, &mut target.new_cache(), Some(&mut tape), None)?;
    let (loss, count, d) = cross_entropy(&logits, tokens);
    let mut grads = target.zeros_like();
    target.backward(&tape, None, &d, &mut grads);
    Ok(SequenceGrad { loss, count, grads })
}

pub(crate) fn draft_sequence_grad(draft: &DraftModel, target_kv: &KvCache, tokens: &[TokenId]) -> Result<SequenceGrad> {
    let kv = draft.has_cross_attention().then_some(target_kv);
    let mut tape = Tape::default();
    let logits = draft.forward_blocked(tokens, kv, Some(&mut tape), None)?;
    let (loss, count, d) = cross_entropy(&logits, tokens);
    let mut grads = draft.decoder.zeros_like();
    draft.decoder.backward(&tape, kv, &d, &mut grads);
    Ok(SequenceGrad { loss, count, grads })
}

/// Sums per-sequence results in input order and divides by the label count,
/// giving the mean token loss and its gradient.
fn reduce(parts: Vec<Result<SequenceGrad>>) -> Result<(f64, Decoder)> {
    let mut iter = parts.into_iter();
    let first = iter.next().ok_or_else(|| contract("empty batch"))??;
    let (mut loss, mut count, mut grads) = (first.loss, first.count, first.grads);
    for p in iter {
        let p = p?;
        loss += p.loss;
        count += p.count;
        for (g, h) in grads.params_mut().into_iter().zip(p.grads.named_params()) {
            g.add_assign(h.1);
        }
    }
    if count == 0 {
        return Err(contract("batch has no next-token labels"));
    }
    let inv = 1.0 / count as f64;
    for g in grads.params_mut() {
        g.scale(inv);
    }
    Ok((loss * inv, grads))
}

/// Mean loss and gradient of the target LM over `batch`.
pub fn target_batch_gradient(target: &TargetModel, batch: &[Vec<TokenId>]) -> Result<(f64, Decoder)> {
    reduce(par::map_slice(batch, |s| target_sequence_grad(&target.decoder, s)))
}

/// Mean loss and gradient of the draft over `batch`. The frozen target's
/// full-sequence cache is computed once per sequence and shared by every
/// draft layer.
pub fn draft_batch_gradient(draft: &DraftModel, target: &TargetModel, batch: &[Vec<TokenId>]) -> Result<(f64, Decoder)> {
    reduce(par::map_slice(batch, |s| {
        let (_, kv) = target.encode(s)?;
        draft_sequence_grad(draft, &kv, s)
    }))
}

fn grad_norm(g: &Decoder) -> f64 {
    g.named_params().iter().map(|(_, m)| m.sum_squares()).sum::<f64>().sqrt()
}

fn finite_or_abort(step: usize, loss: f64, grads: &Decoder) -> Result<f64> {
    let norm = grad_norm(grads);
    if loss.is_finite() && norm.is_finite() {
        return Ok(norm);
    }
    let bad: Vec<String> = grads
        .named_params()
        .into_iter()
        .filter(|(_, m)| !m.is_finite())
        .map(|(n, _)| n)
        .collect();
    Err(Error::NonFiniteLoss {
        step,
        loss,
        diagnostics: format!("grad_norm={norm}, non-finite gradients in [{}]", bad.join(", ")),
    })
}

/// Gradient over `batch` in micro-batches of `micro`, combined exactly as a
/// single batch would be.
fn accumulate(batch: &[Vec<TokenId>], micro: usize, mut f: impl FnMut(&[Vec<TokenId>]) -> Result<(f64, Decoder)>) -> Result<(f64, Decoder)> {
    let chunks: Vec<&[Vec<TokenId>]> = batch.chunks(micro.max(1)).collect();
    if chunks.len() == 1 {
        return f(chunks[0]);
    }
    let labels = |c: &[Vec<TokenId>]| c.iter().map(|s| s.len().saturating_sub(1)).sum::<usize>() as f64;
    let total = labels(batch);
    let mut acc: Option<(f64, Decoder)> = None;
    for c in chunks {
        let (loss, mut g) = f(c)?;
        let w = labels(c) / total;
        for m in g.params_mut() {
            m.scale(w);
        }
        match &mut acc {
            None => acc = Some((loss * w, g)),
            Some((l, a)) => {
                *l += loss * w;
                for (x, y) in a.params_mut().into_iter().zip(g.named_params()) {
                    x.add_assign(y.1);
                }
            }
        }
    }
    Ok(acc.expect("nonempty"))
}

/// One optimizer step of the draft on `batch`. The target is only read;
/// its checksum is compared before and after.
pub fn train_step(
    draft: &mut DraftModel,
    target: &TargetModel,
    batch: &[Vec<TokenId>],
    opt: &mut AdamW,
    cfg: &TrainingConfig,
    step: usize,
) -> Result<StepStats> {
    let before = target.checksum();
    let (loss, grads) = accumulate(batch, cfg.batch_size, |c| draft_batch_gradient(draft, target, c))?;
    let norm = finite_or_abort(step, loss, &grads)?;
    let lr = cfg.lr_at(step);
    opt.step_decoder(&mut draft.decoder, &grads, lr);
    if target.checksum() != before {
        return Err(contract("target weights changed during a draft step"));
    }
    Ok(StepStats {
        step: step + 1,
        loss,
        grad_norm: norm,
        lr,
    })
}

pub fn target_train_step(
    target: &mut TargetModel,
    batch: &[Vec<TokenId>],
    opt: &mut AdamW,
    cfg: &TrainingConfig,
    step: usize,
) -> Result<StepStats> {
    let (loss, grads) = accumulate(batch, cfg.batch_size, |c| target_batch_gradient(target, c))?;
    let norm = finite_or_abort(step, loss, &grads)?;
    let lr = cfg.lr_at(step);
    opt.step_decoder(&mut target.decoder, &grads, lr);
    Ok(StepStats {
        step: step + 1,
        loss,
        grad_norm: norm,
        lr,
    })
}

/// Batches of the training split in a seeded shuffled order, epoch by epoch.
fn schedule(n: usize, cfg: &TrainingConfig) -> Vec<Vec<usize>> {
    let eff = cfg.effective_batch().min(n.max(1));
    let mut out = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut seeded_rng(cfg.seed.wrapping_add(0x5eed_0000 + epoch as u64)));
        for b in idx.chunks(eff) {
            if b.len() == eff {
                out.push(b.to_vec());
            }
        }
    }
    if let Some(m) = cfg.max_steps {
        out.truncate(m);
    }
    out
}

fn gather(corpus: &Corpus, idx: &[usize]) -> Vec<Vec<TokenId>> {
    idx.iter().map(|&i| corpus.sequences[i].clone()).collect()
}

pub fn train_draft(
    mut draft: DraftModel,
    target: &TargetModel,
    train: &Corpus,
    cfg: &TrainingConfig,
) -> Result<(DraftModel, Vec<StepStats>)> {
    cfg.validate()?;
    train.check_vocab(target.cfg.vocab)?;
    let mut opt = AdamW::for_decoder(cfg.optimizer, &draft.decoder);
    let mut log = Vec::new();
    for (step, idx) in schedule(train.sequences.len(), cfg).iter().enumerate() {
        log.push(train_step(&mut draft, target, &gather(train, idx), &mut opt, cfg, step)?);
    }
    Ok((draft, log))
}

pub fn train_target(mut target: TargetModel, train: &Corpus, cfg: &TrainingConfig) -> Result<(TargetModel, Vec<StepStats>)> {
    cfg.validate()?;
    train.check_vocab(target.cfg.vocab)?;
    let mut opt = AdamW::for_decoder(cfg.optimizer, &target.decoder);
    let mut log = Vec::new();
    for (step, idx) in schedule(train.sequences.len(), cfg).iter().enumerate() {
        log.push(target_train_step(&mut target, &gather(train, idx), &mut opt, cfg, step)?);
    }
    Ok((target, log))
}

/// Per-position draft and target distributions over `eval`, with the draft
/// run under the block mask so its cross-attention sees only earlier blocks.
pub fn eval_distributions(
    draft: &DraftModel,
    target: &TargetModel,
    eval: &Corpus,
) -> Result<(Vec<ProbabilityVector>, Vec<ProbabilityVector>)> {
    let parts = par::map_slice(&eval.sequences, |s| -> Result<_> {
        let (pt, kv) = target.encode(s)?;
        let kv = draft.has_cross_attention().then_some(&kv);
        let logits = draft.forward_blocked(s, kv, None, None)?;
        let pd: Vec<ProbabilityVector> = (0..logits.rows()).map(|r| ProbabilityVector::from_logits(logits.row(r))).collect();
        Ok((pd, pt))
    });
    let (mut d, mut t) = (Vec::new(), Vec::new());
    for p in parts {
        let (pd, pt) = p?;
        d.extend(pd);
        t.extend(pt);
    }
    Ok((d, t))
}

pub fn evaluate_alpha(draft: &DraftModel, target: &TargetModel, eval: &Corpus) -> Result<f64> {
    let (d, t) = eval_distributions(draft, target, eval)?;
    acceptance_rate_exact(&d, &t)
}

/// Mean next-token loss of `target` over `corpus`.
pub fn evaluate_target_loss(target: &TargetModel, corpus: &Corpus) -> Result<f64> {
    let parts = par::map_slice(&corpus.sequences, |s| -> Result<(f64, usize)> {
        let (dists, _) = target.encode(s)?;
        let mut loss = 0.0;
        for (r, p) in dists.iter().enumerate().take(s.len() - 1) {
            loss -= p.prob(s[r + 1]).max(f64::MIN_POSITIVE).ln();
        }
        Ok((loss, s.len() - 1))
    });
    let (mut l, mut n) = (0.0, 0);
    for p in parts {
        let (a, b) = p?;
        l += a;
        n += b;
    }
    if n == 0 {
        return Err(Error::EmptyEvaluation);
    }
    Ok(l / n as f64)
}

#[derive(Debug, Clone)]
pub struct PairOutcome {
    pub glide: DraftModel,
    pub vanilla: DraftModel,
    pub glide_log: Vec<StepStats>,
    pub vanilla_log: Vec<StepStats>,
    pub glide_alpha: f64,
    pub vanilla_alpha: f64,
}

/// Trains GliDe and the vanilla drafter from the same seed, data order and
/// step count, then evaluates both on the held-out split.
pub fn train_pair(
    draft_cfg: GlideConfig,
    target: &TargetModel,
    corpus: &SyntheticCorpus,
    cfg: &TrainingConfig,
) -> Result<PairOutcome> {
    let mut g = draft_cfg;
    g.cross_attention = true;
    g.block_length = cfg.block_length;
    g.target = target.cfg;
    let mut v = g;
    v.cross_attention = false;
    let (glide, glide_log) = train_draft(DraftModel::new(g, cfg.seed)?, target, &corpus.train, cfg)?;
    let (vanilla, vanilla_log) = train_draft(DraftModel::new(v, cfg.seed)?, target, &corpus.train, cfg)?;
    let glide_alpha = evaluate_alpha(&glide, target, &corpus.eval)?;
    let vanilla_alpha = evaluate_alpha(&vanilla, target, &corpus.eval)?;
    Ok(PairOutcome {
        glide,
        vanilla,
        glide_log,
        vanilla_log,
        glide_alpha,
        vanilla_alpha,
    })
}

/// Draft architecture without the target fields, which are filled in from
/// the target config.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DraftSpec {
    pub n_layers: usize,
    pub draft_dim: usize,
    pub draft_heads: usize,
    pub ffn_dim: usize,
}

impl DraftSpec {
    pub fn glide_config(&self, target: TargetConfig, block_length: usize) -> GlideConfig {
        GlideConfig {
            n_layers: self.n_layers,
            draft_dim: self.draft_dim,
            draft_heads: self.draft_heads,
            ffn_dim: self.ffn_dim,
            block_length,
            cross_attention: true,
            target,
        }
    }
}

/// Everything `glide train` needs: corpus, target pretraining and draft
/// training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainJobConfig {
    pub corpus: CorpusSpec,
    pub target: TargetConfig,
    pub target_training: TrainingConfig,
    pub draft: DraftSpec,
    pub draft_training: TrainingConfig,
    #[serde(default)]
    pub train_vanilla: bool,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl TrainJobConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone)]
pub struct TrainJobOutput {
    pub corpus: SyntheticCorpus,
    pub target: TargetModel,
    pub target_log: Vec<StepStats>,
    pub glide: DraftModel,
    pub glide_log: Vec<StepStats>,
    pub glide_alpha: f64,
    pub vanilla: Option<(DraftModel, Vec<StepStats>, f64)>,
}

pub fn train_target_for(cfg: &TrainJobConfig, corpus: &SyntheticCorpus) -> Result<(TargetModel, Vec<StepStats>)> {
    let target = TargetModel::new(cfg.target, cfg.target_training.seed)?;
    train_target(target, &corpus.train, &cfg.target_training)
}

pub fn run_train_job(cfg: &TrainJobConfig) -> Result<TrainJobOutput> {
    let corpus = SyntheticCorpus::generate(cfg.corpus)?;
    let (target, target_log) = train_target_for(cfg, &corpus)?;
    let tc = &cfg.draft_training;
    let gcfg = cfg.draft.glide_config(cfg.target, tc.block_length);
    let (glide, glide_log, glide_alpha, vanilla) = if cfg.train_vanilla {
        let p = train_pair(gcfg, &target, &corpus, tc)?;
        (p.glide, p.glide_log, p.glide_alpha, Some((p.vanilla, p.vanilla_log, p.vanilla_alpha)))
    } else {
        let (g, log) = train_draft(DraftModel::new(gcfg, tc.seed)?, &target, &corpus.train, tc)?;
        let a = evaluate_alpha(&g, &target, &corpus.eval)?;
        (g, log, a, None)
    };
    let out = TrainJobOutput {
        corpus,
        target,
        target_log,
        glide,
        glide_log,
        glide_alpha,
        vanilla,
    };
    if let Some(dir) = &cfg.out_dir {
        out.write(dir)?;
    }
    Ok(out)
}

impl TrainJobOutput {
    /// Writes checkpoints, CSV logs and the corpus splits under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.target.save(dir.join("target.ckpt"))?;
        write_log_csv(&self.target_log, dir.join("target_log.csv"))?;
        self.glide.save(dir.join("glide.ckpt"))?;
        write_log_csv(&self.glide_log, dir.join("glide_log.csv"))?;
        if let Some((v, log, _)) = &self.vanilla {
            v.save(dir.join("vanilla.ckpt"))?;
            write_log_csv(log, dir.join("vanilla_log.csv"))?;
        }
        self.corpus.train.save(dir.join("train.spdc"))?;
        self.corpus.eval.save(dir.join("eval.spdc"))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_target(vocab: usize) -> TargetModel {
        TargetModel::new(
            TargetConfig {
                n_layers: 2,
                n_heads: 2,
                head_dim: 4,
                vocab,
                max_seq: 32,
                ffn_dim: 16,
            },
            11,
        )
        .unwrap()
    }

    fn tiny_draft(target: &TargetModel, cross: bool) -> DraftModel {
        DraftModel::new(
            GlideConfig {
                n_layers: 1,
                draft_dim: 8,
                draft_heads: 2,
                ffn_dim: 16,
                block_length: 5,
                cross_attention: cross,
                target: target.cfg,
            },
            4,
        )
        .unwrap()
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let logits = Matrix::zeros(3, 4);
        let (loss, n, d) = cross_entropy(&logits, &[0, 1, 2]);
        assert_eq!(n, 2);
        assert!((loss - 2.0 * 4f64.ln()).abs() < 1e-12);
        assert!((d.get(0, 1) + 0.75).abs() < 1e-12);
        assert_eq!(d.row(2), &[0.0; 4]);
    }

    #[test]
    fn constant_corpus_loss_decreases_and_target_frozen() {
        let target = tiny_target(6);
        let mut draft = tiny_draft(&target, true);
        let batch = vec![vec![3u32; 12]; 2];
        let cfg = TrainingConfig {
            batch_size: 2,
            optimizer: AdamWConfig {
                learning_rate: 1e-2,
                ..AdamWConfig::default()
            },
            ..TrainingConfig::default()
        };
        let mut opt = AdamW::for_decoder(cfg.optimizer, &draft.decoder);
        let sum = target.checksum();
        let first = train_step(&mut draft, &target, &batch, &mut opt, &cfg, 0).unwrap();
        let mut last = first;
        for s in 1..200 {
            last = train_step(&mut draft, &target, &batch, &mut opt, &cfg, s).unwrap();
        }
        assert!(last.loss < first.loss);
        assert!(last.loss < 0.05, "loss {}", last.loss);
        assert_eq!(target.checksum(), sum);
    }

    #[test]
    fn bypass_rows_give_no_cross_query_gradient() {
        let target = tiny_target(6);
        let draft = tiny_draft(&target, true);
        // five tokens all sit in block 1
        let s = vec![1u32, 4, 2, 0, 5];
        let (_, kv) = target.encode(&s).unwrap();
        let g = draft_sequence_grad(&draft, &kv, &s).unwrap().grads;
        let cross = g.layers[0].cross.as_ref().unwrap();
        assert!(cross.wq.data().iter().all(|&x| x == 0.0));
        assert!(cross.wo.data().iter().all(|&x| x == 0.0));
        // a sixth token reaches block 2
        let s = vec![1u32, 4, 2, 0, 5, 3, 1];
        let (_, kv) = target.encode(&s).unwrap();
        let g = draft_sequence_grad(&draft, &kv, &s).unwrap().grads;
        assert!(g.layers[0].cross.as_ref().unwrap().wq.data().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn accumulation_matches_single_batch() {
        let target = tiny_target(6);
        let draft = tiny_draft(&target, true);
        let batch: Vec<Vec<TokenId>> = (0..4).map(|i| (0..9).map(|j| ((i * 7 + j * 3) % 6) as TokenId).collect()).collect();
        let (l1, g1) = accumulate(&batch, 4, |c| draft_batch_gradient(&draft, &target, c)).unwrap();
        let (l2, g2) = accumulate(&batch, 1, |c| draft_batch_gradient(&draft, &target, c)).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for ((_, a), (_, b)) in g1.named_params().into_iter().zip(g2.named_params()) {
            assert!(a.max_abs_diff(b) < 1e-12);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = SyntheticCorpus::generate(CorpusSpec {
            kind: CorpusKind::Markov2,
            vocab: 6,
            seq_len: 12,
            train: 8,
            eval: 2,
            seed: 2,
        })
        .unwrap();
        let target = tiny_target(6);
        let cfg = TrainingConfig {
            batch_size: 4,
            epochs: 2,
            seed: 9,
            ..TrainingConfig::default()
        };
        let run = || train_pair(tiny_draft(&target, true).cfg, &target, &corpus, &cfg).unwrap();
        let (a, b) = (run(), run());
        assert_eq!(a.glide.to_bytes(), b.glide.to_bytes());
        assert_eq!(a.vanilla.to_bytes(), b.vanilla.to_bytes());
        assert_eq!(a.glide_log.len(), 4);
        assert!(!a.vanilla.has_cross_attention());
    }

    #[test]
    fn csv_log_header() {
        let csv = log_to_csv(&[StepStats {
            step: 1,
            loss: 0.5,
            grad_norm: 2.0,
            lr: 1e-3,
        }]);
        assert_eq!(csv, "step,loss,grad_norm,lr\n1,0.5,2,0.001\n");
    }

    #[test]
    fn lr_warmup() {
        let cfg = TrainingConfig {
            warmup_steps: 4,
            ..TrainingConfig::default()
        };
        assert!((cfg.lr_at(0) - 1.25e-4).abs() < 1e-18);
        assert_eq!(cfg.lr_at(10), 5e-4);
    }
}
