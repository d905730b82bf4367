//! Experiment orchestration and the JSON report.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::metrics::{acceptance_rate_exact, measure_cost_coefficient, CostMeasurement, MetricsRecord};
use crate::error::{Error, Result};
use crate::model::{DraftModel, TargetModel};
use crate::par;
use crate::speculation::{confidence_acceptance_profile, spearman, BucketStat, ExpansionRule, SpeculationConfig};
use crate::tensor::{seeded_rng, TokenId};
use crate::train::{eval_distributions, Corpus, CorpusSpec, SyntheticCorpus};
use crate::verify::{decode_session, target_greedy_decode, AcceptanceStrategy, DecodeConfig};

/// Where the cost coefficient comes from. A fixed value keeps reports
/// byte-identical across runs; a measured one depends on the machine.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CostMode {
    Fixed { value: f64 },
    Measured { trials: usize },
}

impl Default for CostMode {
    fn default() -> Self {
        Self::Fixed { value: 0.1 }
    }
}

impl CostMode {
    pub fn resolve(&self, draft: &DraftModel, target: &TargetModel, context: usize) -> Result<(f64, Option<CostMeasurement>)> {
        match *self {
            Self::Fixed { value } => Ok((value, None)),
            Self::Measured { trials } => {
                let m = measure_cost_coefficient(draft, target, context, trials)?;
                Ok((m.cost, Some(m)))
            }
        }
    }
}

fn default_fixed_size() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub target: PathBuf,
    pub draft: PathBuf,
    /// Prompts and evaluation positions come from this corpus's eval split.
    pub corpus: CorpusSpec,
    pub strategy: AcceptanceStrategy,
    #[serde(default)]
    pub cape: bool,
    pub gamma: usize,
    #[serde(default = "default_max_verify")]
    pub max_verify_tokens: usize,
    pub seeds: Vec<u64>,
    #[serde(default = "one")]
    pub repetitions: usize,
    pub prompts_per_seed: usize,
    pub prompt_len: usize,
    pub max_new: usize,
    #[serde(default)]
    pub cost: CostMode,
    /// Expansion size for the fixed-size arm of the expansion comparison.
    #[serde(default = "default_fixed_size")]
    pub fixed_expansion_size: usize,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn default_max_verify() -> usize {
    32
}

fn one() -> usize {
    1
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        for p in [&self.target, &self.draft] {
            if !p.exists() {
                return Err(Error::Config(format!("{} does not exist", p.display())));
            }
        }
        if self.seeds.is_empty() || self.repetitions == 0 || self.prompts_per_seed == 0 {
            return Err(Error::Config("need at least one seed, repetition and prompt".into()));
        }
        if self.prompt_len == 0 || self.prompt_len > self.corpus.seq_len {
            return Err(Error::Config("prompt_len must be in 1..=seq_len".into()));
        }
        if self.cape && self.strategy != AcceptanceStrategy::Greedy {
            return Err(Error::Config("expansion is only defined for greedy decoding".into()));
        }
        Ok(())
    }

    fn decode_config(&self, expansion: ExpansionRule, cape: bool, seed: u64) -> DecodeConfig {
        DecodeConfig {
            strategy: self.strategy,
            speculation: SpeculationConfig {
                gamma: self.gamma,
                max_verify_tokens: self.max_verify_tokens,
                expansion,
            },
            cape,
            max_new: self.max_new,
            eos: None,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionComparison {
    pub confidence_tokens_per_step: f64,
    pub fixed_size: usize,
    pub fixed_tokens_per_step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub metrics: MetricsRecord,
    /// Greedy only: every decode equalled target-only greedy decoding.
    pub lossless: Option<bool>,
    pub confidence_profile: Vec<BucketStat>,
    pub confidence_spearman: Option<f64>,
    pub expansion: Option<ExpansionComparison>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub stddev: f64,
}

impl Summary {
    /// Sample standard deviation; zero for a single value.
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self { mean, stddev: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub alpha: Summary,
    pub expected_speedup: Summary,
    pub empirical_tokens_per_step: Summary,
    pub empirical_speedup: Summary,
    pub lossless: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub cost: f64,
    pub cost_measurement: Option<CostMeasurement>,
    pub per_seed: Vec<SeedReport>,
    pub aggregate: Aggregate,
}

impl ExperimentReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Decodes the seed's prompts and collects tokens/step and the
/// `(confidence, accepted)` log.
fn decode_all(
    cfg: &ExperimentConfig,
    draft: &DraftModel,
    target: &TargetModel,
    prompts: &[Vec<TokenId>],
    expansion: ExpansionRule,
    cape: bool,
    seed: u64,
) -> Result<(f64, Vec<(f64, bool)>, Vec<Vec<TokenId>>)> {
    let (mut committed, mut rounds) = (0usize, 0usize);
    let mut judged = Vec::new();
    let mut outputs = Vec::new();
    for (i, p) in prompts.iter().enumerate() {
        for rep in 0..cfg.repetitions {
            let s = seed.wrapping_mul(1_000_003).wrapping_add((i * cfg.repetitions + rep) as u64);
            let out = decode_session(p, draft, target, &cfg.decode_config(expansion, cape, s))?;
            committed += out.trace.iter().map(|r| r.committed()).sum::<usize>();
            rounds += out.rounds();
            for r in &out.trace {
                judged.extend(r.judged());
            }
            outputs.push(out.tokens);
        }
    }
    Ok((committed as f64 / rounds.max(1) as f64, judged, outputs))
}

fn run_seed(
    cfg: &ExperimentConfig,
    draft: &DraftModel,
    target: &TargetModel,
    eval: &Corpus,
    cost: f64,
    seed: u64,
) -> Result<SeedReport> {
    let mut idx: Vec<usize> = (0..eval.sequences.len()).collect();
    idx.shuffle(&mut seeded_rng(seed));
    idx.truncate(cfg.prompts_per_seed);
    let picked = Corpus {
        vocab: eval.vocab,
        sequences: idx.iter().map(|&i| eval.sequences[i].clone()).collect(),
    };
    let (pd, pt) = eval_distributions(draft, target, &picked)?;
    let alpha = acceptance_rate_exact(&pd, &pt)?;
    let prompts: Vec<Vec<TokenId>> = picked.sequences.iter().map(|s| s[..cfg.prompt_len].to_vec()).collect();

    let (tps, judged, outputs) = decode_all(cfg, draft, target, &prompts, ExpansionRule::Confidence, cfg.cape, seed)?;
    let lossless = if cfg.strategy == AcceptanceStrategy::Greedy {
        let mut ok = true;
        for (i, p) in prompts.iter().enumerate() {
            let want = target_greedy_decode(target, p, cfg.max_new, None)?;
            ok &= outputs[i * cfg.repetitions..(i + 1) * cfg.repetitions].iter().all(|o| *o == want);
        }
        Some(ok)
    } else {
        None
    };
    let expansion = if cfg.strategy == AcceptanceStrategy::Greedy {
        let conf = if cfg.cape {
            tps
        } else {
            decode_all(cfg, draft, target, &prompts, ExpansionRule::Confidence, true, seed)?.0
        };
        let fixed = ExpansionRule::Fixed(cfg.fixed_expansion_size);
        let (fixed_tps, _, _) = decode_all(cfg, draft, target, &prompts, fixed, true, seed)?;
        Some(ExpansionComparison {
            confidence_tokens_per_step: conf,
            fixed_size: cfg.fixed_expansion_size,
            fixed_tokens_per_step: fixed_tps,
        })
    } else {
        None
    };
    let profile = confidence_acceptance_profile(&judged);
    let mids: Vec<f64> = profile.iter().map(BucketStat::midpoint).collect();
    let acc: Vec<f64> = profile.iter().map(|b| b.acceptance).collect();
    Ok(SeedReport {
        seed,
        metrics: MetricsRecord::new(alpha, cost, cfg.gamma, tps)?,
        lossless,
        confidence_spearman: spearman(&mids, &acc),
        confidence_profile: profile,
        expansion,
    })
}

/// Runs every seed (in parallel), then assembles the report in seed order.
pub fn run_experiment_with(
    cfg: &ExperimentConfig,
    draft: &DraftModel,
    target: &TargetModel,
    eval: &Corpus,
) -> Result<ExperimentReport> {
    let (cost, cost_measurement) = cfg.cost.resolve(draft, target, cfg.prompt_len)?;
    let per_seed = par::map_slice(&cfg.seeds, |&s| run_seed(cfg, draft, target, eval, cost, s))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let col = |f: fn(&SeedReport) -> f64| Summary::of(&per_seed.iter().map(f).collect::<Vec<_>>());
    let aggregate = Aggregate {
        alpha: col(|r| r.metrics.alpha),
        expected_speedup: col(|r| r.metrics.expected_speedup),
        empirical_tokens_per_step: col(|r| r.metrics.empirical_tokens_per_step),
        empirical_speedup: col(|r| r.metrics.empirical_speedup),
        lossless: per_seed[0].lossless.map(|_| per_seed.iter().all(|r| r.lossless == Some(true))),
    };
    Ok(ExperimentReport {
        config: cfg.clone(),
        cost,
        cost_measurement,
        per_seed,
        aggregate,
    })
}

/// Loads the checkpoints and corpus named in `cfg` and runs the experiment,
/// writing the report to `cfg.out` when set.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let target = TargetModel::load(&cfg.target)?;
    let draft = DraftModel::load(&cfg.draft)?;
    let corpus = SyntheticCorpus::generate(cfg.corpus)?;
    corpus.eval.check_vocab(target.cfg.vocab)?;
    let report = run_experiment_with(cfg, &draft, &target, &corpus.eval)?;
    if let Some(out) = &cfg.out {
        fs::write(out, report.to_json()?)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_stats() {
        let s = Summary::of(&[1.0, 2.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert!((s.stddev - 1.0).abs() < 1e-15);
        assert_eq!(Summary::of(&[4.0]).stddev, 0.0);
    }

    #[test]
    fn cost_mode_toml() {
        #[derive(Deserialize)]
        struct W {
            cost: CostMode,
        }
        let w: W = toml::from_str("cost = { kind = \"measured\", trials = 200 }").unwrap();
        assert_eq!(w.cost, CostMode::Measured { trials: 200 });
    }
}
