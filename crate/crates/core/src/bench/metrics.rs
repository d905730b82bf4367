//! Acceptance rate, cost coefficient and expected speedup.

use std::hint::black_box;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::model::{DraftModel, TargetModel};
use crate::tensor::{ProbabilityVector, TokenId};

/// Mean over positions of `sum_x min(p_T(x), p_D(x))`.
pub fn acceptance_rate_exact(draft: &[ProbabilityVector], target: &[ProbabilityVector]) -> Result<f64> {
    if draft.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    if draft.len() != target.len() {
        return Err(contract(format!(
            "{} draft positions vs {} target positions",
            draft.len(),
            target.len()
        )));
    }
    let mut total = 0.0;
    for (d, t) in draft.iter().zip(target) {
        if d.len() != t.len() {
            return Err(contract("draft and target vocabularies differ"));
        }
        total += d.probs().iter().zip(t.probs()).map(|(a, b)| a.min(*b)).sum::<f64>();
    }
    Ok(total / draft.len() as f64)
}

/// `(1 - a^(g+1)) / ((1 - a)(g c + 1))`, with the numerator over `1 - a`
/// evaluated as `1 + a + ... + a^g`. That is the same quantity, stays
/// accurate near `a = 1`, and gives the limit `(g+1)/(g c+1)` at `a = 1`.
///
/// Expects `a` in [0, 1], `g >= 1` and `c >= 0`.
pub fn expected_speedup(alpha: f64, gamma: usize, cost: f64) -> f64 {
    let mut geo = 0.0;
    for _ in 0..=gamma {
        geo = geo * alpha + 1.0;
    }
    geo / (gamma as f64 * cost + 1.0)
}

/// Printed acceptance rate, cost coefficient and expected speedup at
/// `gamma = 5`.
pub const TABLE1_TRIPLES: [(f64, f64, f64); 4] = [
    (0.648, 0.067, 1.97),
    (0.516, 0.077, 1.46),
    (0.671, 0.055, 2.16),
    (0.601, 0.066, 1.80),
];
pub const TABLE1_GAMMA: usize = 5;
pub const TABLE1_TOLERANCE: f64 = 0.005;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Table1Row {
    pub alpha: f64,
    pub cost: f64,
    pub printed: f64,
    pub computed: f64,
    pub pass: bool,
}

pub fn table1_check() -> Vec<Table1Row> {
    TABLE1_TRIPLES
        .iter()
        .map(|&(alpha, cost, printed)| {
            let computed = expected_speedup(alpha, TABLE1_GAMMA, cost);
            Table1Row {
                alpha,
                cost,
                printed,
                computed,
                pass: (computed - printed).abs() <= TABLE1_TOLERANCE,
            }
        })
        .collect()
}

/// One evaluated configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub alpha: f64,
    pub cost: f64,
    pub gamma: usize,
    pub expected_speedup: f64,
    pub empirical_tokens_per_step: f64,
    /// Tokens per step divided by the per-step cost `gamma * c + 1`.
    pub empirical_speedup: f64,
}

impl MetricsRecord {
    pub fn new(alpha: f64, cost: f64, gamma: usize, tokens_per_step: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) || !(cost > 0.0) || gamma == 0 {
            return Err(contract(format!("invalid metrics alpha={alpha} cost={cost} gamma={gamma}")));
        }
        Ok(Self {
            alpha,
            cost,
            gamma,
            expected_speedup: expected_speedup(alpha, gamma, cost),
            empirical_tokens_per_step: tokens_per_step,
            empirical_speedup: tokens_per_step / (gamma as f64 * cost + 1.0),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostMeasurement {
    pub cost: f64,
    pub draft_median_ns: f64,
    pub target_median_ns: f64,
    /// Forward calls per timed sample.
    pub batch: usize,
    pub trials: usize,
}

/// Samples shorter than this are widened by timing several calls at once.
const MIN_SAMPLE: Duration = Duration::from_micros(50);
const WARMUP: usize = 10;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Median per-call time of `f`, widening the batch of calls per sample
/// until a sample exceeds the timer floor.
fn time_median(trials: usize, mut f: impl FnMut()) -> (f64, usize) {
    for _ in 0..WARMUP {
        f();
    }
    let mut batch = 1;
    loop {
        let t = Instant::now();
        for _ in 0..batch {
            f();
        }
        if t.elapsed() >= MIN_SAMPLE || batch >= 1 << 16 {
            break;
        }
        batch *= 2;
    }
    let samples = (0..trials)
        .map(|_| {
            let t = Instant::now();
            for _ in 0..batch {
                f();
            }
            t.elapsed().as_nanos() as f64 / batch as f64
        })
        .collect();
    (median(samples), batch)
}

/// Ratio of one draft decoding step to one target decoding step, both with
/// `context` tokens already cached.
pub fn measure_cost_coefficient(
    draft: &DraftModel,
    target: &TargetModel,
    context: usize,
    trials: usize,
) -> Result<CostMeasurement> {
    if trials < 100 {
        return Err(contract("cost measurement needs at least 100 trials"));
    }
    if context + 1 >= target.cfg.max_seq.min(draft.cfg.target.max_seq) {
        return Err(contract("context too long for max_seq"));
    }
    let vocab = target.cfg.vocab as TokenId;
    let tokens: Vec<TokenId> = (0..=context as TokenId).map(|i| (i * 7 + 3) % vocab).collect();
    let mut target_cache = target.new_cache();
    target.forward(&tokens[..context], &mut target_cache)?;
    let mut draft_cache = draft.new_cache();
    draft.forward(&tokens[..context], &mut draft_cache, &target_cache, context, None)?;
    let last = &tokens[context..];

    let (target_ns, tb) = time_median(trials, || {
        let mut c = target_cache.clone();
        black_box(target.forward(last, &mut c).expect("sized above"));
        c.truncate(context).expect("grew by one");
    });
    let (draft_ns, db) = time_median(trials, || {
        let mut c = draft_cache.clone();
        black_box(draft.forward(last, &mut c, &target_cache, context, None).expect("sized above"));
    });
    if !(target_ns > 0.0) {
        return Err(contract("timer resolution too coarse to measure the target step"));
    }
    Ok(CostMeasurement {
        cost: draft_ns / target_ns,
        draft_median_ns: draft_ns,
        target_median_ns: target_ns,
        batch: tb.max(db),
        trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn acceptance_examples() {
        let p = ProbabilityVector::new(vec![0.4, 0.3, 0.2, 0.1]).unwrap();
        let q = ProbabilityVector::new(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert!((acceptance_rate_exact(&[p.clone()], &[q.clone()]).unwrap() - 0.6).abs() < 1e-12);
        assert!((acceptance_rate_exact(&[p.clone()], &[p.clone()]).unwrap() - 1.0).abs() < 1e-12);
        let a = ProbabilityVector::new(vec![0.5, 0.5, 0.0, 0.0]).unwrap();
        let b = ProbabilityVector::new(vec![0.0, 0.0, 0.5, 0.5]).unwrap();
        assert_eq!(acceptance_rate_exact(&[a], &[b]).unwrap(), 0.0);
        assert!(matches!(acceptance_rate_exact(&[], &[]), Err(Error::EmptyEvaluation)));
    }

    #[test]
    fn speedup_examples() {
        assert_eq!(expected_speedup(0.0, 3, 0.0), 1.0);
        assert!((expected_speedup(1.0, 5, 0.1) - 6.0 / 1.5).abs() < 1e-15);
        let direct = (1.0 - 0.648f64.powi(6)) / ((1.0 - 0.648) * (5.0 * 0.067 + 1.0));
        assert!((expected_speedup(0.648, 5, 0.067) - direct).abs() < 1e-14);
        assert!((expected_speedup(0.648, 5, 0.067) - 1.97).abs() <= 0.005);
        assert!((expected_speedup(0.516, 5, 0.077) - 1.46).abs() <= 0.005);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
