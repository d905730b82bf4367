mod common;

use glide::speculation::{ExpansionRule, SpeculationConfig};
use glide::tensor::{seeded_rng, TokenId};
use glide::verify::{decode_session, target_greedy_decode, AcceptanceStrategy, DecodeConfig};
use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn prompt(vocab: usize, len: usize, seed: u64) -> Vec<TokenId> {
    let mut rng = seeded_rng(seed);
    (0..len).map(|_| rng.gen_range(0..vocab as TokenId)).collect()
}

#[test]
fn greedy_and_expanded_match_target_only() {
    for seed in 0..12u64 {
        let (t, d) = common::toy_pair(24, 48, seed);
        let p = prompt(24, 1 + seed as usize % 6, seed);
        let want = target_greedy_decode(&t, &p, 20, None).unwrap();
        for gamma in [1, 3, 5] {
            let mut cfg = DecodeConfig::greedy(gamma, 20);
            assert_eq!(decode_session(&p, &d, &t, &cfg).unwrap().tokens, want, "plain seed {seed} gamma {gamma}");
            cfg.cape = true;
            for rule in [ExpansionRule::Confidence, ExpansionRule::Fixed(2), ExpansionRule::Fixed(6)] {
                cfg.speculation.expansion = rule;
                assert_eq!(decode_session(&p, &d, &t, &cfg).unwrap().tokens, want, "cape seed {seed} {rule:?}");
            }
        }
    }
}

#[test]
fn tight_verify_budget_still_lossless() {
    let (t, d) = common::toy_pair(16, 48, 3);
    let p = prompt(16, 4, 3);
    let want = target_greedy_decode(&t, &p, 24, None).unwrap();
    let cfg = DecodeConfig {
        cape: true,
        speculation: SpeculationConfig {
            gamma: 4,
            max_verify_tokens: 6,
            expansion: ExpansionRule::Fixed(7),
        },
        ..DecodeConfig::greedy(4, 24)
    };
    let out = decode_session(&p, &d, &t, &cfg).unwrap();
    assert_eq!(out.tokens, want);
    assert!(out.trace.iter().all(|r| r.beta <= 6));
}

#[test]
fn trace_bookkeeping() {
    let (t, d) = common::toy_pair(16, 48, 8);
    let p = prompt(16, 3, 8);
    let out = decode_session(&p, &d, &t, &DecodeConfig::greedy(4, 30)).unwrap();
    let committed: usize = out.trace.iter().map(|r| r.committed()).sum();
    assert!(committed >= 30);
    for (i, r) in out.trace.iter().enumerate() {
        assert_eq!(r.round, i);
        assert!(r.accepted_len <= 4);
        assert_eq!(r.accepted_tokens.len(), r.accepted_len);
        assert_eq!(r.confidences.len(), 4);
        let judged: Vec<_> = r.judged().collect();
        assert_eq!(judged.len(), (r.accepted_len + 1).min(4));
    }
    let line = serde_json::to_string(&out.trace[0]).unwrap();
    assert!(line.contains("\"proposal_tokens\""));
}

#[test]
fn eos_stops_the_session() {
    let (t, d) = common::toy_pair(16, 48, 2);
    let p = prompt(16, 3, 2);
    let free = target_greedy_decode(&t, &p, 20, None).unwrap();
    let eos = free[5];
    let cut = free.iter().position(|&x| x == eos).unwrap();
    let mut cfg = DecodeConfig::greedy(3, 20);
    cfg.eos = Some(eos);
    assert_eq!(decode_session(&p, &d, &t, &cfg).unwrap().tokens, free[..=cut].to_vec());
}

#[test]
fn capacity_and_contract_errors() {
    let (t, d) = common::toy_pair(16, 16, 1);
    let p = prompt(16, 8, 1);
    assert!(decode_session(&p, &d, &t, &DecodeConfig::greedy(5, 20)).is_err());
    assert!(decode_session(&[], &d, &t, &DecodeConfig::greedy(2, 2)).is_err());
    let mut cfg = DecodeConfig::greedy(2, 2);
    cfg.strategy = AcceptanceStrategy::Sampling;
    cfg.cape = true;
    assert!(decode_session(&p[..2], &d, &t, &cfg).is_err());
}

#[test]
fn sampled_first_token_follows_target() {
    let (t, d) = common::toy_pair(8, 16, 21);
    let p = vec![3, 1, 4];
    let exact = t.forward(&p, &mut t.new_cache()).unwrap().pop().unwrap();
    let rounds = 20_000;
    let firsts = glide::par::map_range(rounds, |s| {
        let cfg = DecodeConfig {
            strategy: AcceptanceStrategy::Sampling,
            seed: s as u64,
            ..DecodeConfig::greedy(3, 1)
        };
        decode_session(&p, &d, &t, &cfg).unwrap().tokens[0]
    });
    let mut counts = [0usize; 8];
    for f in firsts {
        counts[f as usize] += 1;
    }
    let stat: f64 = counts
        .iter()
        .zip(exact.probs())
        .map(|(&o, &q)| {
            let e = q * rounds as f64;
            (o as f64 - e).powi(2) / e
        })
        .sum();
    let pval = 1.0 - ChiSquared::new(7.0).unwrap().cdf(stat);
    assert!(pval > 1e-4, "chi2 {stat} p {pval} counts {counts:?}");
}
