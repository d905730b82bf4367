//! Synthetic corpora and the corpus file format.
//!
//! File layout, little-endian: `"SPDC"`, u32 version, u32 vocab, u32 count,
//! then per sequence a u32 length followed by that many u32 token ids.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::tensor::{seeded_rng, SeededRng, TokenId};

pub const CORPUS_MAGIC: &[u8; 4] = b"SPDC";
pub const CORPUS_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusKind {
    /// Order-2 Markov chain with 1 to 4 successors per context.
    Markov2,
    /// Phrases from a fixed phrase book, chained by a first-order Markov
    /// chain over phrases.
    Grammar,
}

impl std::str::FromStr for CorpusKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "markov2" => Ok(Self::Markov2),
            "grammar" => Ok(Self::Grammar),
            other => Err(Error::Config(format!("unknown corpus kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub kind: CorpusKind,
    pub vocab: usize,
    pub seq_len: usize,
    pub train: usize,
    pub eval: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub vocab: usize,
    pub sequences: Vec<Vec<TokenId>>,
}

/// Train and eval splits drawn from disjoint generator streams over the
/// same underlying source.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub spec: CorpusSpec,
    pub train: Corpus,
    pub eval: Corpus,
}

trait Source {
    fn sample(&self, len: usize, rng: &mut SeededRng) -> Vec<TokenId>;
}

struct Markov2 {
    vocab: usize,
    /// For each context `a * vocab + b`: successors and cumulative weights.
    table: Vec<Vec<(TokenId, f64)>>,
}

impl Markov2 {
    fn new(vocab: usize, rng: &mut SeededRng) -> Self {
        let table = (0..vocab * vocab)
            .map(|_| {
                let branch = rng.gen_range(1..=4usize.min(vocab));
                let mut succ: Vec<TokenId> = Vec::with_capacity(branch);
                while succ.len() < branch {
                    let t = rng.gen_range(0..vocab) as TokenId;
                    if !succ.contains(&t) {
                        succ.push(t);
                    }
                }
                let w: Vec<f64> = (0..branch).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
                let total: f64 = w.iter().sum();
                let mut cum = 0.0;
                succ.into_iter()
                    .zip(w)
                    .map(|(t, wi)| {
                        cum += wi / total;
                        (t, cum)
                    })
                    .collect()
            })
            .collect();
        Self { vocab, table }
    }
}

fn draw(cdf: &[(TokenId, f64)], rng: &mut SeededRng) -> TokenId {
    let u: f64 = rng.gen();
    cdf.iter().find(|(_, c)| u < *c).unwrap_or(&cdf[cdf.len() - 1]).0
}

impl Source for Markov2 {
    fn sample(&self, len: usize, rng: &mut SeededRng) -> Vec<TokenId> {
        let mut out: Vec<TokenId> = Vec::with_capacity(len);
        for i in 0..len {
            let t = if i < 2 {
                rng.gen_range(0..self.vocab) as TokenId
            } else {
                let ctx = out[i - 2] as usize * self.vocab + out[i - 1] as usize;
                draw(&self.table[ctx], rng)
            };
            out.push(t);
        }
        out
    }
}

struct Grammar {
    phrases: Vec<Vec<TokenId>>,
    next: Vec<Vec<(TokenId, f64)>>,
}

impl Grammar {
    fn new(vocab: usize, rng: &mut SeededRng) -> Self {
        let n_phrases = (vocab / 2).max(2);
        let phrases: Vec<Vec<TokenId>> = (0..n_phrases)
            .map(|_| {
                let len = rng.gen_range(2..=6);
                (0..len).map(|_| rng.gen_range(0..vocab) as TokenId).collect()
            })
            .collect();
        let next = (0..n_phrases)
            .map(|_| {
                let branch = rng.gen_range(1..=3usize.min(n_phrases));
                let mut cum = 0.0;
                (0..branch)
                    .map(|_| {
                        cum += 1.0 / branch as f64;
                        (rng.gen_range(0..n_phrases) as TokenId, cum)
                    })
                    .collect()
            })
            .collect();
        Self { phrases, next }
    }
}

impl Source for Grammar {
    fn sample(&self, len: usize, rng: &mut SeededRng) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(len + 6);
        let mut phrase = rng.gen_range(0..self.phrases.len());
        // start mid-phrase so sequence boundaries are not phrase-aligned
        let skip = rng.gen_range(0..self.phrases[phrase].len());
        out.extend_from_slice(&self.phrases[phrase][skip..]);
        while out.len() < len {
            phrase = draw(&self.next[phrase], rng) as usize;
            out.extend_from_slice(&self.phrases[phrase]);
        }
        out.truncate(len);
        out
    }
}

impl SyntheticCorpus {
    /// Builds the source from `seed`, then draws train and eval sequences
    /// from two separate streams derived from it.
    pub fn generate(spec: CorpusSpec) -> Result<Self> {
        if spec.vocab < 2 || spec.seq_len < 2 {
            return Err(Error::Config("corpus needs vocab >= 2 and seq_len >= 2".into()));
        }
        let mut build = seeded_rng(spec.seed);
        let source: Box<dyn Source> = match spec.kind {
            CorpusKind::Markov2 => Box::new(Markov2::new(spec.vocab, &mut build)),
            CorpusKind::Grammar => Box::new(Grammar::new(spec.vocab, &mut build)),
        };
        let split = |stream: u64, count: usize| {
            let mut rng = seeded_rng(spec.seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(stream)));
            Corpus {
                vocab: spec.vocab,
                sequences: (0..count).map(|_| source.sample(spec.seq_len, &mut rng)).collect(),
            }
        };
        let train = split(1, spec.train);
        let eval = split(2, spec.eval);
        Ok(Self { spec, train, eval })
    }
}

impl Corpus {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CORPUS_MAGIC);
        for v in [CORPUS_VERSION, self.vocab as u32, self.sequences.len() as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for s in &self.sequences {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            for t in s {
                out.extend_from_slice(&t.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut words = bytes.get(4..).unwrap_or(&[]).chunks_exact(4).map(|c| {
            u32::from_le_bytes(c.try_into().expect("4 bytes"))
        });
        if bytes.len() < 4 || &bytes[..4] != CORPUS_MAGIC || (bytes.len() - 4) % 4 != 0 {
            return Err(Error::Format("not a corpus file".into()));
        }
        let mut next = || words.next().ok_or_else(|| Error::Format("truncated corpus".into()));
        let version = next()?;
        if version != CORPUS_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CORPUS_VERSION,
            });
        }
        let vocab = next()? as usize;
        let count = next()? as usize;
        let mut sequences = Vec::with_capacity(count);
        for _ in 0..count {
            let len = next()? as usize;
            let seq = (0..len).map(|_| next()).collect::<Result<Vec<_>>>()?;
            if let Some(t) = seq.iter().find(|&&t| t as usize >= vocab) {
                return Err(Error::Format(format!("token {t} outside vocab {vocab}")));
            }
            sequences.push(seq);
        }
        if next().is_ok() {
            return Err(Error::Format("trailing bytes after corpus".into()));
        }
        Ok(Self { vocab, sequences })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn check_vocab(&self, vocab: usize) -> Result<()> {
        if self.vocab != vocab {
            return Err(contract(format!(
                "corpus vocab {} does not match model vocab {vocab}",
                self.vocab
            )));
        }
        Ok(())
    }
}
