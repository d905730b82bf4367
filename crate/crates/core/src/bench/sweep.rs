//! One-axis architecture and speculation-length sweeps.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::experiment::CostMode;
use super::metrics::expected_speedup;
use crate::error::{contract, Error, Result};
use crate::model::{DraftModel, TargetModel};
use crate::train::{evaluate_alpha, train_draft, train_target_for, SyntheticCorpus, TrainJobConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    NLayers,
    DraftDim,
    Gamma,
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "n_layers" => Ok(Self::NLayers),
            "d_D" | "d_d" | "draft_dim" => Ok(Self::DraftDim),
            "gamma" => Ok(Self::Gamma),
            other => Err(Error::Config(format!("unknown sweep axis {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub train: TrainJobConfig,
    pub gamma: usize,
    #[serde(default)]
    pub cost: CostMode,
    /// Cached context length for cost measurement.
    #[serde(default = "default_context")]
    pub cost_context: usize,
}

fn default_context() -> usize {
    16
}

impl SweepConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: usize,
    pub alpha: Option<f64>,
    pub cost: Option<f64>,
    pub expected_speedup: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_tsv(&self) -> String {
        let f = |x: Option<f64>| x.map(|v| format!("{v:.6}")).unwrap_or_else(|| "-".into());
        let mut out = String::from("value\talpha\tcost\texpected_speedup\terror\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                r.value,
                f(r.alpha),
                f(r.cost),
                f(r.expected_speedup),
                r.error.as_deref().unwrap_or("")
            ));
        }
        out
    }
}

fn point(
    cfg: &SweepConfig,
    target: &TargetModel,
    corpus: &SyntheticCorpus,
    n_layers: usize,
    draft_dim: usize,
) -> Result<(f64, f64)> {
    let mut spec = cfg.train.draft;
    spec.n_layers = n_layers;
    spec.draft_dim = draft_dim;
    let tc = &cfg.train.draft_training;
    let draft = DraftModel::new(spec.glide_config(target.cfg, tc.block_length), tc.seed)?;
    let (draft, _) = train_draft(draft, target, &corpus.train, tc)?;
    let alpha = evaluate_alpha(&draft, target, &corpus.eval)?;
    let (cost, _) = cfg.cost.resolve(&draft, target, cfg.cost_context)?;
    Ok((alpha, cost))
}

/// Trains the target once, then one draft per value (or a single draft for
/// the `gamma` axis). A failing point is recorded and the sweep continues.
pub fn sweep(cfg: &SweepConfig, axis: SweepAxis, values: &[usize]) -> Result<SweepTable> {
    if values.is_empty() {
        return Err(contract("sweep needs at least one value"));
    }
    let corpus = SyntheticCorpus::generate(cfg.train.corpus)?;
    let (target, _) = train_target_for(&cfg.train, &corpus)?;
    let base = cfg.train.draft;
    let row = |value: usize, r: Result<(f64, f64)>, gamma: usize| match r {
        Ok((alpha, cost)) => SweepRow {
            value,
            alpha: Some(alpha),
            cost: Some(cost),
            expected_speedup: Some(expected_speedup(alpha, gamma, cost)),
            error: None,
        },
        Err(e) => SweepRow {
            value,
            alpha: None,
            cost: None,
            expected_speedup: None,
            error: Some(e.to_string()),
        },
    };
    let rows = match axis {
        SweepAxis::Gamma => {
            let shared = point(cfg, &target, &corpus, base.n_layers, base.draft_dim);
            values
                .iter()
                .map(|&g| {
                    let r = match (&shared, g) {
                        (_, 0) => Err(contract("gamma must be at least 1")),
                        (Ok(v), _) => Ok(*v),
                        (Err(e), _) => Err(contract(e.to_string())),
                    };
                    row(g, r, g.max(1))
                })
                .collect()
        }
        SweepAxis::NLayers => values
            .iter()
            .map(|&n| row(n, point(cfg, &target, &corpus, n, base.draft_dim), cfg.gamma))
            .collect(),
        SweepAxis::DraftDim => values
            .iter()
            .map(|&d| row(d, point(cfg, &target, &corpus, base.n_layers, d), cfg.gamma))
            .collect(),
    };
    Ok(SweepTable { axis, rows })
}
