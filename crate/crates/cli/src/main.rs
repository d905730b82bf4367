use std::fs;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use glide::bench::{run_experiment, sweep, table1_check, ExperimentConfig, SweepAxis, SweepConfig};
use glide::model::{DraftModel, TargetModel};
use glide::speculation::ExpansionRule;
use glide::tensor::TokenId;
use glide::train::{run_train_job, CorpusKind, CorpusSpec, SyntheticCorpus, TrainJobConfig};
use glide::verify::{decode_session, AcceptanceStrategy, DecodeConfig};

#[derive(Parser)]
#[command(name = "glide", version, about = "Speculative decoding with cache-attending draft models")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Strategy {
    Greedy,
    Sampling,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a target, a GliDe draft and optionally a vanilla draft.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `out_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decode prompts (one per line, whitespace separated token ids) and print
    /// the generated continuation of each.
    Decode {
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        draft: PathBuf,
        #[arg(long, value_enum, default_value = "greedy")]
        strategy: Strategy,
        #[arg(long, value_enum, default_value = "off")]
        cape: Switch,
        #[arg(long, default_value_t = 5)]
        gamma: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        prompt_file: PathBuf,
        #[arg(long, default_value_t = 32)]
        max_new: usize,
        /// JSONL file receiving one line per round.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Run an experiment and write a JSON report.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Retrain drafts along one axis and tabulate acceptance and speedup.
    Sweep {
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',')]
        values: Vec<usize>,
        #[arg(long)]
        config: PathBuf,
    },
    /// Write a synthetic corpus file.
    GenCorpus {
        #[arg(long)]
        kind: String,
        #[arg(long)]
        vocab: usize,
        #[arg(long)]
        len: usize,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Built-in numeric checks.
    Check {
        /// Compare the speedup formula against the reference table.
        #[arg(long)]
        table1: bool,
    },
}

fn read_prompts(path: &PathBuf) -> Result<Vec<Vec<TokenId>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut prompts = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let p = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<Vec<TokenId>, _>>()
            .with_context(|| format!("{}:{}: bad token id", path.display(), n + 1))?;
        prompts.push(p);
    }
    Ok(prompts)
}

#[allow(clippy::too_many_arguments)]
fn decode(
    target: PathBuf,
    draft: PathBuf,
    strategy: Strategy,
    cape: Switch,
    gamma: usize,
    seed: u64,
    prompt_file: PathBuf,
    max_new: usize,
    trace: Option<PathBuf>,
) -> Result<()> {
    let target = TargetModel::load(&target).with_context(|| format!("loading {}", target.display()))?;
    let draft = DraftModel::load(&draft).with_context(|| format!("loading {}", draft.display()))?;
    let mut cfg = DecodeConfig::greedy(gamma, max_new);
    cfg.seed = seed;
    cfg.strategy = match strategy {
        Strategy::Greedy => AcceptanceStrategy::Greedy,
        Strategy::Sampling => AcceptanceStrategy::Sampling,
    };
    cfg.cape = matches!(cape, Switch::On);
    cfg.speculation.expansion = ExpansionRule::Confidence;
    let mut sink = match &trace {
        Some(p) => Some(BufWriter::new(fs::File::create(p)?)),
        None => None,
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for (i, prompt) in read_prompts(&prompt_file)?.iter().enumerate() {
        let res = decode_session(prompt, &draft, &target, &cfg)?;
        let toks: Vec<String> = res.tokens.iter().map(ToString::to_string).collect();
        writeln!(out, "{}", toks.join(" "))?;
        if let Some(w) = sink.as_mut() {
            for r in &res.trace {
                let mut v = serde_json::to_value(r)?;
                v["prompt"] = i.into();
                writeln!(w, "{}", serde_json::to_string(&v)?)?;
            }
        }
        eprintln!("prompt {i}: {} rounds, {:.3} tokens/step", res.rounds(), res.tokens_per_step());
    }
    if let Some(mut w) = sink {
        w.flush()?;
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Train { config, out } => {
            let mut cfg = TrainJobConfig::load(&config)?;
            if out.is_some() {
                cfg.out_dir = out;
            }
            let res = run_train_job(&cfg)?;
            let last = |l: &[glide::train::StepStats]| l.last().map_or(f64::NAN, |s| s.loss);
            println!("target final loss {:.4}", last(&res.target_log));
            println!("glide  final loss {:.4} alpha {:.4}", last(&res.glide_log), res.glide_alpha);
            if let Some((_, log, alpha)) = &res.vanilla {
                println!("vanilla final loss {:.4} alpha {alpha:.4}", last(log));
            }
        }
        Cmd::Decode {
            target,
            draft,
            strategy,
            cape,
            gamma,
            seed,
            prompt_file,
            max_new,
            trace,
        } => decode(target, draft, strategy, cape, gamma, seed, prompt_file, max_new, trace)?,
        Cmd::Bench { config, out } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if out.is_some() {
                cfg.out = out;
            }
            let r = run_experiment(&cfg)?;
            let a = &r.aggregate;
            println!("{}", serde_json::to_string_pretty(a)?);
        }
        Cmd::Sweep { axis, values, config } => {
            let axis: SweepAxis = axis.parse()?;
            let cfg = SweepConfig::load(&config)?;
            print!("{}", sweep(&cfg, axis, &values)?.to_tsv());
        }
        Cmd::GenCorpus {
            kind,
            vocab,
            len,
            count,
            seed,
            out,
        } => {
            let kind: CorpusKind = kind.parse()?;
            let spec = CorpusSpec {
                kind,
                vocab,
                seq_len: len,
                train: count,
                eval: 0,
                seed,
            };
            let c = SyntheticCorpus::generate(spec)?;
            c.train.save(&out)?;
            println!("wrote {} sequences to {}", c.train.sequences.len(), out.display());
        }
        Cmd::Check { table1 } => {
            if !table1 {
                bail!("nothing to check; pass --table1");
            }
            let mut ok = true;
            println!("alpha\tcost\tprinted\tcomputed\tpass");
            for r in table1_check() {
                println!("{}\t{}\t{}\t{:.4}\t{}", r.alpha, r.cost, r.printed, r.computed, r.pass);
                ok &= r.pass;
            }
            if !ok {
                std::process::exit(1);
            }
        }
    }
    Ok(())
}
