//! Command-line front end. Reports go to stdout as one JSON object per line;
//! logs go to stderr.
//!
//! `--data` accepts an interaction file (`user item item ...` per line), a
//! `split.json` written by `prepare`, or the directory holding it.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use super::config::TrainConfig;
use super::synthetic::{make_synthetic, SynthKind, SynthParams};
use super::trainer::{load_model, training_subsequences, Trainer};
use crate::data::{leave_one_out, load_interactions, Split, SplitDataset};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, group_report, noise_sweep, EvalOptions, DEFAULT_KS, NOISE_RATIOS};
use crate::intent::fit_kmeans;
use crate::numerics::random::seeded;
use crate::numerics::{ArrayMap, Tensor};

#[derive(Debug, Parser)]
#[command(name = "indirec", version, about = "Intent-aware diffusion contrastive sequential recommender")]
pub struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load interactions, split leave-one-out and segment training sequences.
    Prepare {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train and write `last` and `best` checkpoints under `--out`.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        /// Continue from a `last` checkpoint with its stored config.
        #[arg(long, conflicts_with_all = ["config", "seed", "set"])]
        resume: Option<PathBuf>,
    },
    /// Full-ranking metrics of a checkpoint.
    Evaluate {
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Length-bucketed and noise-injected reports.
    Robustness {
        #[command(flatten)]
        eval: EvalArgs,
        /// Noise ratios, comma separated.
        #[arg(long, value_delimiter = ',', default_values_t = NOISE_RATIOS)]
        noise: Vec<f64>,
        /// Upper bounds of the length buckets, comma separated.
        #[arg(long, value_delimiter = ',', default_values_t = [5usize, 10])]
        groups: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Sample one generated view per user of a split.
    Augment {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output array-map file, one `[len, d]` entry per user index.
        #[arg(long)]
        out: PathBuf,
        /// Guidance strength; -1 samples unconditionally.
        #[arg(long, allow_hyphen_values = true)]
        omega: Option<f64>,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Subsequence representations, intent prototypes and cluster assignments.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate a synthetic interaction file.
    Synth {
        #[arg(long)]
        kind: SynthKind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        users: Option<usize>,
    },
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// `key = value` config file; unset keys keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override one key, e.g. `--set omega=-1`. Repeatable.
    #[arg(long, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => TrainConfig::load(path)?,
            None => TrainConfig::default(),
        };
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
            cfg.set(k.trim(), v)?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Remove already-seen items from the ranking.
    #[arg(long)]
    pub filter_history: bool,
}

/// Reads whichever of the accepted `--data` forms `path` is.
pub fn load_split(path: &Path) -> Result<SplitDataset> {
    let json = if path.is_dir() { path.join("split.json") } else { path.to_path_buf() };
    if json.extension().is_some_and(|e| e == "json") {
        let text = std::fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
        return Ok(serde_json::from_str(&text)?);
    }
    Ok(leave_one_out(&load_interactions(path)?))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn emit(value: serde_json::Value) {
    println!("{value}");
}

fn eval_options(batch: usize, filter_history: bool) -> EvalOptions {
    EvalOptions {
        ks: DEFAULT_KS.to_vec(),
        filter_history,
        batch_size: batch,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare { input, out, config } => {
            let cfg = config.resolve()?;
            let ds = load_interactions(&input)?;
            let split = leave_one_out(&ds);
            let (subseqs, _) = training_subsequences(&split.train, cfg.min_len, cfg.max_len)?;
            write(&out.join("split.json"), serde_json::to_string(&split)?)?;
            let mut text = String::new();
            for s in &subseqs {
                let line: Vec<String> = s.iter().map(ToString::to_string).collect();
                let _ = writeln!(text, "{}", line.join(" "));
            }
            write(&out.join("subsequences.txt"), text)?;
            emit(json!({
                "users": ds.num_users(),
                "items": ds.num_items,
                "interactions": ds.num_interactions(),
                "skipped": split.skipped,
                "subsequences": subseqs.len(),
            }));
        }
        Command::Train { data, out, config, resume } => {
            let cfg = match resume {
                Some(_) => None,
                None => Some(config.resolve()?),
            };
            let split = load_split(&data)?;
            let mut trainer = match (cfg, resume) {
                (Some(cfg), _) => Trainer::new(&cfg, &split)?,
                (None, Some(dir)) => Trainer::resume(&dir, &split)?,
                (None, None) => unreachable!("config resolved when not resuming"),
            };
            let (last, best) = (out.join("last"), out.join("best"));
            while !trainer.finished() {
                let log = trainer.run_epoch()?;
                trainer.save(&last)?;
                trainer.save_best(&best)?;
                emit(serde_json::to_value(&log)?);
            }
            let model = trainer.best_model()?;
            let opts = eval_options(model.config.eval_batch, false);
            let ckpt = best.display().to_string();
            for s in [Split::Valid, Split::Test] {
                let r = evaluate(&model, split.cases(s), &opts)?;
                emit(r.to_json(&s.to_string(), &opts.ks, Some(&ckpt), Some(model.config.seed)));
            }
        }
        Command::Evaluate { eval } => {
            let model = load_model(&eval.checkpoint)?;
            let split = load_split(&eval.data)?;
            let opts = eval_options(model.config.eval_batch, eval.filter_history);
            let r = evaluate(&model, split.cases(eval.split), &opts)?;
            let ckpt = eval.checkpoint.display().to_string();
            emit(r.to_json(&eval.split.to_string(), &opts.ks, Some(&ckpt), Some(model.config.seed)));
        }
        Command::Robustness { eval, noise, groups, seed } => {
            let model = load_model(&eval.checkpoint)?;
            let split = load_split(&eval.data)?;
            let cases = split.cases(eval.split);
            let opts = eval_options(model.config.eval_batch, eval.filter_history);
            let ckpt = eval.checkpoint.display().to_string();
            let name = eval.split.to_string();
            for r in group_report(&model, cases, &groups, &opts)? {
                emit(r.to_json(&name, &opts.ks, Some(&ckpt), None));
            }
            for r in noise_sweep(&model, cases, &noise, split.num_items, seed, &opts)? {
                emit(r.to_json(&name, &opts.ks, Some(&ckpt), Some(seed)));
            }
        }
        Command::Augment {
            checkpoint,
            data,
            out,
            omega,
            split: which,
            seed,
        } => {
            let model = load_model(&checkpoint)?;
            let split = load_split(&data)?;
            let cases = split.cases(which);
            let inputs: Vec<Vec<_>> = cases.iter().map(|c| c.input.clone()).collect();
            let reprs = model.represent(&inputs)?;
            let mut rng = seeded(seed);
            let index = fit_kmeans(&reprs, model.config.num_clusters, model.config.kmeans_iters, &mut rng)?;
            let conds: Vec<Vec<f64>> = (0..cases.len())
                .map(|i| reprs[index.sample_same_intent(index.assignments[i], i, &mut rng)].clone())
                .collect();
            let omega = omega.unwrap_or(model.config.omega);
            let views = model.sample_views(&inputs, &conds, omega, &mut rng)?;
            let mut map = ArrayMap::new();
            for (case, view) in cases.iter().zip(views) {
                map.insert(case.user.to_string(), view);
            }
            map.save(&out)?;
            emit(json!({"split": which.to_string(), "views": cases.len(), "omega": omega, "out": out.display().to_string()}));
        }
        Command::ExportEmbeddings { checkpoint, data, out, seed } => {
            let model = load_model(&checkpoint)?;
            let split = load_split(&data)?;
            let cfg = &model.config;
            let (subseqs, owner) = training_subsequences(&split.train, cfg.min_len, cfg.max_len)?;
            let inputs: Vec<&[_]> = subseqs.iter().map(|s| &s[..s.len() - 1]).collect();
            let reprs = model.represent(&inputs)?;
            let index = fit_kmeans(&reprs, cfg.num_clusters, cfg.kmeans_iters, &mut seeded(seed))?;
            let d = cfg.dim;
            let mut arrays = ArrayMap::new();
            arrays.insert("representations", Tensor::new(vec![reprs.len(), d], reprs.concat())?);
            arrays.insert("prototypes", Tensor::new(vec![index.k(), d], index.prototypes.concat())?);
            arrays.insert("items", model.item_embeddings().clone());
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            arrays.save(&out.join("embeddings.bin"))?;
            let mut csv = String::from("id,user,cluster\n");
            for (i, (&u, &c)) in owner.iter().zip(&index.assignments).enumerate() {
                let _ = writeln!(csv, "{i},{},{c}", split.valid[u].user);
            }
            write(&out.join("clusters.csv"), csv)?;
            emit(json!({"subsequences": reprs.len(), "clusters": index.k(), "objective": index.objective(), "out": out.display().to_string()}));
        }
        Command::Synth { kind, out, seed, users } => {
            let mut params = SynthParams::for_kind(kind);
            if let Some(u) = users {
                params.users = u;
            }
            let s = make_synthetic(kind, params, seed)?;
            write(&out, s.dataset.to_text())?;
            let labels: String = s.intents.iter().enumerate().map(|(u, i)| format!("{u},{i}\n")).collect();
            write(&out.with_extension("intents.csv"), format!("user,intent\n{labels}"))?;
            emit(json!({"kind": kind.to_string(), "users": s.dataset.num_users(), "items": s.dataset.num_items, "seed": seed}));
        }
    }
    Ok(())
}

/// Parses `args` (program name first), runs, and returns the exit code:
/// 0 on success, 2 on usage errors, 1 on any other failure.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
