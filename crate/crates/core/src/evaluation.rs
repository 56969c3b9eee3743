//! Full-ranking HR@k / NDCG@k, length-bucketed reports, and noise sweeps.

use std::collections::BTreeMap;

use serde_json::{json, Map, Value};

use crate::data::{inject_noise, EvalCase, ItemId};
use crate::error::{Error, Result};
use crate::numerics::random::seeded;

pub const DEFAULT_KS: [usize; 2] = [5, 20];
pub const NOISE_RATIOS: [f64; 4] = [0.05, 0.10, 0.15, 0.20];

/// Anything that scores every real item for a batch of input sequences.
/// Column `i` of a score row belongs to item `i + 1`.
pub trait Scorer {
    fn score(&self, inputs: &[&[ItemId]]) -> Result<Vec<Vec<f64>>>;
}

impl<F> Scorer for F
where
    F: Fn(&[ItemId]) -> Vec<f64>,
{
    fn score(&self, inputs: &[&[ItemId]]) -> Result<Vec<Vec<f64>>> {
        Ok(inputs.iter().map(|s| self(s)).collect())
    }
}

/// 1-based rank; every other item with a score at least the target's ranks
/// ahead of it.
pub fn rank_of_target(scores: &[f64], target: usize) -> usize {
    let s = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &v)| j != target && v >= s)
        .count()
}

/// `(hit, ndcg)` for a single relevant item at `rank`.
pub fn hr_ndcg(rank: usize, k: usize) -> (f64, f64) {
    if rank <= k {
        (1.0, 1.0 / ((rank + 1) as f64).log2())
    } else {
        (0.0, 0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub ks: Vec<usize>,
    /// Drop items already in the input from the ranking (off by default).
    pub filter_history: bool,
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            ks: DEFAULT_KS.to_vec(),
            filter_history: false,
            batch_size: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    /// Empty when no user was evaluated.
    pub hr: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub num_users: usize,
    pub group: Option<String>,
    pub noise_ratio: Option<f64>,
}

impl MetricsReport {
    /// One JSON object in the report-line layout.
    pub fn to_json(&self, split: &str, ks: &[usize], checkpoint: Option<&str>, seed: Option<u64>) -> Value {
        let mut m = Map::new();
        m.insert("split".into(), json!(split));
        m.insert("group".into(), json!(self.group));
        m.insert("noise_ratio".into(), json!(self.noise_ratio));
        for &k in ks {
            m.insert(format!("HR@{k}"), json!(self.hr.get(&k)));
        }
        for &k in ks {
            m.insert(format!("ND@{k}"), json!(self.ndcg.get(&k)));
        }
        m.insert("num_users".into(), json!(self.num_users));
        m.insert("checkpoint".into(), json!(checkpoint));
        m.insert("seed".into(), json!(seed));
        Value::Object(m)
    }
}

/// Per-user ranks of the target, in case order.
pub fn target_ranks<S: Scorer + ?Sized>(scorer: &S, cases: &[EvalCase], opts: &EvalOptions) -> Result<Vec<usize>> {
    let mut ranks = Vec::with_capacity(cases.len());
    for chunk in cases.chunks(opts.batch_size.max(1)) {
        let inputs: Vec<&[ItemId]> = chunk.iter().map(|c| c.input.as_slice()).collect();
        let scores = scorer.score(&inputs)?;
        if scores.len() != chunk.len() {
            return Err(Error::invalid("evaluate", "scorer returned the wrong number of rows"));
        }
        for (case, mut row) in chunk.iter().zip(scores) {
            let col = (case.target as usize)
                .checked_sub(1)
                .filter(|c| *c < row.len())
                .ok_or_else(|| Error::invalid("evaluate", format!("target {} outside the scored items", case.target)))?;
            if opts.filter_history {
                for &i in &case.input {
                    if i != case.target && i > 0 && (i as usize) <= row.len() {
                        row[i as usize - 1] = f64::NEG_INFINITY;
                    }
                }
            }
            ranks.push(rank_of_target(&row, col));
        }
    }
    Ok(ranks)
}

fn aggregate(ranks: &[usize], ks: &[usize]) -> MetricsReport {
    let mut report = MetricsReport {
        num_users: ranks.len(),
        ..Default::default()
    };
    if ranks.is_empty() {
        return report;
    }
    let n = ranks.len() as f64;
    for &k in ks {
        let (h, g) = ranks.iter().fold((0.0, 0.0), |(h, g), &r| {
            let (a, b) = hr_ndcg(r, k);
            (h + a, g + b)
        });
        report.hr.insert(k, h / n);
        report.ndcg.insert(k, g / n);
    }
    report
}

pub fn evaluate<S: Scorer + ?Sized>(scorer: &S, cases: &[EvalCase], opts: &EvalOptions) -> Result<MetricsReport> {
    if cases.is_empty() {
        return Err(Error::invalid("evaluate", "no users to evaluate"));
    }
    Ok(aggregate(&target_ranks(scorer, cases, opts)?, &opts.ks))
}

/// Label of the bucket holding `len`, for ascending upper bounds.
fn bucket_labels(bounds: &[usize]) -> Vec<String> {
    let mut labels = Vec::with_capacity(bounds.len() + 1);
    let mut lo = 0;
    for (i, &b) in bounds.iter().enumerate() {
        labels.push(if i == 0 { format!("<={b}") } else { format!("{}-{b}", lo + 1) });
        lo = b;
    }
    labels.push(match bounds.last() {
        Some(b) => format!(">{b}"),
        None => "all".into(),
    });
    labels
}

/// Users partitioned by full sequence length: `bounds = [5, 10]` gives
/// `<=5`, `6-10`, `>10`. Empty buckets yield reports with no metrics.
pub fn group_report<S: Scorer + ?Sized>(scorer: &S, cases: &[EvalCase], bounds: &[usize], opts: &EvalOptions) -> Result<Vec<MetricsReport>> {
    if bounds.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("group_report", "bucket bounds must be strictly ascending"));
    }
    let ranks = target_ranks(scorer, cases, opts)?;
    let labels = bucket_labels(bounds);
    let mut buckets = vec![Vec::new(); labels.len()];
    for (case, r) in cases.iter().zip(ranks) {
        let b = bounds.iter().position(|&u| case.full_length <= u).unwrap_or(bounds.len());
        buckets[b].push(r);
    }
    Ok(buckets
        .iter()
        .zip(labels)
        .map(|(r, label)| MetricsReport {
            group: Some(label),
            ..aggregate(r, &opts.ks)
        })
        .collect())
}

/// Inserts `floor(ratio·len)` unseen items into each input (targets kept) and
/// evaluates. Every ratio uses a fresh stream from `seed`.
pub fn noise_sweep<S: Scorer + ?Sized>(
    scorer: &S,
    cases: &[EvalCase],
    ratios: &[f64],
    num_items: usize,
    seed: u64,
    opts: &EvalOptions,
) -> Result<Vec<MetricsReport>> {
    ratios
        .iter()
        .map(|&ratio| {
            let mut rng = seeded(seed);
            let noisy = cases
                .iter()
                .map(|c| {
                    Ok(EvalCase {
                        input: inject_noise(&c.input, ratio, num_items, &mut rng)?.items,
                        ..c.clone()
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(MetricsReport {
                noise_ratio: Some(ratio),
                ..evaluate(scorer, &noisy, opts)?
            })
        })
        .collect()
}
