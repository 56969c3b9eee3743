//! Small synthetic datasets with known structure.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{InteractionDataset, ItemId};
use crate::error::{Error, Result};
use crate::numerics::random::seeded;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SynthKind {
    /// Every sequence walks the cycle `1 → 2 → … → items → 1` from a random start.
    Cyclic,
    /// Each user draws from one of two disjoint item pools, with a fixed
    /// share of items taken from the other pool.
    TwoIntent,
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cyclic" => Ok(Self::Cyclic),
            "two-intent" => Ok(Self::TwoIntent),
            other => Err(Error::invalid("synth", format!("unknown kind '{other}' (cyclic | two-intent)"))),
        }
    }
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Cyclic => "cyclic",
            Self::TwoIntent => "two-intent",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub users: usize,
    /// Cycle length, or the size of each intent pool.
    pub items: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Share of each two-intent sequence drawn from the other pool.
    pub crossover: f64,
}

impl SynthParams {
    pub fn cyclic() -> Self {
        Self {
            users: 200,
            items: 20,
            min_len: 10,
            max_len: 25,
            crossover: 0.0,
        }
    }

    pub fn two_intent() -> Self {
        Self {
            users: 200,
            items: 15,
            min_len: 10,
            max_len: 25,
            crossover: 0.1,
        }
    }

    pub fn for_kind(kind: SynthKind) -> Self {
        match kind {
            SynthKind::Cyclic => Self::cyclic(),
            SynthKind::TwoIntent => Self::two_intent(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Synthetic {
    pub dataset: InteractionDataset,
    /// Ground-truth intent per user (all 0 for the cyclic kind).
    pub intents: Vec<usize>,
}

pub fn make_synthetic(kind: SynthKind, params: SynthParams, seed: u64) -> Result<Synthetic> {
    if params.users == 0 || params.items < 2 || params.min_len < 5 || params.max_len < params.min_len {
        return Err(Error::invalid(
            "synth",
            "need users >= 1, items >= 2 and 5 <= min_len <= max_len",
        ));
    }
    if !(0.0..=0.5).contains(&params.crossover) {
        return Err(Error::invalid("synth", "crossover must lie in [0, 0.5]"));
    }
    let mut rng = seeded(seed);
    let mut sequences = Vec::with_capacity(params.users);
    let mut intents = Vec::with_capacity(params.users);
    for _ in 0..params.users {
        let len = rng.random_range(params.min_len..=params.max_len);
        match kind {
            SynthKind::Cyclic => {
                let start = rng.random_range(0..params.items);
                sequences.push((0..len).map(|k| ((start + k) % params.items) as ItemId + 1).collect());
                intents.push(0);
            }
            SynthKind::TwoIntent => {
                let intent = rng.random_range(0..2usize);
                let crossed = sample(&mut rng, len, (params.crossover * len as f64).floor() as usize).into_vec();
                let seq: Vec<ItemId> = (0..len)
                    .map(|k| {
                        let pool = if crossed.contains(&k) { 1 - intent } else { intent };
                        (pool * params.items + rng.random_range(0..params.items)) as ItemId + 1
                    })
                    .collect();
                sequences.push(seq);
                intents.push(intent);
            }
        }
    }
    let num_items = match kind {
        SynthKind::Cyclic => params.items,
        SynthKind::TwoIntent => 2 * params.items,
    };
    Ok(Synthetic {
        dataset: InteractionDataset::from_sequences(num_items, sequences)?,
        intents,
    })
}

/// Pool (0 or 1) of a two-intent item id.
pub fn intent_of_item(item: ItemId, pool_size: usize) -> usize {
    (item as usize - 1) / pool_size
}
