//! The epoch loop and checkpoints.
//!
//! A checkpoint is a directory:
//!
//! ```text
//! params.bin       current parameters (array-map file)
//! best_params.bin  parameters of the best validation epoch
//! optimizer.bin    Adam moments, keys `<param>.m` and `<param>.v`
//! state.json       config, item count, epoch counters, RNG position, history
//! config.cfg       the config in `key = value` form, for reading only
//! ```
//!
//! Checkpoints are written between epochs. Resuming one and training on
//! reproduces an uninterrupted run bit for bit.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::model::Model;
use crate::data::{prefix_segment, EvalCase, ItemId, SplitDataset};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalOptions};
use crate::intent::{fit_kmeans, IntentIndex};
use crate::numerics::random::seeded;
use crate::numerics::{Adam, AdamConfig, ArrayMap, Rng, RngState, Tape, Tensor};

/// Early-stopping metric: validation NDCG at this cutoff.
pub const VALID_K: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    /// Batch means of each term.
    pub loss: f64,
    pub rec: f64,
    pub cl: Option<f64>,
    pub diff: Option<f64>,
    pub valid_ndcg: f64,
    /// Anchors left without negatives, summed over batches.
    pub empty_anchors: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct State {
    config: TrainConfig,
    num_items: usize,
    epoch: usize,
    best_metric: f64,
    best_epoch: usize,
    since_best: usize,
    rng: RngState,
    adam_steps: Vec<u64>,
    history: Vec<EpochLog>,
}

/// Training subsequences of every user's training sequence. Sequences of
/// length one carry no target and are dropped.
pub fn training_subsequences(train: &[Vec<ItemId>], min_len: usize, max_len: usize) -> Result<(Vec<Vec<ItemId>>, Vec<usize>)> {
    let mut subseqs = Vec::new();
    let mut owner = Vec::new();
    for (u, seq) in train.iter().enumerate() {
        // Windows hold input plus target, so they span one more than the input.
        for s in prefix_segment(seq, min_len, max_len + 1)? {
            if s.len() >= 2 {
                subseqs.push(s);
                owner.push(u);
            }
        }
    }
    Ok((subseqs, owner))
}

pub struct Trainer {
    pub model: Model,
    subseqs: Vec<Vec<ItemId>>,
    /// Index into the split's training users for each subsequence.
    owner: Vec<usize>,
    valid: Vec<EvalCase>,
    optimizer: Adam,
    rng: Rng,
    epoch: usize,
    best_metric: f64,
    best_epoch: usize,
    since_best: usize,
    best_params: ArrayMap,
    history: Vec<EpochLog>,
    index: Option<IntentIndex>,
}

impl Trainer {
    pub fn new(config: &TrainConfig, split: &SplitDataset) -> Result<Self> {
        let mut rng = seeded(config.seed);
        let model = Model::new(config, split.num_items, &mut rng)?;
        Self::assemble(model, split, rng)
    }

    fn assemble(model: Model, split: &SplitDataset, rng: Rng) -> Result<Self> {
        let cfg = &model.config;
        let (subseqs, owner) = training_subsequences(&split.train, cfg.min_len, cfg.max_len)?;
        if subseqs.is_empty() {
            return Err(Error::invalid("train", "no training subsequences"));
        }
        if split.valid.is_empty() {
            return Err(Error::invalid("train", "empty validation split"));
        }
        let optimizer = Adam::new(
            &model.store,
            AdamConfig {
                lr: cfg.lr,
                ..AdamConfig::default()
            },
        );
        Ok(Self {
            best_params: model.store.to_arrays(),
            model,
            subseqs,
            owner,
            valid: split.valid.clone(),
            optimizer,
            rng,
            epoch: 0,
            best_metric: f64::NEG_INFINITY,
            best_epoch: 0,
            since_best: 0,
            history: Vec::new(),
            index: None,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.model.config
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn history(&self) -> &[EpochLog] {
        &self.history
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_metric(&self) -> f64 {
        self.best_metric
    }

    pub fn subsequences(&self) -> &[Vec<ItemId>] {
        &self.subseqs
    }

    /// Training-user index of each subsequence.
    pub fn owners(&self) -> &[usize] {
        &self.owner
    }

    /// The index fitted at the start of the last epoch.
    pub fn intent_index(&self) -> Option<&IntentIndex> {
        self.index.as_ref()
    }

    /// Inputs (target dropped) of all training subsequences.
    pub fn subsequence_inputs(&self) -> Vec<&[ItemId]> {
        self.subseqs.iter().map(|s| &s[..s.len() - 1]).collect()
    }

    /// Clusters the current eval-mode subsequence representations.
    pub fn fit_index(&self, rng: &mut Rng) -> Result<IntentIndex> {
        let reprs = self.model.represent(&self.subsequence_inputs())?;
        let cfg = self.config();
        fit_kmeans(&reprs, cfg.num_clusters, cfg.kmeans_iters, rng)
    }

    pub fn finished(&self) -> bool {
        let cfg = self.config();
        self.epoch >= cfg.epochs || (self.epoch > 0 && self.since_best >= cfg.patience)
    }

    /// One pass over the training subsequences, then validation. A non-finite
    /// loss aborts before its update, leaving the last good parameters.
    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        let started = Instant::now();
        let epoch = self.epoch + 1;
        if self.config().uses_augmentation() {
            let mut rng = self.rng.clone();
            self.index = Some(self.fit_index(&mut rng)?);
            self.rng = rng;
        }
        let mut order: Vec<usize> = (0..self.subseqs.len()).collect();
        order.shuffle(&mut self.rng);

        let mut sums = [0.0; 4];
        let mut batches = 0usize;
        let mut empty_anchors = 0;
        for ids in order.chunks(self.config().batch_size) {
            let plan = self.model.plan_batch(&self.subseqs, ids, self.index.as_ref(), &mut self.rng)?;
            let mut tape = Tape::new();
            let p = self.model.store.bind(&mut tape, true);
            let terms = self.model.compute_losses(&mut tape, &p, &plan, Some(&mut self.rng))?;
            let total = tape.item(terms.total);
            if !total.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            let grads = tape.backward(terms.total)?;
            self.model.store.accumulate_grads(&p, &grads)?;
            self.optimizer.step(&mut self.model.store)?;
            self.model.store.zero_grads();

            sums[0] += total;
            sums[1] += tape.item(terms.rec);
            sums[2] += terms.cl.map_or(0.0, |v| tape.item(v));
            sums[3] += terms.diff.map_or(0.0, |v| tape.item(v));
            empty_anchors += terms.empty_anchors;
            batches += 1;
        }
        let n = batches as f64;
        let cfg = self.config();
        let opts = EvalOptions {
            ks: vec![VALID_K],
            batch_size: cfg.eval_batch,
            ..EvalOptions::default()
        };
        let valid_ndcg = evaluate(&self.model, &self.valid, &opts)?.ndcg[&VALID_K];
        let log = EpochLog {
            epoch,
            loss: sums[0] / n,
            rec: sums[1] / n,
            cl: (cfg.gamma > 0.0).then(|| sums[2] / n),
            diff: (cfg.lambda > 0.0).then(|| sums[3] / n),
            valid_ndcg,
            empty_anchors,
        };
        self.epoch = epoch;
        if valid_ndcg > self.best_metric {
            self.best_metric = valid_ndcg;
            self.best_epoch = epoch;
            self.since_best = 0;
            self.best_params = self.model.store.to_arrays();
        } else {
            self.since_best += 1;
        }
        log::info!(
            "epoch {epoch}: loss {:.5} rec {:.5} valid ND@{VALID_K} {:.4} ({:.1}s)",
            log.loss,
            log.rec,
            valid_ndcg,
            started.elapsed().as_secs_f64()
        );
        self.history.push(log.clone());
        Ok(log)
    }

    /// Runs epochs until the budget is spent or validation stops improving.
    pub fn fit(&mut self) -> Result<()> {
        while !self.finished() {
            self.run_epoch()?;
        }
        Ok(())
    }

    /// A copy of the model holding the best validation parameters.
    pub fn best_model(&self) -> Result<Model> {
        let mut m = self.model.clone();
        m.store.load_arrays(&self.best_params)?;
        Ok(m)
    }

    fn state(&self) -> State {
        State {
            config: self.model.config.clone(),
            num_items: self.model.num_items,
            epoch: self.epoch,
            best_metric: self.best_metric,
            best_epoch: self.best_epoch,
            since_best: self.since_best,
            rng: RngState::capture(&self.rng),
            adam_steps: self.optimizer.states.iter().map(|s| s.step_count).collect(),
            history: self.history.clone(),
        }
    }

    /// Writes the full training state to `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        write_checkpoint(dir, &self.model.store.to_arrays(), &self.state())?;
        self.best_params.save(&dir.join("best_params.bin"))?;
        let mut moments = ArrayMap::new();
        for ((name, t), s) in self.model.store.iter().zip(&self.optimizer.states) {
            moments.insert(format!("{name}.m"), Tensor::new(t.shape().to_vec(), s.first_moment.clone())?);
            moments.insert(format!("{name}.v"), Tensor::new(t.shape().to_vec(), s.second_moment.clone())?);
        }
        moments.save(&dir.join("optimizer.bin"))
    }

    /// Writes the best parameters as a checkpoint that [`load_model`] reads.
    pub fn save_best(&self, dir: &Path) -> Result<()> {
        write_checkpoint(dir, &self.best_params, &self.state())
    }

    /// Restores a directory written by [`Trainer::save`]. The split must be
    /// the one training started from.
    pub fn resume(dir: &Path, split: &SplitDataset) -> Result<Self> {
        let state = read_state(dir)?;
        if state.num_items != split.num_items {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} items, dataset has {}",
                state.num_items, split.num_items
            )));
        }
        let mut model = Model::new(&state.config, state.num_items, &mut seeded(state.config.seed))?;
        model.store.load_arrays(&ArrayMap::load(&dir.join("params.bin"))?)?;
        let rng = state
            .rng
            .restore()
            .ok_or_else(|| Error::Checkpoint("unreadable RNG state".into()))?;
        let mut t = Self::assemble(model, split, rng)?;
        let best = ArrayMap::load(&dir.join("best_params.bin"))?;
        t.model.store.clone().load_arrays(&best)?;
        t.best_params = best;
        let moments = ArrayMap::load(&dir.join("optimizer.bin"))?;
        if state.adam_steps.len() != t.optimizer.states.len() {
            return Err(Error::Checkpoint("optimizer state does not match the parameters".into()));
        }
        for (((name, _), s), &steps) in t.model.store.iter().zip(t.optimizer.states.iter_mut()).zip(&state.adam_steps) {
            let len = s.first_moment.len();
            let get = |suffix: &str| {
                moments
                    .get(&format!("{name}.{suffix}"))
                    .filter(|m| m.len() == len)
                    .map(|m| m.values().to_vec())
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer moment {name}.{suffix}")))
            };
            s.first_moment = get("m")?;
            s.second_moment = get("v")?;
            s.step_count = steps;
        }
        t.epoch = state.epoch;
        t.best_metric = state.best_metric;
        t.best_epoch = state.best_epoch;
        t.since_best = state.since_best;
        t.history = state.history;
        Ok(t)
    }
}

fn write_checkpoint(dir: &Path, params: &ArrayMap, state: &State) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    params.save(&dir.join("params.bin"))?;
    let json = dir.join("state.json");
    std::fs::write(&json, serde_json::to_string_pretty(state)?).map_err(|e| Error::io(&json, e))?;
    let cfg = dir.join("config.cfg");
    std::fs::write(&cfg, state.config.to_text()).map_err(|e| Error::io(&cfg, e))
}

fn read_state(dir: &Path) -> Result<State> {
    let path = dir.join("state.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let state: State = serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    state.config.validate()?;
    Ok(state)
}

/// The model stored in a checkpoint directory (its `params.bin`).
pub fn load_model(dir: &Path) -> Result<Model> {
    let state = read_state(dir)?;
    let mut model = Model::new(&state.config, state.num_items, &mut seeded(state.config.seed))?;
    model.store.load_arrays(&ArrayMap::load(&dir.join("params.bin"))?)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subsequences_carry_a_target() {
        let train = vec![vec![1, 2, 3, 4, 5, 6], vec![7]];
        let (subs, owner) = training_subsequences(&train, 2, 3).unwrap();
        assert_eq!(
            subs,
            vec![vec![1, 2], vec![1, 2, 3], vec![1, 2, 3, 4], vec![2, 3, 4, 5], vec![3, 4, 5, 6]]
        );
        assert_eq!(owner, vec![0; 5]);
    }
}
