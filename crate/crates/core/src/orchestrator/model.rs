//! Encoder plus denoiser in one parameter store, the per-batch random draws,
//! and the joint loss computed from them.

use rand::Rng as _;

use super::config::{DiffusionLossMode, SingletonGuidance, TrainConfig};
use crate::data::ItemId;
use crate::diffusion::{build_schedule, forward_sample, Denoiser, DiffusionSchedule};
use crate::encoder::{Encoder, SeqBatch};
use crate::error::{Error, Result};
use crate::evaluation::Scorer;
use crate::intent::IntentIndex;
use crate::numerics::random::normals;
use crate::numerics::{Bound, ParamStore, Rng, Tape, Tensor, Var};
use crate::objectives::{info_nce, joint_loss, rec_loss, score_items, target_columns, ContrastiveBatch};

#[derive(Debug, Clone)]
pub struct Model {
    pub config: TrainConfig,
    pub num_items: usize,
    pub encoder: Encoder,
    pub denoiser: Denoiser,
    pub schedule: DiffusionSchedule,
    pub store: ParamStore,
}

/// Random inputs of one diffusion-loss term.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionDraw {
    pub steps: Vec<usize>,
    /// `[R, d]` standard-normal noise for the batch's real positions.
    pub noise: Vec<f64>,
    pub uncond: Vec<bool>,
}

/// Everything random about one training batch except dropout, drawn up
/// front so that the loss is a deterministic function of the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPlan {
    pub inputs: Vec<Vec<ItemId>>,
    pub targets: Vec<ItemId>,
    /// Anchor cluster ids for negative exclusion.
    pub clusters: Vec<usize>,
    /// `[B, d]` guidance signals; empty when augmentation is off.
    pub guidance: Vec<f64>,
    pub diffusion: Vec<DiffusionDraw>,
    /// `[R, d]` sampled view rows; empty when the contrastive term is off.
    pub views: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub rec: Var,
    pub cl: Option<Var>,
    pub diff: Option<Var>,
    pub empty_anchors: usize,
}

impl Model {
    pub fn new(config: &TrainConfig, num_items: usize, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, config.encoder(num_items), rng)?;
        let denoiser = Denoiser::new(&mut store, config.dim, rng)?;
        let schedule = build_schedule(config.diffusion_steps, config.beta_start, config.beta_end)?;
        Ok(Self {
            config: config.clone(),
            num_items,
            encoder,
            denoiser,
            schedule,
            store,
        })
    }

    /// Eval-mode last-position representations.
    pub fn represent<S: AsRef<[ItemId]>>(&self, seqs: &[S]) -> Result<Vec<Vec<f64>>> {
        self.encoder.represent(&self.store, seqs, self.config.eval_batch)
    }

    pub fn item_embeddings(&self) -> &Tensor {
        self.store.get(self.encoder.item_embeddings())
    }

    fn batch(&self, inputs: &[Vec<ItemId>]) -> Result<SeqBatch> {
        SeqBatch::new(inputs, self.config.max_len)
    }

    /// Draws the random parts of a batch. `subseqs` are full training
    /// subsequences (input followed by target); `ids` picks the batch.
    pub fn plan_batch(&self, subseqs: &[Vec<ItemId>], ids: &[usize], index: Option<&IntentIndex>, rng: &mut Rng) -> Result<BatchPlan> {
        let cfg = &self.config;
        let d = cfg.dim;
        let mut inputs = Vec::with_capacity(ids.len());
        let mut targets = Vec::with_capacity(ids.len());
        for &i in ids {
            let s = &subseqs[i];
            if s.len() < 2 {
                return Err(Error::invalid("plan_batch", format!("subsequence {i} has no input")));
            }
            inputs.push(s[..s.len() - 1].to_vec());
            targets.push(s[s.len() - 1]);
        }
        let mut plan = BatchPlan {
            clusters: vec![0; ids.len()],
            inputs,
            targets,
            guidance: Vec::new(),
            diffusion: Vec::new(),
            views: Vec::new(),
        };
        if !cfg.uses_augmentation() {
            return Ok(plan);
        }
        let index = index.ok_or_else(|| Error::invalid("plan_batch", "augmentation needs an intent index"))?;

        let mut sources: Vec<Vec<ItemId>> = Vec::with_capacity(ids.len());
        let mut prototype_rows: Vec<(usize, usize)> = Vec::new();
        for (b, &i) in ids.iter().enumerate() {
            let c = index.assignments[i];
            plan.clusters[b] = c;
            let j = index.sample_same_intent(c, i, rng);
            if j == i && cfg.singleton_guidance == SingletonGuidance::Prototype {
                prototype_rows.push((b, c));
            }
            let s = &subseqs[j];
            sources.push(s[..s.len() - 1].to_vec());
        }
        let mut guidance: Vec<f64> = self.represent(&sources)?.concat();
        for (b, c) in prototype_rows {
            guidance[b * d..(b + 1) * d].copy_from_slice(&index.prototypes[c]);
        }

        let batch = self.batch(&plan.inputs)?;
        let real = batch.real_positions();
        let rows = real.len();
        if cfg.lambda > 0.0 {
            let uncond: Vec<bool> = (0..ids.len()).map(|_| rng.random::<f64>() < cfg.uncond_prob).collect();
            let t_max = self.schedule.steps();
            plan.diffusion = match cfg.diffusion_loss {
                DiffusionLossMode::Sampled => vec![DiffusionDraw {
                    steps: (0..ids.len()).map(|_| rng.random_range(1..=t_max)).collect(),
                    noise: normals(rng, rows * d),
                    uncond,
                }],
                DiffusionLossMode::FullSum => (1..=t_max)
                    .map(|t| DiffusionDraw {
                        steps: vec![t; ids.len()],
                        noise: normals(rng, rows * d),
                        uncond: uncond.clone(),
                    })
                    .collect(),
            };
        }
        if cfg.gamma > 0.0 {
            let row_seq: Vec<usize> = real.iter().map(|p| p / batch.width).collect();
            let start = if cfg.view_from_noise {
                normals(rng, rows * d)
            } else {
                let table = self.item_embeddings();
                let e0: Vec<f64> = real.iter().flat_map(|&p| table.row(batch.ids[p] as usize).to_vec()).collect();
                forward_sample(&e0, self.schedule.steps(), &normals(rng, rows * d), &self.schedule)?
            };
            let conds: Vec<&[f64]> = guidance.chunks(d).collect();
            plan.views = self
                .denoiser
                .sample_rows(&self.store, &self.schedule, start, &conds, &row_seq, cfg.omega, rng)?;
        }
        plan.guidance = guidance;
        Ok(plan)
    }

    /// Joint loss of a planned batch. `dropout` of `None` runs in eval mode.
    pub fn compute_losses(&self, tape: &mut Tape, p: &Bound, plan: &BatchPlan, mut dropout: Option<&mut Rng>) -> Result<LossTerms> {
        let cfg = &self.config;
        let d = cfg.dim;
        let batch = self.batch(&plan.inputs)?;
        let b = batch.len();
        let rows_all = self.encoder.item_rows(tape, p, &batch)?;
        let h0 = self.encoder.add_positions(tape, p, rows_all, batch.width, dropout.as_deref_mut())?;
        let hidden = self.encoder.encode(tape, p, h0, &batch, dropout.as_deref_mut())?;
        let h1 = self.encoder.last(tape, hidden)?;

        let logits = score_items(tape, h1, p[self.encoder.item_embeddings()])?;
        let cols = target_columns(&plan.targets, self.num_items)?;
        let rec = rec_loss(tape, logits, &cols)?;

        let real = batch.real_positions();
        let row_seq: Vec<usize> = real.iter().map(|p| p / batch.width).collect();
        let mut diff = None;
        if !plan.diffusion.is_empty() {
            let idx: Vec<usize> = real.iter().map(|&p| batch.ids[p] as usize).collect();
            let e0 = tape.gather_rows(p[self.encoder.item_embeddings()], &idx, &[real.len()])?;
            let cond = tape.constant(&[b, d], plan.guidance.clone())?;
            for draw in &plan.diffusion {
                let l = self.denoiser.diffusion_loss(tape, p, &self.schedule, e0, cond, &draw.uncond, &draw.steps, &row_seq, &draw.noise)?;
                diff = Some(match diff {
                    None => l,
                    Some(acc) => tape.add(acc, l)?,
                });
            }
        }

        let mut cl = None;
        let mut empty_anchors = 0;
        if !plan.views.is_empty() {
            let mut full = vec![0.0; b * batch.width * d];
            for (r, &pos) in real.iter().enumerate() {
                full[pos * d..(pos + 1) * d].copy_from_slice(&plan.views[r * d..(r + 1) * d]);
            }
            let view = tape.constant(&[b, batch.width, d], full)?;
            let v0 = self.encoder.add_positions(tape, p, view, batch.width, dropout.as_deref_mut())?;
            let vh = self.encoder.encode(tape, p, v0, &batch, dropout)?;
            let h2 = self.encoder.last(tape, vh)?;
            let out = info_nce(
                tape,
                &ContrastiveBatch {
                    h1,
                    h2,
                    cluster_ids: &plan.clusters,
                    temperature: cfg.temperature,
                    negatives: cfg.negatives,
                },
            )?;
            cl = Some(out.loss);
            empty_anchors = out.empty_anchors;
        }

        let total = joint_loss(tape, rec, cl, diff, cfg.weights())?;
        Ok(LossTerms {
            total,
            rec,
            cl,
            diff,
            empty_anchors,
        })
    }

    /// Samples one view per sequence (`[len, d]` each, oldest first) guided
    /// by the given condition vectors.
    pub fn sample_views(&self, seqs: &[Vec<ItemId>], conds: &[Vec<f64>], omega: f64, rng: &mut Rng) -> Result<Vec<Tensor>> {
        let d = self.config.dim;
        let batch = self.batch(seqs)?;
        let real = batch.real_positions();
        let row_seq: Vec<usize> = real.iter().map(|p| p / batch.width).collect();
        let start = if self.config.view_from_noise {
            normals(rng, real.len() * d)
        } else {
            let table = self.item_embeddings();
            let e0: Vec<f64> = real.iter().flat_map(|&p| table.row(batch.ids[p] as usize).to_vec()).collect();
            forward_sample(&e0, self.schedule.steps(), &normals(rng, real.len() * d), &self.schedule)?
        };
        let cond_refs: Vec<&[f64]> = conds.iter().map(Vec::as_slice).collect();
        let rows = self.denoiser.sample_rows(&self.store, &self.schedule, start, &cond_refs, &row_seq, omega, rng)?;
        let mut out = Vec::with_capacity(seqs.len());
        let mut offset = 0;
        for &len in &batch.lengths {
            out.push(Tensor::new(vec![len, d], rows[offset * d..(offset + len) * d].to_vec())?);
            offset += len;
        }
        Ok(out)
    }
}

impl Scorer for Model {
    fn score(&self, inputs: &[&[ItemId]]) -> Result<Vec<Vec<f64>>> {
        let reps = self.represent(inputs)?;
        let table = self.item_embeddings();
        Ok(reps
            .iter()
            .map(|h| (1..=self.num_items).map(|i| h.iter().zip(table.row(i)).map(|(a, b)| a * b).sum()).collect())
            .collect())
    }
}
