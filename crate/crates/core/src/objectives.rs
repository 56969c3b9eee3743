//! Training objectives: contrastive InfoNCE with same-intent negatives
//! excluded, next-item cross-entropy over tied item embeddings, and their
//! weighted sum.

use serde::{Deserialize, Serialize};

use crate::data::{ItemId, PAD};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Var};

/// Which in-batch views serve as negatives for an anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeViews {
    /// Every other view from both matrices (`2B - 2` candidates).
    #[default]
    Both,
    /// Only the other rows of the partner matrix (`B - 1` candidates).
    Opposite,
}

#[derive(Debug, Clone, Copy)]
pub struct ContrastiveBatch<'a> {
    /// `[B, d]` views, paired with `h2` by row.
    pub h1: Var,
    pub h2: Var,
    pub cluster_ids: &'a [usize],
    pub temperature: f64,
    pub negatives: NegativeViews,
}

#[derive(Debug, Clone, Copy)]
pub struct ContrastiveLoss {
    pub loss: Var,
    /// Anchors whose negative set was empty after exclusion.
    pub empty_anchors: usize,
}

/// One direction, averaged over anchors: `-log(e^{s⁺/τ} / (e^{s⁺/τ} + Σ_η e^{s/τ}))`.
fn directional(tape: &mut Tape, anchors: Var, partners: Var, clusters: &[usize], tau: f64, neg: NegativeViews) -> Result<(Var, usize)> {
    let b = clusters.len();
    let cands = match neg {
        NegativeViews::Both => tape.concat_rows(&[partners, anchors])?,
        NegativeViews::Opposite => partners,
    };
    let width = tape.shape(cands)[0];
    let sims = tape.matmul_nt(anchors, cands)?;
    let logits = tape.scale(sims, 1.0 / tau)?;
    let mut keep = Vec::with_capacity(b * width);
    let mut empty = 0;
    for i in 0..b {
        let mut any = false;
        for j in 0..width {
            let other = j % b;
            let k = if j == i { true } else { other != i && clusters[other] != clusters[i] };
            any |= k && j != i;
            keep.push(k);
        }
        empty += usize::from(!any);
    }
    let lse = tape.logsumexp(logits, Some(&keep))?;
    let diag: Vec<usize> = (0..b).collect();
    let pos = tape.pick_last(logits, &diag)?;
    let per = tape.sub(lse, pos)?;
    Ok((tape.mean(per)?, empty))
}

/// `L_c(h1, h2) + L_c(h2, h1)`. Negatives sharing the anchor's cluster id are
/// excluded; an anchor left with no negatives contributes 0.
pub fn info_nce(tape: &mut Tape, batch: &ContrastiveBatch) -> Result<ContrastiveLoss> {
    let b = batch.cluster_ids.len();
    for v in [batch.h1, batch.h2] {
        if tape.shape(v).len() != 2 || tape.shape(v)[0] != b {
            return Err(Error::invalid("info_nce", format!("views must be [{b}, d], got {:?}", tape.shape(v))));
        }
    }
    if batch.temperature.is_nan() || batch.temperature <= 0.0 {
        return Err(Error::invalid("info_nce", "temperature must be positive"));
    }
    let (a, empty) = directional(tape, batch.h1, batch.h2, batch.cluster_ids, batch.temperature, batch.negatives)?;
    let (c, _) = directional(tape, batch.h2, batch.h1, batch.cluster_ids, batch.temperature, batch.negatives)?;
    Ok(ContrastiveLoss {
        loss: tape.add(a, c)?,
        empty_anchors: empty,
    })
}

/// Raw scores `h·Mᵀ` over real items: column `i` belongs to item `i + 1`.
/// `embeddings` is the full `[|I| + 1, d]` table including the padding row.
pub fn score_items(tape: &mut Tape, h: Var, embeddings: Var) -> Result<Var> {
    let rows = tape.shape(embeddings)[0];
    if rows < 2 {
        return Err(Error::invalid("score_items", "embedding table has no real items"));
    }
    let real: Vec<usize> = (1..rows).collect();
    let items = tape.gather_rows(embeddings, &real, &[rows - 1])?;
    tape.matmul_nt(h, items)
}

/// Score columns of target items; the padding id is not a valid target.
pub fn target_columns(targets: &[ItemId], num_items: usize) -> Result<Vec<usize>> {
    targets
        .iter()
        .map(|&g| {
            if g == PAD || g as usize > num_items {
                Err(Error::invalid("rec_loss", format!("target {g} is not an item in 1..={num_items}")))
            } else {
                Ok(g as usize - 1)
            }
        })
        .collect()
}

/// Mean over rows of `-r[g] + logsumexp(r)`.
pub fn rec_loss(tape: &mut Tape, logits: Var, columns: &[usize]) -> Result<Var> {
    let lse = tape.logsumexp(logits, None)?;
    let picked = tape.pick_last(logits, columns)?;
    let per = tape.sub(lse, picked)?;
    tape.mean(per)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Contrastive weight.
    pub gamma: f64,
    /// Diffusion weight.
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { gamma: 0.2, lambda: 1.0 }
    }
}

/// `L_rec + γ·L_cl + λ·L_diff`; absent components count as zero.
pub fn joint_loss(tape: &mut Tape, rec: Var, cl: Option<Var>, diff: Option<Var>, w: LossWeights) -> Result<Var> {
    let mut total = rec;
    for (part, weight) in [(cl, w.gamma), (diff, w.lambda)] {
        if let Some(v) = part {
            let scaled = tape.scale(v, weight)?;
            total = tape.add(total, scaled)?;
        }
    }
    Ok(total)
}

/// Plain-number form of [`joint_loss`].
pub fn combine_losses(rec: f64, cl: f64, diff: f64, w: LossWeights) -> f64 {
    rec + w.gamma * cl + w.lambda * diff
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn constant(tape: &mut Tape, rows: usize, values: Vec<f64>) -> Var {
        let cols = values.len() / rows;
        tape.constant(&[rows, cols], values).unwrap()
    }

    #[test]
    fn single_negative_matches_hand_value() {
        let mut tape = Tape::new();
        let h1 = constant(&mut tape, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let h2 = constant(&mut tape, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let out = info_nce(
            &mut tape,
            &ContrastiveBatch {
                h1,
                h2,
                cluster_ids: &[0, 1],
                temperature: 1.0,
                negatives: NegativeViews::Opposite,
            },
        )
        .unwrap();
        let e = std::f64::consts::E;
        let single = -(e / (e + 1.0)).ln();
        assert!((single - 0.31326).abs() < 1e-5);
        assert!((tape.item(out.loss) - 2.0 * single).abs() < 1e-12);
        assert_eq!(out.empty_anchors, 0);
    }

    #[test]
    fn shared_cluster_removes_all_negatives() {
        let mut tape = Tape::new();
        let h1 = constant(&mut tape, 3, vec![0.3, -1.0, 2.0, 0.5, 0.0, 1.0]);
        let h2 = constant(&mut tape, 3, vec![1.0, 1.0, -0.2, 0.4, 3.0, 0.0]);
        for neg in [NegativeViews::Both, NegativeViews::Opposite] {
            let out = info_nce(
                &mut tape,
                &ContrastiveBatch {
                    h1,
                    h2,
                    cluster_ids: &[4, 4, 4],
                    temperature: 0.5,
                    negatives: neg,
                },
            )
            .unwrap();
            assert_eq!(tape.item(out.loss), 0.0);
            assert_eq!(out.empty_anchors, 3);
        }
    }

    #[test]
    fn softmax_and_rec_loss_hand_values() {
        let mut tape = Tape::new();
        let r = constant(&mut tape, 1, vec![2.0, 0.0, 0.0]);
        let p = tape.softmax(r, None).unwrap();
        let want = [0.7870, 0.1065, 0.1065];
        for (a, b) in tape.value(p).iter().zip(want) {
            assert!((a - b).abs() < 1e-4);
        }
        let loss = rec_loss(&mut tape, r, &[0]).unwrap();
        assert!((tape.item(loss) - (-2.0 + (2f64.exp() + 2.0).ln())).abs() < 1e-12);
        assert!((tape.item(loss) - 0.23954).abs() < 1e-4);
        let uniform = constant(&mut tape, 1, vec![0.7; 8]);
        let l = rec_loss(&mut tape, uniform, &[5]).unwrap();
        assert!((tape.item(l) - 8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn padding_target_rejected() {
        assert!(target_columns(&[3, PAD], 10).is_err());
        assert!(target_columns(&[11], 10).is_err());
        assert_eq!(target_columns(&[1, 10], 10).unwrap(), vec![0, 9]);
    }

    #[test]
    fn scores_skip_padding_row() {
        let mut tape = Tape::new();
        let m = tape.leaf(&Tensor::new(vec![3, 2], vec![9.0, 9.0, 1.0, 0.0, 0.0, 1.0]).unwrap());
        let h = constant(&mut tape, 1, vec![2.0, 3.0]);
        let s = score_items(&mut tape, h, m).unwrap();
        assert_eq!(tape.value(s), &[2.0, 3.0]);
    }

    #[test]
    fn joint_weights() {
        let w = LossWeights { gamma: 0.2, lambda: 1.0 };
        assert!((combine_losses(1.0, 0.5, 0.2, w) - 1.3).abs() < 1e-12);
        let mut tape = Tape::new();
        let rec = tape.constant(&[], vec![1.0]).unwrap();
        let cl = tape.constant(&[], vec![0.5]).unwrap();
        let diff = tape.constant(&[], vec![0.2]).unwrap();
        let total = joint_loss(&mut tape, rec, Some(cl), Some(diff), w).unwrap();
        assert!((tape.item(total) - 1.3).abs() < 1e-12);
        let off = LossWeights { gamma: 0.0, lambda: 0.0 };
        let plain = joint_loss(&mut tape, rec, Some(cl), Some(diff), off).unwrap();
        assert_eq!(tape.item(plain), 1.0);
    }
}
