//! Item/positional embeddings and the causal self-attention encoder.
//!
//! Sequences are left-padded, so the last real item always sits in the last
//! column and its hidden state is the sequence representation. A batch is
//! laid out with width equal to its longest member rather than the full
//! `max_len`: columns left of every real item are pure padding, are masked out
//! of all attention keys, and therefore cannot change any real row.

use serde::{Deserialize, Serialize};

use crate::data::{ItemId, PAD};
use crate::error::{Error, Result};
use crate::numerics::random::truncated_normal;
use crate::numerics::{Bound, ParamId, ParamStore, Rng, Tape, Tensor, Var};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_items: usize,
    pub max_len: usize,
    pub dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.num_heads == 0 || !self.dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "embedding size {} must be a positive multiple of heads {}",
                self.dim, self.num_heads
            )));
        }
        if self.max_len == 0 || self.num_items == 0 {
            return Err(Error::Config("max_len and num_items must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Linear {
    weight: ParamId,
    bias: ParamId,
}

impl Linear {
    pub(crate) fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), init_matrix(fan_in, fan_out, rng)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out])),
        }
    }

    pub(crate) fn apply(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p[self.weight])?;
        tape.add_broadcast(y, p[self.bias])
    }
}

#[derive(Debug, Clone)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::from_vec(vec![1.0; dim])),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim])),
        }
    }

    fn apply(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let n = tape.layer_norm(x)?;
        let g = tape.mul_broadcast(n, p[self.gain])?;
        tape.add_broadcast(g, p[self.bias])
    }
}

#[derive(Debug, Clone)]
struct Block {
    query: Linear,
    key: Linear,
    value: Linear,
    output: Linear,
    attn_norm: Norm,
    ffn_in: Linear,
    ffn_out: Linear,
    ffn_norm: Norm,
}

pub(crate) fn init_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    let values = (0..rows * cols).map(|_| truncated_normal(rng, INIT_STD)).collect();
    Tensor::new(vec![rows, cols], values).unwrap()
}

/// A batch of left-padded id sequences of common `width`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqBatch {
    pub ids: Vec<ItemId>,
    pub width: usize,
    pub lengths: Vec<usize>,
}

impl SeqBatch {
    /// Keeps the most recent `max_len` items of each sequence and left-pads
    /// to the longest retained length.
    pub fn new<S: AsRef<[ItemId]>>(seqs: &[S], max_len: usize) -> Result<Self> {
        let lengths: Vec<usize> = seqs.iter().map(|s| s.as_ref().len().min(max_len)).collect();
        Self::with_width(seqs, max_len, lengths.iter().copied().max().unwrap_or(1).max(1))
    }

    /// Same as [`SeqBatch::new`] with an explicit width (`max_len` gives the
    /// classic fully padded layout).
    pub fn with_width<S: AsRef<[ItemId]>>(seqs: &[S], max_len: usize, width: usize) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::invalid("seq_batch", "empty batch"));
        }
        if width == 0 || width > max_len {
            return Err(Error::invalid("seq_batch", format!("width {width} outside 1..={max_len}")));
        }
        let mut ids = Vec::with_capacity(seqs.len() * width);
        let mut lengths = Vec::with_capacity(seqs.len());
        for s in seqs {
            let s = s.as_ref();
            if s.is_empty() {
                return Err(Error::invalid("seq_batch", "empty sequence"));
            }
            let keep = s.len().min(width);
            ids.extend(std::iter::repeat_n(PAD, width - keep));
            ids.extend_from_slice(&s[s.len() - keep..]);
            lengths.push(keep);
        }
        Ok(Self { ids, width, lengths })
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    /// Whether column `j` of row `b` holds a real item.
    pub fn is_real(&self, b: usize, j: usize) -> bool {
        j >= self.width - self.lengths[b]
    }

    /// Flat indices (into `B * width` rows) of every real position, row-major.
    pub fn real_positions(&self) -> Vec<usize> {
        (0..self.len())
            .flat_map(|b| (self.width - self.lengths[b]..self.width).map(move |j| b * self.width + j))
            .collect()
    }
}

/// Per-sequence output of [`Encoder::encode_sequence`].
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceRepr {
    /// `max_len x dim` hidden states of the last layer.
    pub hidden: Tensor,
    /// Hidden state at the final (most recent) position.
    pub last: Vec<f64>,
    pub true_length: usize,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    item_embeddings: ParamId,
    positions: ParamId,
    blocks: Vec<Block>,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, config: EncoderConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let item_embeddings = store.add("encoder.item_embeddings", init_matrix(config.num_items + 1, d, rng));
        let positions = store.add("encoder.positions", init_matrix(config.max_len, d, rng));
        let blocks = (0..config.num_layers)
            .map(|l| {
                let name = |part: &str| format!("encoder.layer{l}.{part}");
                Block {
                    query: Linear::new(store, &name("attn.query"), d, d, rng),
                    key: Linear::new(store, &name("attn.key"), d, d, rng),
                    value: Linear::new(store, &name("attn.value"), d, d, rng),
                    output: Linear::new(store, &name("attn.output"), d, d, rng),
                    attn_norm: Norm::new(store, &name("attn_norm"), d),
                    ffn_in: Linear::new(store, &name("ffn.in"), d, 4 * d, rng),
                    ffn_out: Linear::new(store, &name("ffn.out"), 4 * d, d, rng),
                    ffn_norm: Norm::new(store, &name("ffn_norm"), d),
                }
            })
            .collect();
        Ok(Self {
            config,
            item_embeddings,
            positions,
            blocks,
        })
    }

    /// The item embedding matrix `M`, row 0 being the padding row. Shared with
    /// the prediction layer and the diffusion space.
    pub fn item_embeddings(&self) -> ParamId {
        self.item_embeddings
    }

    pub fn positions(&self) -> ParamId {
        self.positions
    }

    fn check_ids(&self, ids: &[ItemId]) -> Result<()> {
        match ids.iter().find(|&&i| i as usize > self.config.num_items) {
            Some(bad) => Err(Error::invalid(
                "embed",
                format!("item id {bad} out of range 0..={}", self.config.num_items),
            )),
            None => Ok(()),
        }
    }

    /// Item rows `M[ids]` of a batch, shape `[B, width, d]`.
    pub fn item_rows(&self, tape: &mut Tape, p: &Bound, batch: &SeqBatch) -> Result<Var> {
        self.check_ids(&batch.ids)?;
        let idx: Vec<usize> = batch.ids.iter().map(|&i| i as usize).collect();
        tape.gather_rows(p[self.item_embeddings], &idx, &[batch.len(), batch.width])
    }

    /// Adds positional rows to `[B, width, d]` item rows and applies dropout.
    pub fn add_positions(&self, tape: &mut Tape, p: &Bound, rows: Var, width: usize, rng: Option<&mut Rng>) -> Result<Var> {
        let n = self.config.max_len;
        if width > n {
            return Err(Error::invalid("embed", format!("width {width} exceeds max_len {n}")));
        }
        let pos_idx: Vec<usize> = (n - width..n).collect();
        let pos = tape.gather_rows(p[self.positions], &pos_idx, &[width])?;
        let h0 = tape.add_broadcast(rows, pos)?;
        tape.dropout(h0, self.config.dropout, rng)
    }

    /// `h0 = M[ids] + p` (with dropout in train mode), shape `[B, width, d]`.
    pub fn embed(&self, tape: &mut Tape, p: &Bound, batch: &SeqBatch, rng: Option<&mut Rng>) -> Result<Var> {
        let rows = self.item_rows(tape, p, batch)?;
        self.add_positions(tape, p, rows, batch.width, rng)
    }

    /// Runs the layer stack over `h0` (`[B, width, d]`) and returns hidden
    /// states of the same shape.
    pub fn encode(&self, tape: &mut Tape, p: &Bound, h0: Var, batch: &SeqBatch, mut rng: Option<&mut Rng>) -> Result<Var> {
        let expected = [batch.len(), batch.width, self.config.dim];
        if tape.shape(h0) != expected {
            return Err(Error::Shape {
                op: "encode",
                lhs: tape.shape(h0).to_vec(),
                rhs: expected.to_vec(),
            });
        }
        let keep = self.attention_mask(batch);
        let rate = self.config.dropout;
        let mut x = h0;
        for block in &self.blocks {
            let attn = self.attention(tape, p, block, x, &keep, rng.as_deref_mut())?;
            let attn = tape.dropout(attn, rate, rng.as_deref_mut())?;
            let res = tape.add(x, attn)?;
            let x1 = block.attn_norm.apply(tape, p, res)?;

            let f = block.ffn_in.apply(tape, p, x1)?;
            let f = tape.gelu(f)?;
            let f = block.ffn_out.apply(tape, p, f)?;
            let f = tape.dropout(f, rate, rng.as_deref_mut())?;
            let res = tape.add(x1, f)?;
            x = block.ffn_norm.apply(tape, p, res)?;
        }
        Ok(x)
    }

    /// `keep[b, i, j]`: query `i` may attend key `j` iff `j <= i` and `j` is real.
    fn attention_mask(&self, batch: &SeqBatch) -> Vec<bool> {
        let w = batch.width;
        let mut keep = Vec::with_capacity(batch.len() * w * w);
        for b in 0..batch.len() {
            for i in 0..w {
                keep.extend((0..w).map(|j| j <= i && batch.is_real(b, j)));
            }
        }
        keep
    }

    fn attention(&self, tape: &mut Tape, p: &Bound, block: &Block, x: Var, keep: &[bool], mut rng: Option<&mut Rng>) -> Result<Var> {
        let heads = self.config.num_heads;
        let dh = self.config.dim / heads;
        let q = block.query.apply(tape, p, x)?;
        let k = block.key.apply(tape, p, x)?;
        let v = block.value.apply(tape, p, x)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_last(q, h * dh, dh)?;
            let kh = tape.slice_last(k, h * dh, dh)?;
            let vh = tape.slice_last(v, h * dh, dh)?;
            let scores = tape.batch_matmul(qh, kh, true)?;
            let scores = tape.scale(scores, scale)?;
            let probs = tape.softmax(scores, Some(keep))?;
            let probs = tape.dropout(probs, self.config.dropout, rng.as_deref_mut())?;
            outs.push(tape.batch_matmul(probs, vh, false)?);
        }
        let merged = if heads == 1 { outs[0] } else { tape.concat_last(&outs)? };
        block.output.apply(tape, p, merged)
    }

    /// Hidden state of the last column of each row: `[B, d]`.
    pub fn last(&self, tape: &mut Tape, hidden: Var) -> Result<Var> {
        let shape = tape.shape(hidden).to_vec();
        if shape.len() != 3 {
            return Err(Error::invalid("last", format!("expected [B, w, d], got {shape:?}")));
        }
        let (b, w) = (shape[0], shape[1]);
        let idx: Vec<usize> = (0..b).map(|i| i * w + w - 1).collect();
        tape.gather_rows(hidden, &idx, &[b])
    }

    /// Embed + encode + last row, the common path for id batches.
    pub fn forward_last(&self, tape: &mut Tape, p: &Bound, batch: &SeqBatch, mut rng: Option<&mut Rng>) -> Result<Var> {
        let h0 = self.embed(tape, p, batch, rng.as_deref_mut())?;
        let hidden = self.encode(tape, p, h0, batch, rng)?;
        self.last(tape, hidden)
    }

    /// Eval-mode sequence representations, computed in chunks of `chunk`.
    pub fn represent<S: AsRef<[ItemId]>>(&self, store: &ParamStore, seqs: &[S], chunk: usize) -> Result<Vec<Vec<f64>>> {
        let d = self.config.dim;
        let mut out = Vec::with_capacity(seqs.len());
        for part in seqs.chunks(chunk.max(1)) {
            let batch = SeqBatch::new(part, self.config.max_len)?;
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, false);
            let last = self.forward_last(&mut tape, &p, &batch, None)?;
            out.extend(tape.value(last).chunks(d).map(<[f64]>::to_vec));
        }
        Ok(out)
    }

    /// Eval-mode encoding of one sequence over the full `max_len` window.
    pub fn encode_sequence(&self, store: &ParamStore, seq: &[ItemId]) -> Result<SequenceRepr> {
        let n = self.config.max_len;
        let batch = SeqBatch::with_width(&[seq], n, n)?;
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let h0 = self.embed(&mut tape, &p, &batch, None)?;
        let hidden = self.encode(&mut tape, &p, h0, &batch, None)?;
        let hidden = tape.to_tensor(hidden);
        let hidden = Tensor::new(vec![n, self.config.dim], hidden.into_values())?;
        Ok(SequenceRepr {
            last: hidden.row(n - 1).to_vec(),
            hidden,
            true_length: batch.lengths[0],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::random::seeded;

    fn setup(layers: usize, d: usize, n: usize) -> (ParamStore, Encoder) {
        let mut store = ParamStore::new();
        let mut rng = seeded(42);
        let cfg = EncoderConfig {
            num_items: 30,
            max_len: n,
            dim: d,
            num_layers: layers,
            num_heads: 2,
            dropout: 0.2,
        };
        let enc = Encoder::new(&mut store, cfg, &mut rng).unwrap();
        (store, enc)
    }

    #[test]
    fn embed_shapes_and_padding_rows() {
        let (store, enc) = setup(2, 64, 50);
        let seq: Vec<ItemId> = (1..=30).chain(1..=20).collect();
        let batch = SeqBatch::with_width(&[seq], 50, 50).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let h0 = enc.embed(&mut tape, &p, &batch, None).unwrap();
        assert_eq!(tape.shape(h0), &[1, 50, 64]);

        let pad = SeqBatch { ids: vec![PAD; 4], width: 4, lengths: vec![0] };
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let h0 = enc.embed(&mut tape, &p, &pad, None).unwrap();
        let m = store.get(enc.item_embeddings());
        let pos = store.get(enc.positions());
        for i in 0..4 {
            let row = &tape.value(h0)[i * 64..(i + 1) * 64];
            let expected: Vec<f64> = m.row(0).iter().zip(pos.row(46 + i)).map(|(a, b)| a + b).collect();
            assert_eq!(row, &expected[..]);
        }
    }

    #[test]
    fn out_of_range_ids_are_rejected() {
        let (store, enc) = setup(1, 8, 6);
        let batch = SeqBatch::new(&[vec![1, 31]], 6).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        assert!(enc.embed(&mut tape, &p, &batch, None).is_err());
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let (store, enc) = setup(2, 16, 10);
        let a = enc.encode_sequence(&store, &[3, 4, 5]).unwrap();
        let b = enc.encode_sequence(&store, &[3, 4, 5]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.true_length, 3);
        assert_eq!(a.last, a.hidden.row(9));
    }

    #[test]
    fn zero_layers_is_identity() {
        let (store, enc) = setup(0, 8, 6);
        let batch = SeqBatch::new(&[vec![1, 2, 3]], 6).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let h0 = enc.embed(&mut tape, &p, &batch, None).unwrap();
        let h = enc.encode(&mut tape, &p, h0, &batch, None).unwrap();
        assert_eq!(tape.value(h), tape.value(h0));
    }

    #[test]
    fn heads_must_divide_dim() {
        let mut store = ParamStore::new();
        let cfg = EncoderConfig { num_items: 5, max_len: 4, dim: 6, num_layers: 1, num_heads: 4, dropout: 0.1 };
        assert!(Encoder::new(&mut store, cfg, &mut seeded(0)).is_err());
    }
}
