use indirec_core::encoder::{Encoder, EncoderConfig, SeqBatch};
use indirec_core::numerics::random::{normals, seeded};
use indirec_core::numerics::{ParamStore, Tape, Tensor};

fn setup(dropout: f64) -> (ParamStore, Encoder) {
    let mut store = ParamStore::new();
    let cfg = EncoderConfig {
        num_items: 40,
        max_len: 12,
        dim: 16,
        num_layers: 2,
        num_heads: 2,
        dropout,
    };
    let enc = Encoder::new(&mut store, cfg, &mut seeded(3)).unwrap();
    (store, enc)
}

fn hidden_for(store: &ParamStore, enc: &Encoder, batch: &SeqBatch, h0: &Tensor) -> Vec<f64> {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let x = tape.leaf(h0);
    let h = enc.encode(&mut tape, &p, x, batch, None).unwrap();
    tape.value(h).to_vec()
}

#[test]
fn later_positions_do_not_affect_earlier_outputs() {
    let (store, enc) = setup(0.0);
    let seq: Vec<u32> = (1..=12).collect();
    let batch = SeqBatch::new(&[seq], 12).unwrap();
    let d = 16;
    let base = Tensor::new(vec![1, 12, d], normals(&mut seeded(8), 12 * d)).unwrap();
    let out = hidden_for(&store, &enc, &batch, &base);
    for j in [3usize, 7, 11] {
        let mut moved = base.clone();
        for v in &mut moved.values_mut()[j * d..(j + 1) * d] {
            *v += 5.0;
        }
        let out2 = hidden_for(&store, &enc, &batch, &moved);
        let before = out[..j * d].iter().zip(&out2[..j * d]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(before < 1e-12, "position {j} leaked backwards: {before}");
        let at = out[j * d..].iter().zip(&out2[j * d..]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(at > 1e-6, "position {j} had no effect on itself");
    }
}

#[test]
fn order_matters() {
    let (store, enc) = setup(0.0);
    let a: Vec<u32> = vec![1, 2, 3, 4, 5, 6];
    let b: Vec<u32> = vec![6, 5, 4, 3, 2, 1];
    let r = enc.represent(&store, &[a.clone(), b], 8).unwrap();
    let diff: f64 = r[0].iter().zip(&r[1]).map(|(x, y)| (x - y).abs()).sum();
    assert!(diff > 1e-4, "reordering left the representation unchanged");
}

#[test]
fn trimmed_width_matches_full_width() {
    let (store, enc) = setup(0.0);
    let seqs: Vec<Vec<u32>> = vec![vec![3, 9, 27], vec![1, 2, 3, 4, 5, 6, 7], vec![40; 2]];
    let trimmed = enc.represent(&store, &seqs, 8).unwrap();
    for (s, t) in seqs.iter().zip(&trimmed) {
        let full = enc.encode_sequence(&store, s).unwrap();
        let diff = full.last.iter().zip(t).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-10, "trimmed and full width disagree by {diff}");
        assert_eq!(full.true_length, s.len());
    }
}

#[test]
fn gradient_reaches_every_parameter() {
    let (mut store, enc) = setup(0.1);
    let seqs: Vec<Vec<u32>> = (0..8).map(|b| (1..=10).map(|i| (b * 5 + i) % 40 + 1).collect()).collect();
    let batch = SeqBatch::new(&seqs, 12).unwrap();
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, true);
    let mut rng = seeded(11);
    let last = enc.forward_last(&mut tape, &p, &batch, Some(&mut rng)).unwrap();
    let w = Tensor::new(vec![8, 16], normals(&mut seeded(12), 8 * 16)).unwrap();
    let wv = tape.leaf(&w);
    let prod = tape.mul(last, wv).unwrap();
    let loss = tape.sum(prod).unwrap();
    let grads = tape.backward(loss).unwrap();
    store.accumulate_grads(&p, &grads).unwrap();
    for (name, t) in store.iter() {
        let g = t.grad.as_ref().unwrap();
        let nonzero = g.iter().filter(|v| **v != 0.0).count() as f64 / g.len() as f64;
        if name == "encoder.item_embeddings" {
            // only rows of items present in the batch
            assert!(nonzero > 0.5, "{name}: {nonzero}");
        } else if name == "encoder.positions" {
            // width 10 of max_len 12
            assert!(nonzero > 0.8, "{name}: {nonzero}");
        } else if name.ends_with("attn.key.bias") {
            // softmax is invariant to the per-row shift this bias adds
            continue;
        } else {
            assert!(nonzero > 0.99, "{name}: nonzero fraction {nonzero}");
        }
    }
}
