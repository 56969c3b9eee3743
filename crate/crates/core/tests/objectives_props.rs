use indirec_core::numerics::gradcheck::check_inputs;
use indirec_core::numerics::random::{normals, seeded};
use indirec_core::numerics::{Tape, Tensor};
use indirec_core::objectives::{info_nce, joint_loss, rec_loss, ContrastiveBatch, LossWeights, NegativeViews};
use proptest::prelude::*;

/// Softmax cross-entropy written the long way, in a shifted form so that
/// large logits do not overflow.
fn naive_ce(r: &[f64], g: usize) -> f64 {
    let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = r.iter().map(|v| (v - max).exp()).sum();
    let p = (r[g] - max).exp() / z;
    -p.ln()
}

/// Direct reading of the two-direction contrastive loss with per-anchor
/// negative sets built by enumeration.
fn naive_info_nce(h1: &[Vec<f64>], h2: &[Vec<f64>], clusters: &[usize], tau: f64, both: bool) -> f64 {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let dir = |a: &[Vec<f64>], p: &[Vec<f64>]| {
        let b = a.len();
        let mut total = 0.0;
        for i in 0..b {
            let pos = (dot(&a[i], &p[i]) / tau).exp();
            let mut neg = 0.0;
            for j in 0..b {
                if j == i || clusters[j] == clusters[i] {
                    continue;
                }
                neg += (dot(&a[i], &p[j]) / tau).exp();
                if both {
                    neg += (dot(&a[i], &a[j]) / tau).exp();
                }
            }
            total += -(pos / (pos + neg)).ln();
        }
        total / b as f64
    };
    dir(h1, h2) + dir(h2, h1)
}

fn rows(v: &[f64], d: usize) -> Vec<Vec<f64>> {
    v.chunks(d).map(<[f64]>::to_vec).collect()
}

#[test]
fn rec_loss_matches_naive_oracle_on_large_vocabularies() {
    let mut rng = seeded(1);
    for (n, scale) in [(3usize, 1.0), (100, 5.0), (10_000, 30.0)] {
        let r: Vec<f64> = normals(&mut rng, n).iter().map(|v| v * scale).collect();
        for g in [0, n / 2, n - 1] {
            let mut tape = Tape::new();
            let x = tape.constant(&[1, n], r.clone()).unwrap();
            let l = rec_loss(&mut tape, x, &[g]).unwrap();
            assert!((tape.item(l) - naive_ce(&r, g)).abs() < 1e-10, "n={n} g={g}");
        }
    }
}

proptest! {
    #[test]
    fn info_nce_matches_enumeration_oracle(
        seed in 0u64..10_000,
        b in 2usize..7,
        clusters in proptest::collection::vec(0usize..3, 7),
        tau in 0.2f64..2.0,
        both in any::<bool>(),
    ) {
        let d = 4;
        let mut rng = seeded(seed);
        let v1 = normals(&mut rng, b * d);
        let v2 = normals(&mut rng, b * d);
        let mut tape = Tape::new();
        let h1 = tape.constant(&[b, d], v1.clone()).unwrap();
        let h2 = tape.constant(&[b, d], v2.clone()).unwrap();
        let neg = if both { NegativeViews::Both } else { NegativeViews::Opposite };
        let out = info_nce(&mut tape, &ContrastiveBatch { h1, h2, cluster_ids: &clusters[..b], temperature: tau, negatives: neg }).unwrap();
        let oracle = naive_info_nce(&rows(&v1, d), &rows(&v2, d), &clusters[..b], tau, both);
        prop_assert!((tape.item(out.loss) - oracle).abs() < 1e-10);
        prop_assert!(tape.item(out.loss) >= 0.0);
    }
}

#[test]
fn info_nce_drops_when_a_positive_pair_gets_closer() {
    let d = 3;
    let v1 = normals(&mut seeded(5), 4 * d);
    let mut v2 = normals(&mut seeded(6), 4 * d);
    let clusters = [0, 1, 2, 3];
    let eval = |v2: &[f64]| {
        let mut tape = Tape::new();
        let h1 = tape.constant(&[4, d], v1.clone()).unwrap();
        let h2 = tape.constant(&[4, d], v2.to_vec()).unwrap();
        let out = info_nce(&mut tape, &ContrastiveBatch { h1, h2, cluster_ids: &clusters, temperature: 1.0, negatives: NegativeViews::Both }).unwrap();
        tape.item(out.loss)
    };
    let before = eval(&v2);
    // move h2[0] toward h1[0]
    for j in 0..d {
        v2[j] += 0.5 * (v1[j] - v2[j]) + 0.3 * v1[j];
    }
    assert!(eval(&v2) < before);
}

#[test]
fn contrastive_and_rec_gradients_match_finite_differences() {
    let d = 5;
    let h1 = Tensor::new(vec![4, d], normals(&mut seeded(7), 4 * d)).unwrap();
    let h2 = Tensor::new(vec![4, d], normals(&mut seeded(8), 4 * d)).unwrap();
    let clusters = [0, 1, 0, 2];
    for neg in [NegativeViews::Both, NegativeViews::Opposite] {
        let errs = check_inputs(&[h1.clone(), h2.clone()], 1e-5, |t, v| {
            let out = info_nce(t, &ContrastiveBatch { h1: v[0], h2: v[1], cluster_ids: &clusters, temperature: 0.7, negatives: neg })?;
            Ok(out.loss)
        })
        .unwrap();
        assert!(errs.iter().all(|e| *e < 1e-3), "{neg:?}: {errs:?}");
    }
    let logits = Tensor::new(vec![3, 6], normals(&mut seeded(9), 18)).unwrap();
    let errs = check_inputs(&[logits], 1e-5, |t, v| rec_loss(t, v[0], &[0, 5, 2])).unwrap();
    assert!(errs[0] < 1e-3);
}

#[test]
fn joint_gradient_is_weighted_sum_of_component_gradients() {
    let x = Tensor::new(vec![2, 3], normals(&mut seeded(10), 6)).unwrap().with_grad();
    let w = LossWeights { gamma: 0.3, lambda: 1.7 };
    let run = |which: Option<usize>| {
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let rec = rec_loss(&mut tape, v, &[1, 2]).unwrap();
        let sq = tape.mul(v, v).unwrap();
        let cl = tape.mean(sq).unwrap();
        let g = tape.gelu(v).unwrap();
        let diff = tape.sum(g).unwrap();
        let loss = match which {
            None => joint_loss(&mut tape, rec, Some(cl), Some(diff), w).unwrap(),
            Some(0) => rec,
            Some(1) => cl,
            _ => diff,
        };
        tape.backward(loss).unwrap().wrt(v)
    };
    let total = run(None);
    let (r, c, f) = (run(Some(0)), run(Some(1)), run(Some(2)));
    for i in 0..6 {
        assert!((total[i] - (r[i] + w.gamma * c[i] + w.lambda * f[i])).abs() < 1e-12);
    }
}
