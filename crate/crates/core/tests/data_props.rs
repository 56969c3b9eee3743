use indirec_core::data::{inject_noise, leave_one_out, pad_truncate, prefix_segment, InteractionDataset, ItemId, PAD};
use indirec_core::numerics::random::seeded;
use proptest::prelude::*;

/// Literal recursive reading of the segmentation definition.
fn segment_oracle(s: &[u32], m: usize, n: usize) -> Vec<Vec<u32>> {
    if s.len() < m {
        return vec![s.to_vec()];
    }
    if s.len() <= n {
        return (m..=s.len()).map(|l| s[..l].to_vec()).collect();
    }
    let mut out = segment_oracle(&s[..n], m, n);
    // windows [v_2..v_{n+1}], ..., [v_{|S|-(n-1)}..v_{|S|}] in 1-indexed terms
    for start in 2..=(s.len() - n + 1) {
        out.push(s[start - 1..start - 1 + n].to_vec());
    }
    out
}

#[test]
fn segmentation_matches_oracle_exhaustively() {
    for len in 2..=120u32 {
        let s: Vec<u32> = (1..=len).collect();
        for m in [2, 4] {
            for n in [3, 10, 50] {
                if n < m {
                    continue;
                }
                let got = prefix_segment(&s, m, n).unwrap();
                assert_eq!(got, segment_oracle(&s, m, n), "len={len} m={m} n={n}");
            }
        }
    }
}

proptest! {
    #[test]
    fn segmentation_count_and_contiguity(len in 2usize..120, m in 2usize..6, extra in 0usize..20) {
        let n = m + extra;
        let s: Vec<u32> = (0..len as u32).map(|i| i * 7 + 1).collect();
        let segs = prefix_segment(&s, m, n).unwrap();
        let expected = if len < m { 1 } else if len <= n { len - m + 1 } else { (n - m + 1) + (len - n) };
        prop_assert_eq!(segs.len(), expected);
        for seg in &segs {
            let start = s.iter().position(|v| *v == seg[0]).unwrap();
            prop_assert_eq!(&s[start..start + seg.len()], &seg[..]);
            if len >= m {
                prop_assert!(seg.len() >= m && seg.len() <= n);
            }
        }
    }

    #[test]
    fn padding_then_stripping_is_identity(seq in proptest::collection::vec(1u32..500, 0..40), n in 1usize..60) {
        let (padded, len) = pad_truncate(&seq, n);
        prop_assert_eq!(padded.len(), n);
        if seq.len() <= n {
            let stripped: Vec<ItemId> = padded.iter().copied().skip_while(|&v| v == PAD).collect();
            prop_assert_eq!(stripped, seq.clone());
            prop_assert_eq!(len, seq.len());
        } else {
            prop_assert_eq!(&padded[..], &seq[seq.len() - n..]);
        }
    }

    #[test]
    fn leave_one_out_reconstructs_sequences(seqs in proptest::collection::vec(proptest::collection::vec(1u32..30, 3..15), 1..10)) {
        let ds = InteractionDataset::from_sequences(30, seqs.clone()).unwrap();
        let split = leave_one_out(&ds);
        for (u, seq) in seqs.iter().enumerate() {
            let mut rebuilt = split.train[u].clone();
            rebuilt.push(split.valid[u].target);
            rebuilt.push(split.test[u].target);
            prop_assert_eq!(&rebuilt, seq);
        }
    }

    #[test]
    fn noise_removal_recovers_original(seq in proptest::collection::vec(1u32..200, 1..40), ratio in 0.0f64..=1.0, seed in 0u64..1000) {
        let mut rng = seeded(seed);
        let noisy = inject_noise(&seq, ratio, 200, &mut rng).unwrap();
        let count = (ratio * seq.len() as f64).floor() as usize;
        prop_assert_eq!(noisy.items.len(), seq.len() + count);
        let kept: Vec<u32> = noisy.items.iter().enumerate()
            .filter(|(i, _)| noisy.inserted_at.binary_search(i).is_err())
            .map(|(_, &v)| v)
            .collect();
        prop_assert_eq!(kept, seq);
    }
}
