//! Interaction ingestion, leave-one-out splits, prefix segmentation,
//! padding, and test-time noise injection.
//!
//! Item ids are internal and contiguous in `1..=num_items`; id `0` is the
//! padding id.

use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;

pub type ItemId = u32;
pub const PAD: ItemId = 0;

/// Users with fewer interactions are dropped at load time.
pub const MIN_INTERACTIONS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionDataset {
    pub num_items: usize,
    /// Chronological item ids per user, all in `1..=num_items`.
    pub sequences: Vec<Vec<ItemId>>,
    pub user_ids: Vec<String>,
    /// External item token for each internal id; index 0 is the padding slot.
    pub item_tokens: Vec<u64>,
}

impl InteractionDataset {
    /// Builds a dataset from already-internal ids, checking the id range.
    pub fn from_sequences(num_items: usize, sequences: Vec<Vec<ItemId>>) -> Result<Self> {
        for (u, seq) in sequences.iter().enumerate() {
            if let Some(&bad) = seq.iter().find(|&&i| i == PAD || i as usize > num_items) {
                return Err(Error::invalid(
                    "dataset",
                    format!("user {u}: item id {bad} outside 1..={num_items}"),
                ));
            }
        }
        let user_ids = (0..sequences.len()).map(|u| u.to_string()).collect();
        let item_tokens = (0..=num_items as u64).collect();
        Ok(Self {
            num_items,
            sequences,
            user_ids,
            item_tokens,
        })
    }

    pub fn num_users(&self) -> usize {
        self.sequences.len()
    }

    pub fn num_interactions(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    /// Serializes in the same `user item item ...` text format, external ids.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (user, seq) in self.user_ids.iter().zip(&self.sequences) {
            out.push_str(user);
            for &i in seq {
                let _ = write!(out, " {}", self.item_tokens[i as usize]);
            }
            out.push('\n');
        }
        out
    }
}

/// Reads `user item item ...` lines, drops users with fewer than
/// [`MIN_INTERACTIONS`] items, and maps item tokens (sorted ascending) to
/// contiguous ids starting at 1.
pub fn load_interactions(path: &Path) -> Result<InteractionDataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_interactions(&text, path)
}

pub fn parse_interactions(text: &str, origin: &Path) -> Result<InteractionDataset> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        msg,
    };
    let mut raw: Vec<(String, Vec<u64>)> = Vec::new();
    let mut seen_users = HashSet::new();
    for (lineno, line) in text.lines().enumerate() {
        let mut tokens = line.split_whitespace();
        let Some(user) = tokens.next() else { continue };
        if !seen_users.insert(user.to_owned()) {
            return Err(parse_err(lineno + 1, format!("duplicate user {user}")));
        }
        let items = tokens
            .map(|tok| {
                tok.parse::<u64>()
                    .map_err(|_| parse_err(lineno + 1, format!("non-integer item token {tok:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        raw.push((user.to_owned(), items));
    }

    raw.retain(|(_, items)| items.len() >= MIN_INTERACTIONS);
    let vocab: BTreeSet<u64> = raw.iter().flat_map(|(_, items)| items.iter().copied()).collect();
    if vocab.is_empty() {
        return Err(parse_err(0, "empty item vocabulary after filtering".into()));
    }
    let item_tokens: Vec<u64> = std::iter::once(0).chain(vocab.iter().copied()).collect();
    let lookup = |tok: u64| -> ItemId { item_tokens[1..].binary_search(&tok).unwrap() as ItemId + 1 };

    let (user_ids, sequences) = raw
        .into_iter()
        .map(|(u, items)| (u, items.into_iter().map(lookup).collect()))
        .unzip();
    Ok(InteractionDataset {
        num_items: vocab.len(),
        sequences,
        user_ids,
        item_tokens,
    })
}

/// One evaluation case: a user's input prefix and the held-out target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCase {
    pub user: usize,
    pub input: Vec<ItemId>,
    pub target: ItemId,
    /// Length of the user's full original sequence (for length buckets).
    pub full_length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitDataset {
    pub num_items: usize,
    /// Per-user training sequence (all but the last two items).
    pub train: Vec<Vec<ItemId>>,
    pub valid: Vec<EvalCase>,
    pub test: Vec<EvalCase>,
    /// Users skipped because their sequence had fewer than three items.
    pub skipped: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Valid,
    Test,
}

impl SplitDataset {
    pub fn cases(&self, split: Split) -> &[EvalCase] {
        match split {
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid("split", format!("unknown split {other:?}"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

/// Last item is the test target, second-to-last the validation target.
pub fn leave_one_out(ds: &InteractionDataset) -> SplitDataset {
    let mut split = SplitDataset {
        num_items: ds.num_items,
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
        skipped: 0,
    };
    for (user, seq) in ds.sequences.iter().enumerate() {
        let len = seq.len();
        if len < 3 {
            split.skipped += 1;
            continue;
        }
        split.train.push(seq[..len - 2].to_vec());
        split.valid.push(EvalCase {
            user,
            input: seq[..len - 2].to_vec(),
            target: seq[len - 2],
            full_length: len,
        });
        split.test.push(EvalCase {
            user,
            input: seq[..len - 1].to_vec(),
            target: seq[len - 1],
            full_length: len,
        });
    }
    if split.skipped > 0 {
        log::warn!("leave_one_out: skipped {} users shorter than 3", split.skipped);
    }
    split
}

/// Dynamic incremental prefix segmentation.
///
/// For `|S| <= n`: the prefixes of length `m..=|S|`. For `|S| > n`: the
/// segmentation of `S[..n]` followed by every length-`n` window starting at
/// offsets `1..=|S|-n`. A sequence shorter than `m` is returned whole.
pub fn prefix_segment<T: Clone>(seq: &[T], m: usize, n: usize) -> Result<Vec<Vec<T>>> {
    if m < 2 || n < m {
        return Err(Error::invalid(
            "prefix_segment",
            format!("need 2 <= m <= n, got m={m}, n={n}"),
        ));
    }
    if seq.len() < m {
        return Ok(vec![seq.to_vec()]);
    }
    let head = seq.len().min(n);
    let mut out: Vec<Vec<T>> = (m..=head).map(|len| seq[..len].to_vec()).collect();
    if seq.len() > n {
        out.extend(seq.windows(n).skip(1).map(<[T]>::to_vec));
    }
    Ok(out)
}

/// Keeps the most recent `n` items and left-pads with [`PAD`]. Returns the
/// padded array and the unpadded length.
pub fn pad_truncate(seq: &[ItemId], n: usize) -> (Vec<ItemId>, usize) {
    let keep = seq.len().min(n);
    let mut out = vec![PAD; n - keep];
    out.extend_from_slice(&seq[seq.len() - keep..]);
    (out, keep)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NoisySequence {
    pub items: Vec<ItemId>,
    /// Positions in `items` that hold inserted noise, ascending.
    pub inserted_at: Vec<usize>,
    /// Set when fewer unseen items existed than insertions were needed, so
    /// some noise items were drawn uniformly from the whole vocabulary.
    pub vocab_exhausted: bool,
}

/// Inserts `floor(ratio * |seq|)` items absent from `seq` at uniformly random
/// positions, preserving the original order of the remaining items.
pub fn inject_noise(seq: &[ItemId], ratio: f64, num_items: usize, rng: &mut Rng) -> Result<NoisySequence> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::invalid("inject_noise", format!("ratio {ratio} outside [0, 1]")));
    }
    let count = (ratio * seq.len() as f64).floor() as usize;
    if count == 0 {
        return Ok(NoisySequence {
            items: seq.to_vec(),
            inserted_at: Vec::new(),
            vocab_exhausted: false,
        });
    }
    let present: HashSet<ItemId> = seq.iter().copied().collect();
    let unseen: Vec<ItemId> = (1..=num_items as ItemId).filter(|i| !present.contains(i)).collect();
    let vocab_exhausted = unseen.len() < count;
    let noise: Vec<ItemId> = if vocab_exhausted {
        (0..count).map(|_| rng.random_range(1..=num_items as ItemId)).collect()
    } else {
        sample(rng, unseen.len(), count).into_iter().map(|i| unseen[i]).collect()
    };

    let total = seq.len() + count;
    let mut inserted_at: Vec<usize> = sample(rng, total, count).into_vec();
    inserted_at.sort_unstable();
    let mut items = Vec::with_capacity(total);
    let (mut orig, mut noise_iter, mut slots) = (seq.iter(), noise.into_iter(), inserted_at.iter().peekable());
    for pos in 0..total {
        if slots.peek() == Some(&&pos) {
            slots.next();
            items.push(noise_iter.next().unwrap());
        } else {
            items.push(*orig.next().unwrap());
        }
    }
    Ok(NoisySequence {
        items,
        inserted_at,
        vocab_exhausted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::random::seeded;

    fn parse(text: &str) -> Result<InteractionDataset> {
        parse_interactions(text, Path::new("mem"))
    }

    #[test]
    fn single_user_file() {
        let ds = parse("u1 3 7 9 2 5\n").unwrap();
        assert_eq!(ds.num_users(), 1);
        assert_eq!(ds.sequences[0].len(), 5);
        assert_eq!(ds.num_items, 5);
        // sorted vocabulary: 2,3,5,7,9 -> 1..=5
        assert_eq!(ds.sequences[0], vec![2, 4, 5, 1, 3]);
    }

    #[test]
    fn short_users_are_dropped() {
        let ds = parse("a 1 2 3 4\nb 1 2 3 4 5\n").unwrap();
        assert_eq!(ds.user_ids, vec!["b"]);
    }

    #[test]
    fn shared_items_share_ids() {
        let ds = parse("a 10 20 30 40 50\nb 50 40 60 10 10\n").unwrap();
        assert_eq!(ds.num_items, 6);
        assert_eq!(ds.sequences[0][0], ds.sequences[1][3]);
        assert_eq!(ds.sequences[0][4], ds.sequences[1][0]);
    }

    #[test]
    fn bad_tokens_report_line_numbers() {
        let err = parse("a 1 2 3 4 5\n\nb 1 x 3 4 5\n").unwrap_err().to_string();
        assert!(err.contains(":3:"), "{err}");
        assert!(parse("a 1 2\n").is_err());
        assert!(parse("a 1 2 3 4 5\na 1 2 3 4 5\n").is_err());
    }

    #[test]
    fn leave_one_out_protocol() {
        let ds = InteractionDataset::from_sequences(5, vec![vec![1, 2, 3, 4, 5], vec![3, 1, 2]]).unwrap();
        let split = leave_one_out(&ds);
        assert_eq!(split.train[0], vec![1, 2, 3]);
        assert_eq!(split.valid[0].target, 4);
        assert_eq!(split.test[0].target, 5);
        assert_eq!(split.test[0].input, vec![1, 2, 3, 4]);
        assert_eq!(split.train[1], vec![3]);
        assert_eq!(split.skipped, 0);
    }

    #[test]
    fn leave_one_out_skips_too_short() {
        let ds = InteractionDataset::from_sequences(3, vec![vec![1, 2], vec![1, 2, 3]]).unwrap();
        let split = leave_one_out(&ds);
        assert_eq!(split.skipped, 1);
        assert_eq!(split.test.len(), 1);
    }

    #[test]
    fn segmentation_examples() {
        let abc = prefix_segment(&['a', 'b', 'c'], 2, 4).unwrap();
        assert_eq!(abc, vec![vec!['a', 'b'], vec!['a', 'b', 'c']]);
        let long = prefix_segment(&[1, 2, 3, 4, 5], 2, 3).unwrap();
        assert_eq!(long, vec![vec![1, 2], vec![1, 2, 3], vec![2, 3, 4], vec![3, 4, 5]]);
        assert_eq!(prefix_segment(&[1, 2, 3, 4], 4, 6).unwrap(), vec![vec![1, 2, 3, 4]]);
        assert_eq!(prefix_segment(&[1, 2], 4, 6).unwrap(), vec![vec![1, 2]]);
        assert!(prefix_segment(&[1, 2, 3], 1, 3).is_err());
        assert!(prefix_segment(&[1, 2, 3], 4, 3).is_err());
    }

    #[test]
    fn padding_examples() {
        assert_eq!(pad_truncate(&[5, 7], 4), (vec![0, 0, 5, 7], 2));
        let long: Vec<ItemId> = (1..=60).collect();
        let (out, len) = pad_truncate(&long, 50);
        assert_eq!(out, (11..=60).collect::<Vec<_>>());
        assert_eq!(len, 50);
        assert_eq!(pad_truncate(&[1, 2, 3], 3), (vec![1, 2, 3], 3));
    }

    #[test]
    fn noise_counts_and_order() {
        let seq: Vec<ItemId> = (1..=10).collect();
        let mut rng = seeded(1);
        let noisy = inject_noise(&seq, 0.2, 100, &mut rng).unwrap();
        assert_eq!(noisy.items.len(), 12);
        assert!(!noisy.vocab_exhausted);
        let stripped: Vec<ItemId> = noisy
            .items
            .iter()
            .enumerate()
            .filter(|(i, _)| !noisy.inserted_at.contains(i))
            .map(|(_, &v)| v)
            .collect();
        assert_eq!(stripped, seq);
        for &p in &noisy.inserted_at {
            assert!(!seq.contains(&noisy.items[p]));
        }
        let clean = inject_noise(&seq, 0.0, 100, &mut rng).unwrap();
        assert_eq!(clean.items, seq);
    }

    #[test]
    fn noise_with_exhausted_vocabulary_is_flagged() {
        let seq: Vec<ItemId> = (1..=10).collect();
        let mut rng = seeded(2);
        let noisy = inject_noise(&seq, 0.2, 10, &mut rng).unwrap();
        assert!(noisy.vocab_exhausted);
        assert_eq!(noisy.items.len(), 12);
    }
}
