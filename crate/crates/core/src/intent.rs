//! Intent prototypes: K-means over subsequence representations, nearest
//! prototype lookup, and same-intent sampling for the guidance signal.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::numerics::Rng;

pub const DEFAULT_MAX_ITERS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct IntentIndex {
    /// `K` prototype vectors.
    pub prototypes: Vec<Vec<f64>>,
    /// Cluster of each indexed representation.
    pub assignments: Vec<usize>,
    /// Indexed representations per cluster, ascending.
    pub members: Vec<Vec<usize>>,
    /// Clustering objective after every assignment step, first to last.
    pub objective_history: Vec<f64>,
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest center; ties resolve to the lowest index.
fn nearest(h: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.iter().enumerate() {
        let d = squared_distance(h, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn assign(points: &[Vec<f64>], centers: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>) {
    points.iter().map(|p| nearest(p, centers)).unzip()
}

/// Draws an index with probability proportional to `weights`.
fn weighted_pick(weights: &[f64], total: f64, rng: &mut Rng) -> usize {
    let mut target = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if target < w {
            return i;
        }
        target -= w;
    }
    weights.len() - 1
}

/// Greedy k-means++: each step draws `2 + ln K` D²-weighted candidates and
/// keeps the one giving the lowest potential.
fn seed_centers(points: &[Vec<f64>], k: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let trials = 2 + (k as f64).ln().floor() as usize;
    let mut centers = vec![points[rng.random_range(0..points.len())].clone()];
    let mut dist: Vec<f64> = points.iter().map(|p| squared_distance(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = dist.iter().sum();
        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        for _ in 0..trials {
            let cand = if total > 0.0 {
                weighted_pick(&dist, total, rng)
            } else {
                rng.random_range(0..points.len())
            };
            let next: Vec<f64> = dist.iter().zip(points).map(|(d, p)| d.min(squared_distance(p, &points[cand]))).collect();
            let potential: f64 = next.iter().sum();
            if best.as_ref().is_none_or(|b| potential < b.0) {
                best = Some((potential, cand, next));
            }
        }
        let (_, cand, next) = best.expect("at least one trial");
        centers.push(points[cand].clone());
        dist = next;
    }
    centers
}

/// Lloyd iterations from k-means++ seeding until the assignment reaches a
/// fixpoint or `max_iters` updates have run. `K` is reduced to the number of
/// points when there are fewer.
pub fn fit_kmeans(reprs: &[Vec<f64>], k: usize, max_iters: usize, rng: &mut Rng) -> Result<IntentIndex> {
    if reprs.is_empty() || k == 0 {
        return Err(Error::invalid("fit_kmeans", "need at least one point and K >= 1"));
    }
    let dim = reprs[0].len();
    if reprs.iter().any(|r| r.len() != dim) {
        return Err(Error::invalid("fit_kmeans", "representations differ in length"));
    }
    let k = if reprs.len() < k {
        log::warn!("fit_kmeans: K={k} exceeds {} points, reducing", reprs.len());
        reprs.len()
    } else {
        k
    };

    let mut centers = seed_centers(reprs, k, rng);
    let (mut assignments, mut dist) = assign(reprs, &centers);
    let mut history = vec![dist.iter().sum::<f64>()];
    for _ in 0..max_iters {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in reprs.iter().zip(&assignments) {
            counts[a] += 1;
            sums[a].iter_mut().zip(p).for_each(|(s, v)| *s += v);
        }
        // Empty clusters take the point currently farthest from its center.
        let mut far = dist.clone();
        for j in 0..k {
            if counts[j] == 0 {
                let (idx, _) = far
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |acc, (i, &d)| if d > acc.1 { (i, d) } else { acc });
                centers[j] = reprs[idx].clone();
                far[idx] = f64::NEG_INFINITY;
            } else {
                centers[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        let (next, next_dist) = assign(reprs, &centers);
        history.push(next_dist.iter().sum());
        dist = next_dist;
        let done = next == assignments;
        assignments = next;
        if done {
            break;
        }
    }

    let mut members = vec![Vec::new(); k];
    for (i, &a) in assignments.iter().enumerate() {
        members[a].push(i);
    }
    Ok(IntentIndex {
        prototypes: centers,
        assignments,
        members,
        objective_history: history,
    })
}

impl IntentIndex {
    pub fn k(&self) -> usize {
        self.prototypes.len()
    }

    pub fn objective(&self) -> f64 {
        *self.objective_history.last().unwrap_or(&0.0)
    }

    /// Nearest prototype; ties go to the lowest cluster id.
    pub fn query(&self, h: &[f64]) -> usize {
        nearest(h, &self.prototypes).0
    }

    /// Uniform draw from the cluster's members other than `exclude`; falls
    /// back to `exclude` itself when no other member exists.
    pub fn sample_same_intent(&self, cluster: usize, exclude: usize, rng: &mut Rng) -> usize {
        let Some(members) = self.members.get(cluster) else {
            return exclude;
        };
        let others = members.len() - usize::from(members.binary_search(&exclude).is_ok());
        if others == 0 {
            return exclude;
        }
        let mut pick = rng.random_range(0..others);
        for &m in members {
            if m == exclude {
                continue;
            }
            if pick == 0 {
                return m;
            }
            pick -= 1;
        }
        unreachable!("pick is bounded by the member count")
    }

    /// `(index, cluster)` rows for CSV export.
    pub fn assignment_rows(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.assignments.iter().copied().enumerate()
    }
}
