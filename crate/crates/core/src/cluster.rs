//! Semi-supervised k-means with k-means++ seeding.
//!
//! Points are rows of flat `n×d` slices. Labeled points stay in the cluster of
//! their class for the whole run but still pull that cluster's centroid.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::error::{Error, Result};

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index and squared distance of the nearest centroid; lowest index wins ties.
fn nearest(point: &[f64], centroids: &[f64], d: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centre) in centroids.chunks(d).enumerate() {
        let dist = sq_dist(point, centre);
        if dist < best.1 {
            best = (c, dist);
        }
    }
    best
}

/// Adds `extra` centroids to `existing` by D² sampling over `points`. With no
/// existing centroids the first pick is uniform.
pub fn kmeans_pp_extend(points: &[f64], d: usize, existing: &[f64], extra: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let n = points.len() / d;
    if n < extra {
        return Err(Error::Invalid(format!("k-means++ needs {extra} points, got {n}")));
    }
    let mut centroids = existing.to_vec();
    let mut dist: Vec<f64> = if centroids.is_empty() {
        vec![f64::INFINITY; n]
    } else {
        points.chunks(d).map(|p| nearest(p, &centroids, d).1).collect()
    };
    for _ in 0..extra {
        let pick = if centroids.is_empty() || dist.iter().all(|&v| v == 0.0) {
            rng.random_range(0..n)
        } else {
            WeightedIndex::new(&dist).expect("finite nonnegative weights with positive sum").sample(rng)
        };
        let chosen = points[pick * d..(pick + 1) * d].to_vec();
        for (i, p) in points.chunks(d).enumerate() {
            dist[i] = dist[i].min(sq_dist(p, &chosen));
        }
        centroids.extend(chosen);
    }
    Ok(centroids)
}

/// Plain k-means++ seeding: `k` centroids, first one uniform.
pub fn kmeans_pp_init(points: &[f64], d: usize, k: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
    kmeans_pp_extend(points, d, &[], k, rng)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            k: 0,
            tol: 1e-4,
            max_iter: 100,
        }
    }
}

/// Bookkeeping of one assign/update round.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Iteration {
    /// Sum of squared distances after the centroid update.
    pub objective: f64,
    /// Largest centroid movement of the update.
    pub max_shift: f64,
    /// Every labeled point sat in its class cluster during this round.
    pub labeled_fixed: bool,
    pub reseeded: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterState {
    /// `k×d`.
    pub centroids: Vec<f64>,
    pub labeled_assignments: Vec<usize>,
    /// The pseudo-labels of the unlabeled points.
    pub unlabeled_assignments: Vec<usize>,
    pub history: Vec<Iteration>,
    pub converged: bool,
}

impl ClusterState {
    pub fn objective(&self) -> f64 {
        self.history.last().map_or(f64::NAN, |h| h.objective)
    }
}

/// Known-class centroids start at the labeled class means (classes
/// `0..n_known`); the remaining `k − n_known` are seeded by D² sampling over the
/// unlabeled points relative to those means. Iterates until the largest
/// centroid shift drops below `tol` or `max_iter` rounds have run.
///
/// An emptied cluster is reseeded at the unlabeled point farthest from its
/// nearest centroid. With no unlabeled points only the known centroids exist.
pub fn semisup_kmeans(
    labeled: &[f64],
    labels: &[usize],
    unlabeled: &[f64],
    d: usize,
    n_known: usize,
    cfg: &KMeansConfig,
    rng: &mut impl Rng,
) -> Result<ClusterState> {
    if d == 0 || labeled.len() != labels.len() * d || unlabeled.len() % d != 0 {
        return Err(Error::Invalid("feature buffers do not match the dimension".into()));
    }
    if cfg.k < n_known {
        return Err(Error::Config(format!("k = {} is below the {n_known} known classes", cfg.k)));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= n_known) {
        return Err(Error::Invalid(format!("label {bad} is not a known class (< {n_known})")));
    }
    let mut sums = vec![0.0; n_known * d];
    let mut counts = vec![0usize; n_known];
    for (p, &y) in labeled.chunks(d).zip(labels) {
        counts[y] += 1;
        sums[y * d..(y + 1) * d].iter_mut().zip(p).for_each(|(s, v)| *s += v);
    }
    if let Some(c) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Invalid(format!("known class {c} has no labeled points")));
    }
    let means: Vec<f64> = sums
        .chunks(d)
        .zip(&counts)
        .flat_map(|(s, &c)| s.iter().map(move |v| v / c as f64))
        .collect();
    let nu = unlabeled.len() / d;
    let k = if nu == 0 { n_known } else { cfg.k };
    let mut centroids = kmeans_pp_extend(unlabeled, d, &means, k - n_known, rng)?;

    let labeled_assignments = labels.to_vec();
    let mut assign = vec![0usize; nu];
    let mut history = Vec::new();
    let mut converged = false;
    for _ in 0..cfg.max_iter.max(1) {
        for (a, p) in assign.iter_mut().zip(unlabeled.chunks(d)) {
            *a = nearest(p, &centroids, d).0;
        }
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        let members = labeled
            .chunks(d)
            .zip(&labeled_assignments)
            .chain(unlabeled.chunks(d).zip(&assign));
        for (p, &c) in members {
            counts[c] += 1;
            sums[c * d..(c + 1) * d].iter_mut().zip(p).for_each(|(s, v)| *s += v);
        }
        let mut next = centroids.clone();
        let mut reseeded = 0;
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..d {
                    next[c * d + j] = sums[c * d + j] / counts[c] as f64;
                }
            } else {
                // nobody left: move to the worst-served unlabeled point
                let far = unlabeled
                    .chunks(d)
                    .enumerate()
                    .map(|(i, p)| (i, nearest(p, &centroids, d).1))
                    .fold((0, f64::NEG_INFINITY), |b, x| if x.1 > b.1 { x } else { b })
                    .0;
                next[c * d..(c + 1) * d].copy_from_slice(&unlabeled[far * d..(far + 1) * d]);
                reseeded += 1;
            }
        }
        let max_shift = centroids
            .chunks(d)
            .zip(next.chunks(d))
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        let objective = labeled
            .chunks(d)
            .zip(&labeled_assignments)
            .chain(unlabeled.chunks(d).zip(&assign))
            .map(|(p, &c)| sq_dist(p, &centroids[c * d..(c + 1) * d]))
            .sum();
        history.push(Iteration {
            objective,
            max_shift,
            labeled_fixed: labeled_assignments == labels,
            reseeded,
        });
        if max_shift < cfg.tol {
            converged = true;
            break;
        }
    }
    // final assignment against the last centroids
    for (a, p) in assign.iter_mut().zip(unlabeled.chunks(d)) {
        *a = nearest(p, &centroids, d).0;
    }
    Ok(ClusterState {
        centroids,
        labeled_assignments,
        unlabeled_assignments: assign,
        history,
        converged,
    })
}
