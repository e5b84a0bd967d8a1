//! Lloyd's k-means with k-means++ seeding, and inertia-gain selection of K.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{sq_dist, GeometryError};
use crate::stats::mix_seed;

pub const RESTARTS: u64 = 5;
pub const MAX_ITER: usize = 300;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// Sum of squared distances to the assigned centroid.
    pub inertia: f64,
    pub iterations: usize,
}

impl KMeansResult {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k()];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Draws one index with probability proportional to `weights`; uniform when
/// every weight is zero.
fn weighted_pick(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return rng.random_range(0..weights.len());
    }
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    // rounding fell off the end: take the last index with positive weight
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Extends `seeds` to `k` centroids by greedy D² sampling: each step draws
/// `2 + ln k` candidates and keeps the one that most reduces the potential.
fn plus_plus_extend(points: &[Vec<f64>], mut seeds: Vec<Vec<f64>>, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    if seeds.is_empty() {
        seeds.push(points[rng.random_range(0..points.len())].clone());
    }
    let trials = 2 + (k as f64).ln().floor() as usize;
    let mut d2: Vec<f64> = points.iter().map(|p| nearest(p, &seeds).1).collect();
    while seeds.len() < k {
        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        for _ in 0..trials {
            let cand = weighted_pick(&d2, rng);
            let updated: Vec<f64> = d2
                .iter()
                .zip(points)
                .map(|(w, p)| w.min(sq_dist(p, &points[cand])))
                .collect();
            let potential: f64 = updated.iter().sum();
            if best.as_ref().is_none_or(|b| potential < b.0) {
                best = Some((potential, cand, updated));
            }
        }
        let (_, idx, updated) = best.expect("at least one trial");
        d2 = updated;
        seeds.push(points[idx].clone());
    }
    seeds
}

/// Runs Lloyd iterations from the given centroids until the assignment is
/// stable or `MAX_ITER` is reached. Clusters are never left empty.
pub fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>) -> KMeansResult {
    let k = centroids.len();
    let dim = points[0].len();
    let mut assignments = vec![usize::MAX; points.len()];
    let mut dists = vec![0.0; points.len()];
    let mut iterations = 0;

    loop {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let (j, d) = nearest(p, &centroids);
            dists[i] = d;
            if assignments[i] != j {
                assignments[i] = j;
                changed = true;
            }
        }
        // repair empty clusters by stealing the worst-fit point from a
        // cluster that can spare one
        let mut sizes = vec![0usize; k];
        for &a in &assignments {
            sizes[a] += 1;
        }
        for j in 0..k {
            if sizes[j] > 0 {
                continue;
            }
            let donor = (0..points.len())
                .filter(|&i| sizes[assignments[i]] > 1)
                .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)));
            if let Some(i) = donor {
                sizes[assignments[i]] -= 1;
                assignments[i] = j;
                sizes[j] = 1;
                dists[i] = 0.0;
                changed = true;
            }
        }
        if !changed || iterations >= MAX_ITER {
            break;
        }
        iterations += 1;

        let mut sums = vec![vec![0.0; dim]; k];
        for (p, &a) in points.iter().zip(&assignments) {
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for (j, s) in sums.into_iter().enumerate() {
            if sizes[j] > 0 {
                let n = sizes[j] as f64;
                centroids[j] = s.into_iter().map(|v| v / n).collect();
            }
        }
    }

    let inertia = points
        .iter()
        .zip(&assignments)
        .map(|(p, &a)| sq_dist(p, &centroids[a]))
        .sum();
    KMeansResult {
        centroids,
        assignments,
        inertia,
        iterations,
    }
}

/// Best of `RESTARTS` k-means++ seeded runs; ties go to the earliest restart.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<KMeansResult, GeometryError> {
    kmeans_with_restarts(points, k, seed, RESTARTS)
}

/// [`kmeans`] with an explicit restart count (at least one).
pub fn kmeans_with_restarts(
    points: &[Vec<f64>],
    k: usize,
    seed: u64,
    restarts: u64,
) -> Result<KMeansResult, GeometryError> {
    if k == 0 || k > points.len() {
        return Err(GeometryError::TooFewPoints {
            needed: k.max(1),
            got: points.len(),
        });
    }
    let mut best: Option<KMeansResult> = None;
    for r in 0..restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, r));
        let init = plus_plus_extend(points, Vec::new(), k, &mut rng);
        let run = lloyd(points, init);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct KSelection {
    pub k: usize,
    /// Solution for the selected K, assignments in input order.
    pub result: KMeansResult,
    /// Inertia `I(1), I(2), ...` for every K evaluated.
    pub inertias: Vec<f64>,
}

fn data_hash(points: &[Vec<f64>]) -> u64 {
    // FNV-1a over the raw bits
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for p in points {
        for v in p {
            for b in v.to_bits().to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
    }
    h
}

/// Selects the number of centroids: keeps adding one while the relative
/// inertia gain is at least `inertia_threshold` and every cluster of the
/// new solution holds at least `min_cluster_size` points.
///
/// Points are put in a canonical order first and the seed is keyed to a
/// hash of that order, so the outcome does not depend on input order.
pub fn select_k(
    points: &[Vec<f64>],
    inertia_threshold: f64,
    min_cluster_size: usize,
    k_max: usize,
    seed: u64,
) -> Result<KSelection, GeometryError> {
    let n = points.len();
    if n == 0 || n < min_cluster_size {
        return Err(GeometryError::TooFewPoints {
            needed: min_cluster_size.max(1),
            got: n,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        points[a]
            .iter()
            .zip(&points[b])
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let sorted: Vec<Vec<f64>> = order.iter().map(|&i| points[i].clone()).collect();
    let seed = mix_seed(seed, data_hash(&sorted));

    let mut best = kmeans(&sorted, 1, seed)?;
    let mut inertias = vec![best.inertia];
    let mut prev = best.clone();
    for k in 2..=k_max.min(n) {
        let fresh = kmeans(&sorted, k, mix_seed(seed, k as u64))?;
        // warm start from the K-1 solution plus one D²-sampled centroid keeps
        // I(K) <= I(K-1)
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 1000 + k as u64));
        let warm = lloyd(&sorted, plus_plus_extend(&sorted, prev.centroids.clone(), k, &mut rng));
        let run = if warm.inertia < fresh.inertia { warm } else { fresh };
        inertias.push(run.inertia);

        let gain = if prev.inertia > 0.0 {
            (prev.inertia - run.inertia) / prev.inertia
        } else {
            0.0
        };
        if gain < inertia_threshold {
            break;
        }
        if run.cluster_sizes().iter().any(|&s| s < min_cluster_size) {
            break;
        }
        best = run.clone();
        prev = run;
    }

    let mut assignments = vec![0; n];
    for (pos, &orig) in order.iter().enumerate() {
        assignments[orig] = best.assignments[pos];
    }
    best.assignments = assignments;
    Ok(KSelection {
        k: best.k(),
        result: best,
        inertias,
    })
}
