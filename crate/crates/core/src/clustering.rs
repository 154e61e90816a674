//! Lloyd's k-means with k-means++ seeding (squared Euclidean).

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, FalError, Result};
use crate::linalg::{axpy, sq_dist};
use crate::rng::{derive_seed, rng_from, Rng, Stream};

pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITERS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub centroids: Vec<Vec<f64>>,
    /// Cluster index per point.
    pub assignments: Vec<usize>,
    /// `J = Σ_i ||x_i − μ_assign(i)||²`
    pub objective: f64,
    /// Objective after every E and M half-step.
    pub history: Vec<f64>,
    pub iterations: usize,
}

impl Clustering {
    pub fn num_clusters(&self) -> usize {
        self.centroids.len()
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        self.assignments
            .iter()
            .enumerate()
            .filter(|(_, &a)| a == cluster)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.centroids.len()];
        self.assignments.iter().for_each(|&a| sizes[a] += 1);
        sizes
    }

    pub fn recompute_objective(&self, points: &[Vec<f64>]) -> f64 {
        objective(points, &self.centroids, &self.assignments)
    }
}

pub fn objective(points: &[Vec<f64>], centroids: &[Vec<f64>], assignments: &[usize]) -> f64 {
    points
        .iter()
        .zip(assignments)
        .map(|(p, &a)| sq_dist(p, &centroids[a]))
        .sum()
}

pub fn distinct_count(points: &[Vec<f64>]) -> usize {
    let mut sorted: Vec<&Vec<f64>> = points.iter().collect();
    let cmp = |a: &&Vec<f64>, b: &&Vec<f64>| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    };
    sorted.sort_by(cmp);
    sorted.dedup_by(|a, b| cmp(&&**a, &&**b).is_eq());
    sorted.len()
}

fn check_points(points: &[Vec<f64>]) -> Result<()> {
    let Some(first) = points.first() else {
        return Err(invalid("no points to cluster"));
    };
    if let Some(p) = points.iter().find(|p| p.len() != first.len()) {
        return Err(FalError::ShapeMismatch {
            expected: first.len(),
            actual: p.len(),
        });
    }
    Ok(())
}

/// D²-sampling order of up to `count` point indices. When every remaining
/// point coincides with a chosen one, the next pick is uniform over the rest,
/// so this never fails on duplicate-heavy input.
pub fn kmeans_pp_order(points: &[Vec<f64>], count: usize, rng: &mut Rng) -> Vec<usize> {
    let n = points.len();
    let count = count.min(n);
    if count == 0 {
        return Vec::new();
    }
    let mut chosen = vec![false; n];
    let mut order = Vec::with_capacity(count);
    let first = rng.random_range(0..n);
    chosen[first] = true;
    order.push(first);
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[first])).collect();
    while order.len() < count {
        let total: f64 = (0..n).filter(|&i| !chosen[i]).map(|i| d2[i]).sum();
        let next = if total > 0.0 {
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            let mut last_positive = None;
            for i in (0..n).filter(|&i| !chosen[i]) {
                if d2[i] > 0.0 {
                    last_positive = Some(i);
                }
                acc += d2[i];
                if acc > u {
                    pick = Some(i);
                    break;
                }
            }
            pick.or(last_positive).expect("positive mass implies a candidate")
        } else {
            let remaining: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            remaining[rng.random_range(0..remaining.len())]
        };
        chosen[next] = true;
        order.push(next);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &points[next]));
        }
    }
    order
}

/// Indices of `b` k-means++ seeds.
pub fn kmeans_pp_seed(points: &[Vec<f64>], b: usize, seed: u64) -> Result<Vec<usize>> {
    check_points(points)?;
    if b == 0 || b > distinct_count(points) {
        return Err(invalid(format!(
            "cannot seed {b} centroids from {} distinct points",
            distinct_count(points)
        )));
    }
    Ok(kmeans_pp_order(points, b, &mut rng_from(seed)))
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (b, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best_d {
            best_d = d;
            best = b;
        }
    }
    best
}

/// Moves the farthest point of a multi-member cluster into each empty cluster.
fn repair_empty(points: &[Vec<f64>], centroids: &mut [Vec<f64>], assignments: &mut [usize]) {
    let mut sizes = vec![0usize; centroids.len()];
    assignments.iter().for_each(|&a| sizes[a] += 1);
    while let Some(empty) = sizes.iter().position(|&s| s == 0) {
        let mut far = None;
        let mut far_d = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            if sizes[assignments[i]] > 1 {
                let d = sq_dist(p, &centroids[assignments[i]]);
                if d > far_d {
                    far_d = d;
                    far = Some(i);
                }
            }
        }
        let Some(i) = far else { break };
        sizes[assignments[i]] -= 1;
        assignments[i] = empty;
        sizes[empty] += 1;
        centroids[empty] = points[i].clone();
    }
}

fn recenter(points: &[Vec<f64>], assignments: &[usize], centroids: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; centroids.len()];
    let mut counts = vec![0usize; centroids.len()];
    for (p, &a) in points.iter().zip(assignments) {
        axpy(&mut sums[a], 1.0, p);
        counts[a] += 1;
    }
    sums.into_iter()
        .zip(counts)
        .zip(centroids)
        .map(|((mut s, n), old)| {
            if n == 0 {
                old.clone()
            } else {
                s.iter_mut().for_each(|v| *v /= n as f64);
                s
            }
        })
        .collect()
}

/// Alternates nearest-centroid assignment and centroid means until the largest
/// centroid displacement drops below `tol` or `max_iters` is reached.
pub fn lloyd(points: &[Vec<f64>], b: usize, seed: u64, max_iters: usize, tol: f64) -> Result<Clustering> {
    check_points(points)?;
    if max_iters == 0 {
        return Err(invalid("max_iters must be >= 1"));
    }
    let distinct = distinct_count(points);
    if b == 0 || b > distinct {
        return Err(invalid(format!("cannot form {b} clusters from {distinct} distinct points")));
    }
    let mut rng = rng_from(seed);
    let mut centroids: Vec<Vec<f64>> = kmeans_pp_order(points, b, &mut rng)
        .into_iter()
        .map(|i| points[i].clone())
        .collect();
    let mut assignments = vec![0usize; points.len()];
    let mut history = Vec::new();
    let mut iterations = 0;
    let mut current = f64::INFINITY;
    for _ in 0..max_iters {
        iterations += 1;
        for (a, p) in assignments.iter_mut().zip(points) {
            *a = nearest(p, &centroids);
        }
        repair_empty(points, &mut centroids, &mut assignments);
        history.push(objective(points, &centroids, &assignments));

        let updated = recenter(points, &assignments, &centroids);
        let movement = updated
            .iter()
            .zip(&centroids)
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = updated;
        current = objective(points, &centroids, &assignments);
        history.push(current);
        if movement < tol {
            break;
        }
    }
    Ok(Clustering {
        centroids,
        assignments,
        objective: current,
        history,
        iterations,
    })
}

/// Lowest-objective result over `restarts` independently seeded runs.
pub fn lloyd_best_of(
    points: &[Vec<f64>],
    b: usize,
    seed: u64,
    restarts: usize,
    max_iters: usize,
    tol: f64,
) -> Result<Clustering> {
    let mut best: Option<Clustering> = None;
    for r in 0..restarts.max(1) {
        let c = lloyd(points, b, derive_seed(seed, Stream::Query, r as u64, 0), max_iters, tol)?;
        if best.as_ref().is_none_or(|bst| c.objective < bst.objective) {
            best = Some(c);
        }
    }
    Ok(best.expect("at least one restart"))
}
