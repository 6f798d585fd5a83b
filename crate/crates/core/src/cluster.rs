//! K-means over target embeddings and the cluster-pure mini-batch planner.
//!
//! Initialization is k-means++ from a seeded ChaCha stream; Lloyd iterations
//! run until the assignment is a fixpoint or `max_iter` is reached. A cluster
//! that loses all members takes over the point farthest from its current
//! centroid, so `K` never shrinks.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gallery::write_jsonl;
use crate::rng::{derive_seed, seeded};

pub const DEFAULT_MAX_ITER: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// Sum of squared distances to the assigned centroids.
    pub inertia: f64,
    /// Inertia after each completed Lloyd iteration.
    pub inertia_history: Vec<f64>,
    pub k: usize,
    pub seed: u64,
    pub iterations_run: usize,
}

impl ClusterModel {
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }

    /// Member indices of each cluster, ascending.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k];
        for (i, &a) in self.assignments.iter().enumerate() {
            out[a].push(i);
        }
        out
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid (lowest index on ties) and its distance.
fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cent) in centroids.iter().enumerate() {
        let d = sq_dist(p, cent);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn kmeans_pp_init(points: &[Vec<f64>], k: usize, rng: &mut crate::rng::Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![points[first].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[first])).collect();

    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                acc += w;
                pick = Some(i);
                if acc > target {
                    break;
                }
            }
            pick.expect("positive total implies a positive weight")
        } else {
            // Every remaining point coincides with a centroid.
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[pick] = true;
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &points[pick]));
        }
        centroids.push(points[pick].clone());
    }
    centroids
}

fn assign(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> Vec<(usize, f64)> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        points.par_iter().map(|p| nearest(p, centroids)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        points.iter().map(|p| nearest(p, centroids)).collect()
    }
}

/// Gives every empty cluster the point farthest from its centroid.
fn repair_empty(assignments: &mut [usize], dists: &mut [f64], points: &[Vec<f64>], centroids: &mut [Vec<f64>]) {
    let k = centroids.len();
    let mut sizes = vec![0usize; k];
    for &a in assignments.iter() {
        sizes[a] += 1;
    }
    for empty in 0..k {
        if sizes[empty] > 0 {
            continue;
        }
        let mut far: Option<usize> = None;
        for i in 0..points.len() {
            if sizes[assignments[i]] > 1 && far.is_none_or(|f| dists[i] > dists[f]) {
                far = Some(i);
            }
        }
        let i = far.expect("N >= K guarantees a donor cluster");
        sizes[assignments[i]] -= 1;
        sizes[empty] = 1;
        assignments[i] = empty;
        dists[i] = 0.0;
        centroids[empty] = points[i].clone();
    }
}

fn update_centroids(points: &[Vec<f64>], assignments: &[usize], k: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut sums = vec![vec![0.0f64; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignments) {
        counts[a] += 1;
        for (s, x) in sums[a].iter_mut().zip(p) {
            *s += x;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        let c = c as f64;
        s.iter_mut().for_each(|v| *v /= c);
    }
    sums
}

fn inertia(points: &[Vec<f64>], assignments: &[usize], centroids: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .zip(assignments)
        .map(|(p, &a)| sq_dist(p, &centroids[a]))
        .sum()
}

pub fn kmeans_fit<R: AsRef<[f32]>>(points: &[R], k: usize, seed: u64, max_iter: usize) -> Result<ClusterModel> {
    let n = points.len();
    if k == 0 {
        return Err(Error::invalid("K must be at least 1"));
    }
    if k > n {
        return Err(Error::invalid(format!("K={k} exceeds the number of points {n}")));
    }
    if max_iter == 0 {
        return Err(Error::invalid("max_iter must be at least 1"));
    }
    let dim = points[0].as_ref().len();
    let mut pts = Vec::with_capacity(n);
    for (i, p) in points.iter().enumerate() {
        let p = p.as_ref();
        if p.len() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                actual: p.len(),
            });
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite(format!("point {i}")));
        }
        pts.push(p.iter().map(|&v| f64::from(v)).collect::<Vec<f64>>());
    }

    let mut rng = seeded(seed);
    let mut centroids = kmeans_pp_init(&pts, k, &mut rng);
    let mut assignments = vec![usize::MAX; n];
    let mut history = Vec::new();

    for _ in 0..max_iter {
        let nearest = assign(&pts, &centroids);
        let changed = nearest.iter().zip(&assignments).any(|((c, _), a)| c != a);
        if !changed {
            break;
        }
        let (mut new_assign, mut dists): (Vec<usize>, Vec<f64>) = nearest.into_iter().unzip();
        repair_empty(&mut new_assign, &mut dists, &pts, &mut centroids);
        assignments = new_assign;
        centroids = update_centroids(&pts, &assignments, k, dim);
        history.push(inertia(&pts, &assignments, &centroids));
    }

    Ok(ClusterModel {
        inertia: *history.last().expect("at least one iteration runs"),
        iterations_run: history.len(),
        inertia_history: history,
        centroids,
        assignments,
        k,
        seed,
    })
}

/// One mini-batch: sample indices drawn from a single cluster.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub cluster: usize,
    pub samples: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub batches: Vec<Batch>,
    pub batch_size: usize,
}

impl BatchPlan {
    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }
}

/// Shuffles each cluster, chunks it into batches of `batch_size`, then
/// shuffles the batch order.
pub fn plan_batches(model: &ClusterModel, batch_size: usize, seed: u64, drop_last: bool) -> Result<BatchPlan> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    let mut rng = seeded(seed);
    let mut batches = Vec::new();
    for (cluster, mut members) in model.members().into_iter().enumerate() {
        members.shuffle(&mut rng);
        for chunk in members.chunks(batch_size) {
            if drop_last && chunk.len() < batch_size {
                continue;
            }
            batches.push(Batch {
                cluster,
                samples: chunk.to_vec(),
            });
        }
    }
    if batches.is_empty() {
        return Err(Error::invalid(format!(
            "batch size {batch_size} exceeds every cluster with drop_last set; plan is empty"
        )));
    }
    batches.shuffle(&mut rng);
    Ok(BatchPlan { batches, batch_size })
}

/// Plan for one training epoch; each epoch draws a fresh seed from the base.
pub fn plan_epoch(model: &ClusterModel, batch_size: usize, seed: u64, epoch: u64, drop_last: bool) -> Result<BatchPlan> {
    plan_batches(model, batch_size, derive_seed(seed, &[b"epoch", &epoch.to_le_bytes()]), drop_last)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AssignmentLine<'a> {
    id: &'a str,
    cluster: usize,
}

/// Writes `{"id": .., "cluster": k}` lines, one per sample.
pub fn write_assignments<S: AsRef<str>>(path: impl AsRef<Path>, ids: &[S], model: &ClusterModel) -> Result<()> {
    if ids.len() != model.assignments.len() {
        return Err(Error::invalid("id count does not match assignment count"));
    }
    write_jsonl(
        path,
        ids.iter().zip(&model.assignments).map(|(id, &cluster)| AssignmentLine {
            id: id.as_ref(),
            cluster,
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(v: &[[f32; 2]]) -> Vec<Vec<f32>> {
        v.iter().map(|p| p.to_vec()).collect()
    }

    #[test]
    fn single_cluster_is_mean() {
        let p = pts(&[[0.0, 0.0], [2.0, 0.0], [4.0, 3.0]]);
        let m = kmeans_fit(&p, 1, 1, 100).unwrap();
        assert_eq!(m.assignments, [0, 0, 0]);
        assert_eq!(m.centroids[0], [2.0, 1.0]);
    }

    #[test]
    fn k_equals_n_zero_inertia() {
        let p = pts(&[[0.0, 0.0], [2.0, 0.0], [4.0, 3.0], [-1.0, 5.0]]);
        let m = kmeans_fit(&p, 4, 9, 100).unwrap();
        assert_eq!(m.inertia, 0.0);
        let mut a = m.assignments.clone();
        a.sort_unstable();
        assert_eq!(a, [0, 1, 2, 3]);
    }

    #[test]
    fn two_pairs_separate() {
        let p = pts(&[[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]]);
        for seed in 0..20 {
            let m = kmeans_fit(&p, 2, seed, 100).unwrap();
            assert_eq!(m.assignments[0], m.assignments[1]);
            assert_eq!(m.assignments[2], m.assignments[3]);
            assert_ne!(m.assignments[0], m.assignments[2]);
            assert_eq!(m.inertia, 1.0);
        }
    }

    #[test]
    fn duplicates_trigger_repair() {
        // Three identical points and K=3: k-means++ must fall back to uniform
        // picks, and every cluster still ends up owning a point.
        let p = pts(&[[1.0, 1.0], [1.0, 1.0], [1.0, 1.0], [5.0, 5.0]]);
        let m = kmeans_fit(&p, 3, 4, 100).unwrap();
        assert!(m.cluster_sizes().iter().all(|&s| s > 0));
        assert_eq!(m.inertia, 0.0);
    }

    #[test]
    fn fit_errors() {
        let p = pts(&[[0.0, 0.0]]);
        assert!(kmeans_fit(&p, 2, 0, 10).is_err());
        assert!(kmeans_fit(&p, 0, 0, 10).is_err());
        assert!(kmeans_fit(&p, 1, 0, 0).is_err());
        assert!(kmeans_fit(&pts(&[[0.0, f32::INFINITY]]), 1, 0, 10).is_err());
    }

    fn model_with(assignments: Vec<usize>, k: usize) -> ClusterModel {
        ClusterModel {
            centroids: vec![vec![0.0]; k],
            assignments,
            inertia: 0.0,
            inertia_history: vec![0.0],
            k,
            seed: 0,
            iterations_run: 1,
        }
    }

    #[test]
    fn plan_counts() {
        let m = model_with(vec![0, 0, 1, 0, 1, 0], 2);
        let plan = plan_batches(&m, 2, 3, false).unwrap();
        assert_eq!(plan.len(), 3);
        assert_eq!(plan.batches.iter().filter(|b| b.cluster == 0).count(), 2);
        assert_eq!(plan.batches.iter().filter(|b| b.cluster == 1).count(), 1);
        let mut all: Vec<usize> = plan.batches.iter().flat_map(|b| b.samples.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, [0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn plan_single_cluster_is_shuffled_chunking() {
        let m = model_with(vec![0; 7], 1);
        let plan = plan_batches(&m, 3, 11, false).unwrap();
        let sizes: Vec<usize> = plan.batches.iter().map(|b| b.samples.len()).collect();
        assert_eq!(sizes.iter().sum::<usize>(), 7);
        assert_eq!(plan.len(), 3);
    }

    #[test]
    fn plan_drop_last() {
        let m = model_with(vec![0, 0, 0], 1);
        let plan = plan_batches(&m, 2, 0, true).unwrap();
        assert_eq!(plan.len(), 1);
        assert_eq!(plan.batches[0].samples.len(), 2);
        assert!(plan_batches(&m, 4, 0, true).is_err());
        assert!(plan_batches(&m, 0, 0, false).is_err());
    }

    #[test]
    fn epochs_differ_but_are_reproducible() {
        let m = model_with((0..40).map(|i| i % 3).collect(), 3);
        let a = plan_epoch(&m, 4, 5, 0, false).unwrap();
        assert_eq!(a, plan_epoch(&m, 4, 5, 0, false).unwrap());
        assert_ne!(a, plan_epoch(&m, 4, 5, 1, false).unwrap());
    }

    #[test]
    fn assignments_export() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.jsonl");
        let m = model_with(vec![1, 0], 2);
        write_assignments(&p, &["x", "y"], &m).unwrap();
        assert_eq!(
            std::fs::read_to_string(&p).unwrap(),
            "{\"id\":\"x\",\"cluster\":1}\n{\"id\":\"y\",\"cluster\":0}\n"
        );
    }
}
