//! Seeded k-means++ / Lloyd partitioning of an embedding.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed::Embedding;
use crate::ingest::DataMatrix;
use crate::{Error, Result};

pub const DEFAULT_MAX_ITER: usize = 300;

/// Above this many `N * k * d` multiply-adds the assignment step switches
/// to the Gram-matrix formulation.
const GEMM_ASSIGN_THRESHOLD: usize = 20_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub k: usize,
    pub seed: u64,
    pub labels: Vec<usize>,
    pub inertia: f64,
    #[serde(with = "crate::serde_rows")]
    pub centroids: Array2<f64>,
    /// Inertia after every Lloyd update, starting with the seeded partition.
    #[serde(default)]
    pub inertia_trace: Vec<f64>,
}

impl ClusterAssignment {
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }

    /// Row indices per cluster, each list ascending.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }
}

fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Sum of squared distances from each point to its assigned centroid.
pub fn inertia(points: ArrayView2<'_, f64>, labels: &[usize], centroids: ArrayView2<'_, f64>) -> f64 {
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| sq_dist(points.row(i), centroids.row(l)))
        .sum()
}

fn assign(points: ArrayView2<'_, f64>, centroids: ArrayView2<'_, f64>) -> Vec<usize> {
    let (n, d) = points.dim();
    let k = centroids.nrows();
    if n * k * d > GEMM_ASSIGN_THRESHOLD {
        let cn = crate::linalg::row_sq_norms(centroids);
        let cross = points.dot(&centroids.t());
        return cross
            .outer_iter()
            .map(|row| {
                let mut best = (f64::INFINITY, 0);
                for (c, x) in row.iter().enumerate() {
                    let v = cn[c] - 2.0 * x;
                    if v < best.0 {
                        best = (v, c);
                    }
                }
                best.1
            })
            .collect();
    }
    points
        .outer_iter()
        .map(|p| {
            let mut best = (f64::INFINITY, 0);
            for (c, cen) in centroids.outer_iter().enumerate() {
                let v = sq_dist(p, cen);
                if v < best.0 {
                    best = (v, c);
                }
            }
            best.1
        })
        .collect()
}

fn update_centroids(points: ArrayView2<'_, f64>, labels: &[usize], k: usize) -> Array2<f64> {
    let d = points.ncols();
    let mut sums = Array2::<f64>::zeros((k, d));
    let mut counts = vec![0usize; k];
    for (i, &l) in labels.iter().enumerate() {
        let mut row = sums.row_mut(l);
        row += &points.row(i);
        counts[l] += 1;
    }
    for (c, mut row) in sums.outer_iter_mut().enumerate() {
        if counts[c] > 0 {
            row /= counts[c] as f64;
        }
    }
    sums
}

/// Give every empty cluster the point farthest from its current centroid
/// (taken from clusters with more than one member).
fn repair_empty(points: ArrayView2<'_, f64>, labels: &mut [usize], centroids: &mut Array2<f64>) {
    let k = centroids.nrows();
    loop {
        let mut counts = vec![0usize; k];
        for &l in labels.iter() {
            counts[l] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let mut far = (-1.0, usize::MAX);
        for (i, &l) in labels.iter().enumerate() {
            if counts[l] > 1 {
                let v = sq_dist(points.row(i), centroids.row(l));
                if v > far.0 {
                    far = (v, i);
                }
            }
        }
        if far.1 == usize::MAX {
            return;
        }
        labels[far.1] = empty;
        centroids.row_mut(empty).assign(&points.row(far.1));
    }
}

fn plus_plus_init(points: ArrayView2<'_, f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let (n, d) = points.dim();
    let mut centroids = Array2::<f64>::zeros((k, d));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&points.row(first));
    let mut chosen = vec![false; n];
    chosen[first] = true;
    let mut dmin: Array1<f64> = points
        .outer_iter()
        .map(|p| sq_dist(p, points.row(first)))
        .collect();
    for c in 1..k {
        let total: f64 = dmin.sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in dmin.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc >= target {
                    pick = Some(i);
                    break;
                }
            }
            // rounding can leave `target` just past the final partial sum
            pick.unwrap_or_else(|| dmin.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            chosen.iter().position(|&u| !u).unwrap_or(0)
        };
        chosen[pick] = true;
        centroids.row_mut(c).assign(&points.row(pick));
        for (i, p) in points.outer_iter().enumerate() {
            let v = sq_dist(p, points.row(pick));
            if v < dmin[i] {
                dmin[i] = v;
            }
        }
    }
    centroids
}

/// k-means with k-means++ seeding and Lloyd refinement on the rows of `points`.
pub fn kmeans(
    points: ArrayView2<'_, f64>,
    k: usize,
    seed: u64,
    max_iter: usize,
) -> Result<ClusterAssignment> {
    let n = points.nrows();
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if k > n {
        return Err(Error::invalid(format!("k = {k} exceeds the {n} points")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(points, k, &mut rng);
    let mut labels = assign(points, centroids.view());
    repair_empty(points, &mut labels, &mut centroids);
    centroids = update_centroids(points, &labels, k);
    let mut trace = vec![inertia(points, &labels, centroids.view())];
    for _ in 0..max_iter {
        let mut next = assign(points, centroids.view());
        repair_empty(points, &mut next, &mut centroids);
        if next == labels {
            break;
        }
        labels = next;
        centroids = update_centroids(points, &labels, k);
        trace.push(inertia(points, &labels, centroids.view()));
    }
    Ok(ClusterAssignment {
        k,
        seed,
        inertia: *trace.last().unwrap(),
        labels,
        centroids,
        inertia_trace: trace,
    })
}

/// Partition an embedding into `k` clusters.
pub fn kmeans_cluster(
    embedding: &Embedding,
    k: usize,
    seed: u64,
    max_iter: usize,
) -> Result<ClusterAssignment> {
    kmeans(embedding.coords.view(), k, seed, max_iter)
}

/// Per-cluster mean of the rows of `x`.
pub fn cluster_means(x: &DataMatrix, assignment: &ClusterAssignment) -> Result<Array2<f64>> {
    if x.nrows() != assignment.labels.len() {
        return Err(Error::invalid(format!(
            "{} rows but {} labels",
            x.nrows(),
            assignment.labels.len()
        )));
    }
    Ok(update_centroids(x.values.view(), &assignment.labels, assignment.k))
}

/// Majority class and its share for each cluster.
pub fn majority_classes(labels: &[usize], classes: &[usize], k: usize) -> Vec<(usize, f64)> {
    let n_classes = classes.iter().copied().max().map_or(0, |m| m + 1);
    let mut counts = vec![vec![0usize; n_classes]; k];
    for (&l, &c) in labels.iter().zip(classes) {
        counts[l][c] += 1;
    }
    counts
        .into_iter()
        .map(|row| {
            let total: usize = row.iter().sum();
            // ties go to the smaller class index
            let (best, cnt) = row
                .iter()
                .enumerate()
                .fold((0, 0), |acc, (c, &v)| if v > acc.1 { (c, v) } else { acc });
            (best, if total == 0 { 0.0 } else { cnt as f64 / total as f64 })
        })
        .collect()
}

pub(crate) fn axis_means(x: ArrayView2<'_, f64>) -> Array1<f64> {
    x.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(x.ncols()))
}
