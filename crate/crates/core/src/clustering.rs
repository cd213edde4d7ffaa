//! Minority-class structure: a fuzzy kNN graph, a 2-D force layout over
//! it, k-means on the layout, and per-cluster synthetic quotas.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::apportion::largest_remainder;
use crate::numeric::{Prng, Tensor};

#[derive(Debug, Error)]
pub enum ClusteringError {
    #[error("need more points than neighbors: n = {n}, k = {k}")]
    TooFewPoints { n: usize, k: usize },
    #[error("neighbor count must be at least 2, got {0}")]
    NeighborCount(usize),
    #[error("cannot form {k} clusters from {n} points")]
    TooFewForClusters { n: usize, k: usize },
    #[error("non-finite coordinate in input row {0}")]
    NonFinite(usize),
    #[error("csv export: {0}")]
    Io(#[from] std::io::Error),
}

/// Symmetric fuzzy neighbor graph.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborGraph {
    /// Per point, its `k` nearest other points as `(index, distance)`,
    /// nearest first.
    pub neighbors: Vec<Vec<(usize, f64)>>,
    /// Distance to the nearest neighbor.
    pub rho: Vec<f64>,
    /// Smoothing bandwidth.
    pub sigma: Vec<f64>,
    /// Undirected edges `(i, j, w)` with `i < j` and `w ∈ (0, 1]`, sorted.
    pub edges: Vec<(usize, usize, f64)>,
}

impl NeighborGraph {
    pub fn len(&self) -> usize {
        self.rho.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rho.is_empty()
    }

    /// Symmetric weight of the pair, 0 when there is no edge.
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        let key = (i.min(j), i.max(j));
        self.edges
            .binary_search_by(|e| (e.0, e.1).cmp(&key))
            .map(|p| self.edges[p].2)
            .unwrap_or(0.0)
    }

    /// Membership of `j` in `i`'s local fuzzy set, before symmetrization.
    pub fn directed_weight(&self, i: usize, j: usize) -> f64 {
        self.neighbors[i]
            .iter()
            .find(|(n, _)| *n == j)
            .map(|&(_, d)| membership(d, self.rho[i], self.sigma[i]))
            .unwrap_or(0.0)
    }
}

fn membership(d: f64, rho: f64, sigma: f64) -> f64 {
    (-(d - rho).max(0.0) / sigma).exp()
}

/// Probabilistic union of two directed memberships.
pub fn fuzzy_union(a: f64, b: f64) -> f64 {
    a + b - a * b
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Brute-force kNN graph with per-point bandwidths calibrated so each
/// point's memberships sum to `log₂ k`.
pub fn knn_fuzzy_graph(x: &Tensor, k: usize) -> Result<NeighborGraph, ClusteringError> {
    let n = x.rows();
    if k < 2 {
        return Err(ClusteringError::NeighborCount(k));
    }
    if k >= n {
        return Err(ClusteringError::TooFewPoints { n, k });
    }
    if let Some(r) = (0..n).find(|&r| x.row(r).iter().any(|v| !v.is_finite())) {
        return Err(ClusteringError::NonFinite(r));
    }
    let target = (k as f64).log2();
    let mut neighbors = Vec::with_capacity(n);
    let mut rho = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    for i in 0..n {
        let mut dists: Vec<(usize, f64)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (j, squared_distance(x.row(i), x.row(j)).sqrt()))
            .collect();
        dists.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        dists.truncate(k);
        let r = dists[0].1;
        rho.push(r);
        sigma.push(calibrate_sigma(&dists, r, target));
        neighbors.push(dists);
    }

    let mut directed: Vec<(usize, usize, f64)> = Vec::with_capacity(n * k);
    for (i, list) in neighbors.iter().enumerate() {
        for &(j, d) in list {
            directed.push((i, j, membership(d, rho[i], sigma[i])));
        }
    }
    let mut pairs: std::collections::BTreeMap<(usize, usize), (f64, f64)> = Default::default();
    for (i, j, w) in directed {
        let entry = pairs.entry((i.min(j), i.max(j))).or_insert((0.0, 0.0));
        if i < j {
            entry.0 = w;
        } else {
            entry.1 = w;
        }
    }
    let edges = pairs
        .into_iter()
        .map(|((i, j), (a, b))| (i, j, fuzzy_union(a, b)))
        .filter(|e| e.2 > 0.0)
        .collect();
    Ok(NeighborGraph {
        neighbors,
        rho,
        sigma,
        edges,
    })
}

/// Bisection on `σ` so that `Σ exp(−max(0, d − ρ)/σ) = target`.
fn calibrate_sigma(dists: &[(usize, f64)], rho: f64, target: f64) -> f64 {
    let total = |s: f64| -> f64 { dists.iter().map(|&(_, d)| membership(d, rho, s)).sum() };
    let (mut lo, mut hi, mut mid) = (0.0, f64::INFINITY, 1.0);
    for _ in 0..200 {
        let v = total(mid);
        if (v - target).abs() < 1e-9 {
            break;
        }
        if v > target {
            hi = mid;
            mid = (lo + hi) / 2.0;
        } else {
            lo = mid;
            mid = if hi.is_infinite() { mid * 2.0 } else { (lo + hi) / 2.0 };
        }
        if mid == 0.0 || !mid.is_finite() {
            break;
        }
    }
    mid.max(f64::MIN_POSITIVE)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayoutConfig {
    pub epochs: usize,
    pub negative_samples: usize,
    /// Curve `1 / (1 + a·r^(2b))`; defaults fit a minimum distance of 0.1.
    pub a: f64,
    pub b: f64,
    pub init_std: f64,
}

impl Default for LayoutConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            negative_samples: 5,
            a: 1.577,
            b: 0.895,
            init_std: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding2D {
    /// `n × 2`.
    pub coords: Tensor,
    pub config: LayoutConfig,
}

const GRAD_CLIP: f64 = 4.0;

fn clip(v: f64) -> f64 {
    v.clamp(-GRAD_CLIP, GRAD_CLIP)
}

/// Stochastic layout: each epoch samples every edge with probability
/// `w / max w`, pulls its endpoints together, and pushes the head away from
/// uniformly drawn points. The step size falls linearly from 1 to 0.
pub fn optimize_layout(graph: &NeighborGraph, config: &LayoutConfig, rng: &mut Prng) -> Embedding2D {
    let n = graph.len();
    let mut y: Vec<[f64; 2]> = (0..n)
        .map(|_| {
            [
                config.init_std * rng.next_gaussian(),
                config.init_std * rng.next_gaussian(),
            ]
        })
        .collect();
    let (a, b) = (config.a, config.b);
    let w_max = graph.edges.iter().map(|e| e.2).fold(0.0, f64::max);
    for epoch in 0..config.epochs {
        let lr = 1.0 - epoch as f64 / config.epochs as f64;
        for &(i, j, w) in &graph.edges {
            if rng.next_f64() >= w / w_max {
                continue;
            }
            let d2 = dist2(&y[i], &y[j]);
            if d2 > 0.0 {
                let coef = -2.0 * a * b * d2.powf(b - 1.0) / (a * d2.powf(b) + 1.0);
                for dim in 0..2 {
                    let g = clip(coef * (y[i][dim] - y[j][dim]));
                    y[i][dim] += g * lr;
                    y[j][dim] -= g * lr;
                }
            }
            for _ in 0..config.negative_samples {
                let other = rng.below(n);
                if other == i {
                    continue;
                }
                let d2 = dist2(&y[i], &y[other]);
                for dim in 0..2 {
                    let g = if d2 > 0.0 {
                        let coef = 2.0 * b / ((0.001 + d2) * (a * d2.powf(b) + 1.0));
                        clip(coef * (y[i][dim] - y[other][dim]))
                    } else {
                        GRAD_CLIP
                    };
                    y[i][dim] += g * lr;
                }
            }
        }
    }
    let data = y.into_iter().flatten().collect();
    Embedding2D {
        coords: Tensor::matrix(n, 2, data).expect("n × 2"),
        config: *config,
    }
}

fn dist2(p: &[f64; 2], q: &[f64; 2]) -> f64 {
    (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    /// Cluster of each point, `0 … k−1`.
    pub labels: Vec<usize>,
    /// `k × dim`.
    pub centroids: Tensor,
    pub inertia: f64,
    pub iterations: usize,
    /// Inertia after each centroid update of the winning restart.
    pub inertia_trace: Vec<f64>,
}

const MAX_LLOYD_ITERATIONS: usize = 300;

/// k-means++ seeding and Lloyd iterations, best of `restarts` runs by
/// inertia (earliest run wins ties).
pub fn kmeans(
    points: &Tensor,
    k: usize,
    restarts: usize,
    rng: &mut Prng,
) -> Result<KMeansResult, ClusteringError> {
    let n = points.rows();
    if k == 0 || n < k {
        return Err(ClusteringError::TooFewForClusters { n, k });
    }
    let mut best: Option<KMeansResult> = None;
    for _ in 0..restarts.max(1) {
        let run = lloyd(points, seed_centroids(points, k, rng));
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn seed_centroids(points: &Tensor, k: usize, rng: &mut Prng) -> Vec<usize> {
    let n = points.rows();
    let mut chosen = vec![rng.below(n)];
    let mut d2: Vec<f64> = (0..n)
        .map(|i| squared_distance(points.row(i), points.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.next_f64() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            // rounding can leave u ≥ 0 past the end; fall back to the last
            // positive-weight point
            if d2[pick] == 0.0 {
                pick = (0..n).rev().find(|&i| d2[i] > 0.0).expect("positive mass");
            }
            pick
        } else {
            // every point coincides with a chosen center
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.below(free.len())]
        };
        chosen.push(next);
        for (i, slot) in d2.iter_mut().enumerate() {
            *slot = slot.min(squared_distance(points.row(i), points.row(next)));
        }
    }
    chosen
}

fn lloyd(points: &Tensor, seeds: Vec<usize>) -> KMeansResult {
    let (n, dim, k) = (points.rows(), points.cols(), seeds.len());
    let mut centroids: Vec<Vec<f64>> = seeds.iter().map(|&i| points.row(i).to_vec()).collect();
    let mut labels = vec![usize::MAX; n];
    let mut trace = Vec::new();
    let mut iterations = 0;
    for _ in 0..MAX_LLOYD_ITERATIONS {
        iterations += 1;
        let mut changed = false;
        for i in 0..n {
            let nearest = nearest_centroid(points.row(i), &centroids).0;
            if labels[i] != nearest {
                labels[i] = nearest;
                changed = true;
            }
        }
        repair_empty(points, &mut labels, &centroids, k);
        centroids = means(points, &labels, k, dim);
        trace.push(inertia(points, &labels, &centroids));
        if !changed {
            break;
        }
    }
    let inertia = *trace.last().expect("one iteration");
    KMeansResult {
        labels,
        centroids: Tensor::matrix(k, dim, centroids.into_iter().flatten().collect())
            .expect("k × dim"),
        inertia,
        iterations,
        inertia_trace: trace,
    }
}

fn nearest_centroid(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centre) in centroids.iter().enumerate() {
        let d = squared_distance(p, centre);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Gives each empty cluster the point of the currently largest cluster
/// that lies farthest from that cluster's centroid.
fn repair_empty(points: &Tensor, labels: &mut [usize], centroids: &[Vec<f64>], k: usize) {
    loop {
        let mut sizes = vec![0usize; k];
        for &l in labels.iter() {
            sizes[l] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let largest = (0..k).max_by_key(|&c| (sizes[c], std::cmp::Reverse(c))).expect("k > 0");
        let far = (0..labels.len())
            .filter(|&i| labels[i] == largest)
            .max_by(|&a, &b| {
                let da = squared_distance(points.row(a), &centroids[largest]);
                let db = squared_distance(points.row(b), &centroids[largest]);
                da.total_cmp(&db).then(b.cmp(&a))
            })
            .expect("largest cluster is nonempty");
        labels[far] = empty;
    }
}

fn means(points: &Tensor, labels: &[usize], k: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for (s, v) in sums[l].iter_mut().zip(points.row(i)) {
            *s += v;
        }
    }
    for (s, c) in sums.iter_mut().zip(counts) {
        for v in s.iter_mut() {
            *v /= c as f64;
        }
    }
    sums
}

fn inertia(points: &Tensor, labels: &[usize], centroids: &[Vec<f64>]) -> f64 {
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| squared_distance(points.row(i), &centroids[l]))
        .sum()
}

/// Per-cluster synthetic counts: `round(m·|X_k|/n)`, replaced by the
/// largest-remainder split when the rounded counts do not sum to `m`.
pub fn allocate_quotas(m: usize, sizes: &[usize]) -> Vec<usize> {
    let n: usize = sizes.iter().sum();
    if n == 0 {
        return vec![0; sizes.len()];
    }
    let rounded: Vec<usize> = sizes
        .iter()
        .map(|&s| (m as f64 * s as f64 / n as f64).round() as usize)
        .collect();
    if rounded.iter().sum::<usize>() == m {
        return rounded;
    }
    let weights: Vec<f64> = sizes.iter().map(|&s| s as f64).collect();
    largest_remainder(m, &weights)
}

/// Adjusted Rand index of two labelings of the same points.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings differ in length");
    let n = a.len();
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0u64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let pairs = |c: u64| (c * c.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.iter().flatten().map(|&c| pairs(c)).sum();
    let rows: f64 = table.iter().map(|r| pairs(r.iter().sum())).sum();
    let cols: f64 = (0..kb)
        .map(|j| pairs(table.iter().map(|r| r[j]).sum()))
        .sum();
    let total = pairs(n as u64);
    let expected = rows * cols / total;
    let max = (rows + cols) / 2.0;
    if max == expected {
        // both labelings trivial (one cluster, or all singletons)
        return 1.0;
    }
    (index - expected) / (max - expected)
}

/// Mean silhouette coefficient; points in singleton clusters score 0.
pub fn silhouette_score(points: &Tensor, labels: &[usize]) -> f64 {
    let n = points.rows();
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut total = 0.0;
    for i in 0..n {
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for j in 0..n {
            if i != j {
                sums[labels[j]] += squared_distance(points.row(i), points.row(j)).sqrt();
                counts[labels[j]] += 1;
            }
        }
        let own = labels[i];
        if counts[own] == 0 {
            continue;
        }
        let a = sums[own] / counts[own] as f64;
        let b = (0..k)
            .filter(|&c| c != own && counts[c] > 0)
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        if b.is_finite() {
            total += (b - a) / a.max(b);
        }
    }
    total / n as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub clusters: usize,
    pub neighbors: usize,
    pub layout: LayoutConfig,
    pub restarts: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            clusters: 3,
            neighbors: 15,
            layout: LayoutConfig::default(),
            restarts: 10,
        }
    }
}

/// Cluster structure of the minority rows plus the layout it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterPlan {
    pub labels: Vec<usize>,
    /// `clusters × 2`, in layout coordinates.
    pub centroids: Tensor,
    pub members: Vec<Vec<usize>>,
    pub layout: Embedding2D,
}

impl ClusterPlan {
    pub fn sizes(&self) -> Vec<usize> {
        self.members.iter().map(Vec::len).collect()
    }

    /// Writes `row,cluster,x,y`, with clusters numbered from 1.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<(), ClusteringError> {
        writeln!(out, "row,cluster,x,y")?;
        for (i, &l) in self.labels.iter().enumerate() {
            let p = self.layout.coords.row(i);
            writeln!(out, "{i},{},{},{}", l + 1, p[0], p[1])?;
        }
        Ok(())
    }
}

/// Graph → layout → k-means on the given minority rows.
pub fn cluster_minority(
    x: &Tensor,
    config: &ClusterConfig,
    rng: &mut Prng,
) -> Result<ClusterPlan, ClusteringError> {
    let n = x.rows();
    if n < config.clusters {
        return Err(ClusteringError::TooFewForClusters {
            n,
            k: config.clusters,
        });
    }
    let graph = knn_fuzzy_graph(x, config.neighbors.min(n - 1))?;
    let layout = optimize_layout(&graph, &config.layout, rng);
    let km = kmeans(&layout.coords, config.clusters, config.restarts, rng)?;
    let mut members = vec![Vec::new(); config.clusters];
    for (i, &l) in km.labels.iter().enumerate() {
        members[l].push(i);
    }
    Ok(ClusterPlan {
        labels: km.labels,
        centroids: km.centroids,
        members,
        layout,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(per: usize, centers: &[Vec<f64>], std: f64, rng: &mut Prng) -> (Tensor, Vec<usize>) {
        let dim = centers[0].len();
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (c, centre) in centers.iter().enumerate() {
            for _ in 0..per {
                data.extend(centre.iter().map(|m| m + std * rng.next_gaussian()));
                labels.push(c);
            }
        }
        (Tensor::matrix(per * centers.len(), dim, data).unwrap(), labels)
    }

    #[test]
    fn union_of_memberships() {
        assert_eq!(fuzzy_union(1.0, 0.0), 1.0);
        assert_eq!(fuzzy_union(0.5, 0.5), 0.75);
    }

    #[test]
    fn bandwidth_hits_target() {
        let mut rng = Prng::new(1);
        let x = Tensor::matrix(40, 3, rng.gaussian_vec(120)).unwrap();
        let k = 6;
        let g = knn_fuzzy_graph(&x, k).unwrap();
        for i in 0..40 {
            let s: f64 = g.neighbors[i]
                .iter()
                .map(|&(_, d)| membership(d, g.rho[i], g.sigma[i]))
                .sum();
            assert!((s - (k as f64).log2()).abs() < 1e-5, "point {i}: {s}");
            assert_eq!(g.rho[i], g.neighbors[i][0].1);
        }
    }

    #[test]
    fn weights_are_symmetric_unions() {
        let mut rng = Prng::new(2);
        let x = Tensor::matrix(30, 2, rng.gaussian_vec(60)).unwrap();
        let g = knn_fuzzy_graph(&x, 4).unwrap();
        for &(i, j, w) in &g.edges {
            assert!(i < j && w > 0.0 && w <= 1.0);
            assert_eq!(g.weight(i, j), g.weight(j, i));
            let expect = fuzzy_union(g.directed_weight(i, j), g.directed_weight(j, i));
            assert!((w - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn separated_blobs_share_no_strong_edges() {
        let mut rng = Prng::new(3);
        let (x, labels) = blobs(10, &[vec![0.0, 0.0], vec![50.0, 50.0]], 1.0, &mut rng);
        let g = knn_fuzzy_graph(&x, 3).unwrap();
        for &(i, j, w) in &g.edges {
            if labels[i] != labels[j] {
                assert!(w <= 0.01);
            }
        }
    }

    #[test]
    fn duplicates_allowed_and_k_checked() {
        let x = Tensor::matrix(4, 1, vec![0.0, 0.0, 0.0, 1.0]).unwrap();
        let g = knn_fuzzy_graph(&x, 2).unwrap();
        assert_eq!(g.rho[0], 0.0);
        assert!(g.sigma.iter().all(|s| s.is_finite() && *s > 0.0));
        assert!(matches!(
            knn_fuzzy_graph(&x, 4),
            Err(ClusteringError::TooFewPoints { .. })
        ));
        assert!(knn_fuzzy_graph(&x, 1).is_err());
    }

    #[test]
    fn lone_point_stays_at_init() {
        let g = NeighborGraph {
            neighbors: vec![vec![]],
            rho: vec![0.0],
            sigma: vec![1.0],
            edges: vec![],
        };
        let cfg = LayoutConfig::default();
        let out = optimize_layout(&g, &cfg, &mut Prng::new(5));
        let mut rng = Prng::new(5);
        let init = [10.0 * rng.next_gaussian(), 10.0 * rng.next_gaussian()];
        assert_eq!(out.coords.row(0), init.as_slice());
    }

    #[test]
    fn layout_is_deterministic() {
        let mut rng = Prng::new(4);
        let (x, _) = blobs(15, &[vec![0.0; 4], vec![8.0; 4]], 1.0, &mut rng);
        let g = knn_fuzzy_graph(&x, 5).unwrap();
        let cfg = LayoutConfig {
            epochs: 50,
            ..LayoutConfig::default()
        };
        let a = optimize_layout(&g, &cfg, &mut Prng::new(9));
        let b = optimize_layout(&g, &cfg, &mut Prng::new(9));
        assert_eq!(a, b);
        assert!(a.coords.is_finite());
    }

    #[test]
    fn kmeans_recovers_blobs() {
        let mut rng = Prng::new(6);
        let centers = vec![vec![0.0, 0.0], vec![20.0, 0.0], vec![0.0, 20.0]];
        let (x, truth) = blobs(30, &centers, 1.0, &mut rng);
        let km = kmeans(&x, 3, 1, &mut Prng::new(1)).unwrap();
        assert_eq!(adjusted_rand_index(&km.labels, &truth), 1.0);
        for w in km.inertia_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-9);
        }
    }

    #[test]
    fn kmeans_singletons() {
        let x = Tensor::matrix(3, 2, vec![0.0, 0.0, 1.0, 0.0, 5.0, 5.0]).unwrap();
        let km = kmeans(&x, 3, 1, &mut Prng::new(2)).unwrap();
        assert_eq!(km.inertia, 0.0);
        let mut l = km.labels.clone();
        l.sort();
        assert_eq!(l, vec![0, 1, 2]);
        assert!(kmeans(&x, 4, 1, &mut Prng::new(2)).is_err());
    }

    #[test]
    fn kmeans_on_duplicates_is_deterministic_and_nonempty() {
        let x = Tensor::filled(6, 2, 1.0);
        let a = kmeans(&x, 3, 2, &mut Prng::new(3)).unwrap();
        let b = kmeans(&x, 3, 2, &mut Prng::new(3)).unwrap();
        assert_eq!(a, b);
        for c in 0..3 {
            assert!(a.labels.contains(&c));
        }
    }

    #[test]
    fn quota_examples() {
        assert_eq!(allocate_quotas(300, &[150, 100, 50]), vec![150, 100, 50]);
        assert_eq!(allocate_quotas(10, &[2, 1, 1]), vec![5, 3, 2]);
        assert_eq!(allocate_quotas(0, &[2, 1, 1]), vec![0, 0, 0]);
    }

    #[test]
    fn ari_reference_values() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]), 1.0);
        // sklearn: adjusted_rand_score([0,0,1,1],[0,0,1,2]) = 0.5714285714285715
        let v = adjusted_rand_index(&[0, 0, 1, 1], &[0, 0, 1, 2]);
        assert!((v - 4.0 / 7.0).abs() < 1e-12);
        // pairs: index 2, rows 6, cols 3, total 15 → (2 − 1.2) / (4.5 − 1.2)
        let v = adjusted_rand_index(&[0, 0, 0, 1, 1, 1], &[0, 1, 0, 1, 2, 2]);
        assert!((v - 8.0 / 33.0).abs() < 1e-12, "{v}");
    }

    #[test]
    fn silhouette_of_tight_pairs() {
        // each point: a = 1, b = mean distance to the other pair
        let x = Tensor::matrix(4, 1, vec![0.0, 1.0, 10.0, 11.0]).unwrap();
        let s = silhouette_score(&x, &[0, 0, 1, 1]);
        let per = [
            (10.5 - 1.0) / 10.5,
            (9.5 - 1.0) / 9.5,
            (9.5 - 1.0) / 9.5,
            (10.5 - 1.0) / 10.5,
        ];
        assert!((s - per.iter().sum::<f64>() / 4.0).abs() < 1e-12);
    }

    #[test]
    fn csv_export_numbers_clusters_from_one() {
        let plan = ClusterPlan {
            labels: vec![0, 2],
            centroids: Tensor::zeros(3, 2),
            members: vec![vec![0], vec![], vec![1]],
            layout: Embedding2D {
                coords: Tensor::matrix(2, 2, vec![0.5, 1.0, -2.0, 3.0]).unwrap(),
                config: LayoutConfig::default(),
            },
        };
        let mut buf = Vec::new();
        plan.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "row,cluster,x,y\n0,1,0.5,1\n1,3,-2,3\n"
        );
    }
}
