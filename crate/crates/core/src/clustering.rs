//! Spatial clustering of tokens.
//!
//! Clusters are computed once, on the first pruned step, from the standardized
//! relative noise plus a row/column positional encoding. The resulting
//! [`ClusterModel`] is frozen and reused for every later step; only the pooled
//! cluster scores are recomputed.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{invalid, Result};
use crate::grid::{rank_desc, TokenGrid};

/// Row/column positional encoding over an `h x w` lattice with `d` channels.
///
/// The first `d / 2` channels of token `i * w + j` hold `i / h`, the rest hold
/// `j / w`.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalEncoding {
    height: usize,
    width: usize,
    dim: usize,
    values: Vec<f64>,
}

impl PositionalEncoding {
    pub fn new(height: usize, width: usize, dim: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return invalid("positional encoding needs a non-empty grid");
        }
        if dim == 0 || dim % 2 != 0 {
            return invalid(format!("positional encoding needs an even dimension, got {dim}"));
        }
        let half = dim / 2;
        let mut values = Vec::with_capacity(height * width * dim);
        for i in 0..height {
            for j in 0..width {
                let row = i as f64 / height as f64;
                let col = j as f64 / width as f64;
                values.extend(std::iter::repeat_n(row, half));
                values.extend(std::iter::repeat_n(col, half));
            }
        }
        Ok(Self {
            height,
            width,
            dim,
            values,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.dim..(t + 1) * self.dim]
    }
}

/// Row-major `rows x dim` matrix of clustering features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || dim == 0 || data.len() != rows * dim {
            return invalid(format!(
                "feature matrix {rows}x{dim} cannot hold {} values",
                data.len()
            ));
        }
        Ok(Self { rows, dim, data })
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.dim..(r + 1) * self.dim]
    }
}

/// `standardize(rn) + pos_weight * pe`.
///
/// Each channel of `rn` is divided by its population standard deviation over
/// tokens; zero-variance channels are left as they are.
pub fn build_features(
    rn: &TokenGrid,
    pe: &PositionalEncoding,
    pos_weight: f64,
) -> Result<FeatureMatrix> {
    if rn.channels() != pe.dim() || (rn.height(), rn.width()) != pe.dims() {
        return invalid(format!(
            "relative noise {:?} does not match positional encoding {:?}x{}",
            rn.shape(),
            pe.dims(),
            pe.dim()
        ));
    }
    let (n, d) = (rn.token_count(), rn.channels());
    let mut scale = vec![1.0; d];
    for (c, s) in scale.iter_mut().enumerate() {
        let mean = (0..n).map(|t| rn.get(t, c)).sum::<f64>() / n as f64;
        let var = (0..n).map(|t| (rn.get(t, c) - mean).powi(2)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        if std > 0.0 {
            *s = std;
        }
    }
    let mut data = Vec::with_capacity(n * d);
    for t in 0..n {
        let pos = pe.row(t);
        for c in 0..d {
            data.push(rn.get(t, c) / scale[c] + pos_weight * pos[c]);
        }
    }
    FeatureMatrix::new(n, d, data)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Outcome of a k-means run.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub k: usize,
    pub assignment: Vec<usize>,
    /// `k x dim`, row-major.
    pub centroids: Vec<f64>,
    /// Inertia after each Lloyd iteration.
    pub inertia_history: Vec<f64>,
    pub converged: bool,
}

impl KMeansFit {
    pub fn centroid(&self, c: usize, dim: usize) -> &[f64] {
        &self.centroids[c * dim..(c + 1) * dim]
    }

    pub fn inertia(&self) -> f64 {
        self.inertia_history.last().copied().unwrap_or(0.0)
    }
}

/// Nearest centroid for each row; ties go to the lower cluster id.
pub fn assign_nearest(features: &FeatureMatrix, centroids: &[f64], k: usize) -> Vec<usize> {
    let dim = features.dim;
    (0..features.rows)
        .into_par_iter()
        .map(|r| {
            let row = features.row(r);
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let d = sq_dist(row, &centroids[c * dim..(c + 1) * dim]);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            best
        })
        .collect()
}

pub fn inertia(features: &FeatureMatrix, assignment: &[usize], centroids: &[f64]) -> f64 {
    let dim = features.dim;
    assignment
        .iter()
        .enumerate()
        .map(|(r, &c)| sq_dist(features.row(r), &centroids[c * dim..(c + 1) * dim]))
        .sum()
}

fn kmeans_pp_init(features: &FeatureMatrix, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (n, dim) = (features.rows, features.dim);
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = features.row(first).to_vec();
    let mut dist: Vec<f64> = (0..n)
        .map(|r| sq_dist(features.row(r), features.row(first)))
        .collect();
    while centroids.len() < k * dim {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (r, &d) in dist.iter().enumerate() {
                acc += d;
                if d > 0.0 && acc > target {
                    pick = Some(r);
                    break;
                }
            }
            // rounding can leave `target` past the final partial sum
            pick.unwrap_or_else(|| dist.iter().rposition(|&d| d > 0.0).unwrap())
        } else {
            // every remaining point duplicates a centroid
            (0..n).find(|&r| !chosen[r]).unwrap()
        };
        chosen[pick] = true;
        let row = features.row(pick);
        centroids.extend_from_slice(row);
        for (r, d) in dist.iter_mut().enumerate() {
            *d = d.min(sq_dist(features.row(r), row));
        }
    }
    centroids
}

fn update_centroids(features: &FeatureMatrix, assignment: &[usize], k: usize) -> (Vec<f64>, Vec<usize>) {
    let dim = features.dim;
    let mut sums = vec![0.0; k * dim];
    let mut counts = vec![0usize; k];
    for (r, &c) in assignment.iter().enumerate() {
        counts[c] += 1;
        for (s, v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(features.row(r)) {
            *s += v;
        }
    }
    for c in 0..k {
        if counts[c] > 0 {
            for s in &mut sums[c * dim..(c + 1) * dim] {
                *s /= counts[c] as f64;
            }
        }
    }
    (sums, counts)
}

/// Moves the point farthest from its centroid into each empty cluster.
/// Donor clusters always keep at least one member.
fn repair_empty(
    features: &FeatureMatrix,
    assignment: &mut [usize],
    centroids: &mut Vec<f64>,
    counts: &mut Vec<usize>,
    k: usize,
) {
    let dim = features.dim;
    while let Some(empty) = counts.iter().position(|&c| c == 0) {
        let mut far = None;
        let mut far_d = -1.0;
        for (r, &c) in assignment.iter().enumerate() {
            if counts[c] < 2 {
                continue;
            }
            let d = sq_dist(features.row(r), &centroids[c * dim..(c + 1) * dim]);
            if d > far_d {
                far_d = d;
                far = Some(r);
            }
        }
        let r = far.expect("k <= rows guarantees a donor");
        assignment[r] = empty;
        let (c, n) = update_centroids(features, assignment, k);
        *centroids = c;
        *counts = n;
    }
}

/// Lloyd's algorithm with k-means++ seeding and L2 distance.
///
/// Stops when an assignment step changes nothing or after `max_iters`
/// iterations. Inertia is non-increasing across iterations.
pub fn kmeans(
    features: &FeatureMatrix,
    k: usize,
    rng: &mut ChaCha8Rng,
    max_iters: usize,
) -> Result<KMeansFit> {
    if k == 0 || k > features.rows {
        return invalid(format!("cannot form {k} clusters from {} points", features.rows));
    }
    if max_iters == 0 {
        return invalid("max_iters must be >= 1");
    }
    let mut centroids = kmeans_pp_init(features, k, rng);
    let mut assignment: Vec<usize> = Vec::new();
    let mut history = Vec::new();
    let mut converged = false;
    for _ in 0..max_iters {
        let next = assign_nearest(features, &centroids, k);
        if next == assignment {
            converged = true;
            break;
        }
        assignment = next;
        let (c, mut counts) = update_centroids(features, &assignment, k);
        centroids = c;
        repair_empty(features, &mut assignment, &mut centroids, &mut counts, k);
        history.push(inertia(features, &assignment, &centroids));
    }
    if !converged {
        converged = assign_nearest(features, &centroids, k) == assignment;
    }
    Ok(KMeansFit {
        k,
        assignment,
        centroids,
        inertia_history: history,
        converged,
    })
}

/// Symmetric, irreflexive `k x k` relation between clusters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adjacency {
    k: usize,
    cells: Vec<bool>,
}

impl Adjacency {
    pub fn is_adjacent(&self, a: usize, b: usize) -> bool {
        self.cells[a * self.k + b]
    }

    pub fn neighbors(&self, c: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.k).filter(move |&o| self.cells[c * self.k + o])
    }

    pub fn edge_count(&self) -> usize {
        self.cells.iter().filter(|&&b| b).count() / 2
    }
}

/// Clusters `a != b` are adjacent when some token of `a` is a 4-neighbour of
/// some token of `b`.
pub fn cluster_adjacency(assignment: &[usize], k: usize, height: usize, width: usize) -> Adjacency {
    let mut cells = vec![false; k * k];
    let mut link = |a: usize, b: usize| {
        if a != b {
            cells[a * k + b] = true;
            cells[b * k + a] = true;
        }
    };
    for i in 0..height {
        for j in 0..width {
            let here = assignment[i * width + j];
            if j + 1 < width {
                link(here, assignment[i * width + j + 1]);
            }
            if i + 1 < height {
                link(here, assignment[(i + 1) * width + j]);
            }
        }
    }
    Adjacency { k, cells }
}

/// Frozen spatial partition of the token lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub k: usize,
    pub height: usize,
    pub width: usize,
    pub assignment: Vec<usize>,
    pub centroids: Vec<f64>,
    pub adjacency: Adjacency,
    /// Member tokens of each cluster, ascending.
    pub members: Vec<Vec<usize>>,
    pub frozen_at: usize,
    pub inertia_history: Vec<f64>,
}

impl ClusterModel {
    pub fn from_assignment(
        assignment: Vec<usize>,
        k: usize,
        height: usize,
        width: usize,
        centroids: Vec<f64>,
        frozen_at: usize,
    ) -> Result<Self> {
        if assignment.len() != height * width {
            return invalid("assignment length must equal token count");
        }
        let mut members = vec![Vec::new(); k];
        for (t, &c) in assignment.iter().enumerate() {
            if c >= k {
                return invalid(format!("cluster id {c} out of range 0..{k}"));
            }
            members[c].push(t);
        }
        if let Some(c) = members.iter().position(Vec::is_empty) {
            return invalid(format!("cluster {c} is empty"));
        }
        let adjacency = cluster_adjacency(&assignment, k, height, width);
        Ok(Self {
            k,
            height,
            width,
            assignment,
            centroids,
            adjacency,
            members,
            frozen_at,
            inertia_history: Vec::new(),
        })
    }

    /// Clusters `rn + pos_weight * pe` with k-means and freezes the result.
    pub fn fit(
        rn: &TokenGrid,
        pe: &PositionalEncoding,
        pos_weight: f64,
        k: usize,
        rng: &mut ChaCha8Rng,
        max_iters: usize,
        frozen_at: usize,
    ) -> Result<Self> {
        let features = build_features(rn, pe, pos_weight)?;
        let fit = kmeans(&features, k, rng, max_iters)?;
        let mut model = Self::from_assignment(
            fit.assignment,
            k,
            rn.height(),
            rn.width(),
            fit.centroids,
            frozen_at,
        )?;
        model.inertia_history = fit.inertia_history;
        Ok(model)
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.members.iter().map(Vec::len).collect()
    }
}

/// One non-trainable neighbour-averaging pass over the cluster graph.
///
/// `raw[c]` is the mean feature norm of the members of `c`; the score mixes it
/// with the mean raw value of adjacent clusters by `neighbor_mix`.
pub fn graph_pool(model: &ClusterModel, features: &FeatureMatrix, neighbor_mix: f64) -> Vec<f64> {
    let raw: Vec<f64> = model
        .members
        .iter()
        .map(|m| {
            m.iter()
                .map(|&t| features.row(t).iter().map(|v| v * v).sum::<f64>().sqrt())
                .sum::<f64>()
                / m.len() as f64
        })
        .collect();
    (0..model.k)
        .map(|c| {
            let (sum, count) = model
                .adjacency
                .neighbors(c)
                .fold((0.0, 0usize), |(s, n), o| (s + raw[o], n + 1));
            if count == 0 {
                raw[c]
            } else {
                (1.0 - neighbor_mix) * raw[c] + neighbor_mix * sum / count as f64
            }
        })
        .collect()
}

/// The `m` best-scored cluster ids, best first; ties go to the lower id.
pub fn top_clusters(scores: &[f64], m: usize) -> Result<Vec<usize>> {
    if m == 0 || m > scores.len() {
        return invalid(format!("cannot take {m} of {} clusters", scores.len()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| rank_desc(scores, a, b));
    order.truncate(m);
    Ok(order)
}
