//! Token lattice types and the elementary numeric primitives shared by the
//! pipeline.
//!
//! Tokens are flattened row-major: cell `(i, j)` of an `h x w` lattice has
//! index `i * w + j`. Every module relies on this ordering.

use std::cmp::Ordering;

use crate::error::{invalid, Result};

/// An `h x w` lattice of tokens, each carrying `d` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl TokenGrid {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return invalid(format!(
                "grid dimensions must be positive, got {height}x{width}x{channels}"
            ));
        }
        let expected = height * width * channels;
        if data.len() != expected {
            return invalid(format!(
                "grid {height}x{width}x{channels} needs {expected} values, got {}",
                data.len()
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return invalid(format!("non-finite value at flat offset {pos}"));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Result<Self> {
        Self::new(height, width, channels, vec![0.0; height * width * channels])
    }

    /// Builds a grid by evaluating `f(token, channel)` for every cell.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for t in 0..height * width {
            for c in 0..channels {
                data.push(f(t, c));
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn token_count(&self) -> usize {
        self.height * self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn token(&self, t: usize) -> &[f64] {
        &self.data[t * self.channels..(t + 1) * self.channels]
    }

    pub(crate) fn token_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.data[t * self.channels..(t + 1) * self.channels]
    }

    pub fn get(&self, t: usize, c: usize) -> f64 {
        self.data[t * self.channels + c]
    }

    pub fn same_shape(&self, other: &TokenGrid) -> bool {
        self.shape() == other.shape()
    }

    pub(crate) fn check_same_shape(&self, other: &TokenGrid, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            invalid(format!(
                "{what}: shape mismatch {:?} vs {:?}",
                self.shape(),
                other.shape()
            ))
        }
    }

    /// Element-wise `self - other`.
    pub fn sub(&self, other: &TokenGrid) -> Result<TokenGrid> {
        self.check_same_shape(other, "sub")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        TokenGrid::new(self.height, self.width, self.channels, data)
    }

    pub fn scale(&self, c: f64) -> Result<TokenGrid> {
        TokenGrid::new(
            self.height,
            self.width,
            self.channels,
            self.data.iter().map(|v| v * c).collect(),
        )
    }

    /// `self - dt * rate`, the explicit Euler update used by the sampler.
    pub fn euler_step(&self, rate: &TokenGrid, dt: f64) -> Result<TokenGrid> {
        self.check_same_shape(rate, "euler_step")?;
        let data = self
            .data
            .iter()
            .zip(&rate.data)
            .map(|(x, n)| x - dt * n)
            .collect();
        TokenGrid::new(self.height, self.width, self.channels, data)
    }
}

/// Per-token L2 norm over channels.
pub fn token_norms(grid: &TokenGrid) -> Vec<f64> {
    grid.data
        .chunks_exact(grid.channels)
        .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

/// A strictly ascending, duplicate-free set of token indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct TokenIndexSet(Vec<usize>);

impl TokenIndexSet {
    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn all(universe: usize) -> Self {
        Self((0..universe).collect())
    }

    /// Sorts `indices`; duplicates and out-of-range entries are rejected.
    pub fn from_indices(mut indices: Vec<usize>, universe: usize) -> Result<Self> {
        indices.sort_unstable();
        if let Some(w) = indices.windows(2).find(|w| w[0] == w[1]) {
            return invalid(format!("duplicate token index {}", w[0]));
        }
        if let Some(&last) = indices.last() {
            if last >= universe {
                return invalid(format!("token index {last} out of range 0..{universe}"));
            }
        }
        Ok(Self(indices))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    pub fn contains(&self, t: usize) -> bool {
        self.0.binary_search(&t).is_ok()
    }

    pub fn complement(&self, universe: usize) -> TokenIndexSet {
        let mask = self.to_mask(universe);
        TokenIndexSet(
            mask.iter()
                .enumerate()
                .filter(|(_, &m)| !m)
                .map(|(t, _)| t)
                .collect(),
        )
    }

    pub fn union(&self, other: &TokenIndexSet) -> TokenIndexSet {
        let mut out = Vec::with_capacity(self.len() + other.len());
        let (mut a, mut b) = (self.0.iter().peekable(), other.0.iter().peekable());
        loop {
            match (a.peek(), b.peek()) {
                (Some(&&x), Some(&&y)) => match x.cmp(&y) {
                    Ordering::Less => {
                        out.push(x);
                        a.next();
                    }
                    Ordering::Greater => {
                        out.push(y);
                        b.next();
                    }
                    Ordering::Equal => {
                        out.push(x);
                        a.next();
                        b.next();
                    }
                },
                (Some(&&x), None) => {
                    out.push(x);
                    a.next();
                }
                (None, Some(&&y)) => {
                    out.push(y);
                    b.next();
                }
                (None, None) => break,
            }
        }
        TokenIndexSet(out)
    }

    pub fn is_disjoint(&self, other: &TokenIndexSet) -> bool {
        self.0.iter().all(|&t| !other.contains(t))
    }

    pub fn to_mask(&self, universe: usize) -> Vec<bool> {
        let mut mask = vec![false; universe];
        for &t in &self.0 {
            mask[t] = true;
        }
        mask
    }
}

/// Orders `(score, index)` pairs best-first: higher score, then lower index.
pub(crate) fn rank_desc(scores: &[f64], a: usize, b: usize) -> Ordering {
    scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// Indices of the `m` largest scores, ties broken towards the lowest index.
pub fn top_k_indices(scores: &[f64], m: usize) -> Result<TokenIndexSet> {
    if m > scores.len() {
        return invalid(format!(
            "cannot select {m} of {} scores",
            scores.len()
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    if m < order.len() && m > 0 {
        order.select_nth_unstable_by(m - 1, |&a, &b| rank_desc(scores, a, b));
    }
    order.truncate(m);
    order.sort_unstable();
    Ok(TokenIndexSet(order))
}
