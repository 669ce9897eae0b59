//! Token selection for pruned steps.
//!
//! Tokens are ranked by how far their predicted noise has moved since the
//! last full step (the relative noise), balanced against how recently they
//! were refreshed (an exponentially weighted selection frequency), and
//! grouped by a frozen spatial cluster model.

use serde::{Deserialize, Serialize};

use crate::clustering::{build_features, graph_pool, top_clusters, ClusterModel, PositionalEncoding};
use crate::config::{RunConfig, Strategy};
use crate::error::{invalid, CatError, Result};
use crate::grid::{token_norms, top_k_indices, TokenGrid, TokenIndexSet};
use crate::rng::{SeededRng, KMEANS_INIT};

/// Element-wise `current - reference`.
pub fn relative_noise(current: &TokenGrid, reference: &TokenGrid) -> Result<TokenGrid> {
    current.sub(reference)
}

/// Exponentially weighted selection frequency per token.
///
/// After rounds `0..=n`, `f[j] = sum_i decay^(n-i) * [j selected in round i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyTracker {
    decay: f64,
    freq: Vec<f64>,
    last_selected: Vec<Option<usize>>,
    rounds: usize,
}

impl FrequencyTracker {
    pub fn new(decay: f64, tokens: usize) -> Result<Self> {
        if !(decay > 0.0 && decay < 1.0) {
            return invalid(format!("ewma decay must be in (0, 1), got {decay}"));
        }
        Ok(Self {
            decay,
            freq: vec![0.0; tokens],
            last_selected: vec![None; tokens],
            rounds: 0,
        })
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.freq
    }

    pub fn last_selected(&self) -> &[Option<usize>] {
        &self.last_selected
    }

    pub fn rounds(&self) -> usize {
        self.rounds
    }

    /// Steps since `t` was last selected, as of `step`.
    pub fn staleness(&self, t: usize, step: usize) -> Option<usize> {
        self.last_selected[t].map(|s| step.saturating_sub(s))
    }

    /// `f <- decay * f + 1[selected]`.
    pub fn update(&mut self, selected: &TokenIndexSet, step: usize) {
        for f in &mut self.freq {
            *f *= self.decay;
        }
        for t in selected.iter() {
            self.freq[t] += 1.0;
            self.last_selected[t] = Some(step);
        }
        self.rounds += 1;
    }
}

/// Functional form of [`FrequencyTracker::update`].
pub fn ewma_update(tracker: &FrequencyTracker, selected: &TokenIndexSet, step: usize) -> FrequencyTracker {
    let mut next = tracker.clone();
    next.update(selected, step);
    next
}

/// The `m_stale` tokens outside `exclude` with the lowest frequency.
pub fn stale_candidates(
    tracker: &FrequencyTracker,
    exclude: &TokenIndexSet,
    m_stale: usize,
) -> Result<TokenIndexSet> {
    let n = tracker.freq.len();
    let pool: Vec<usize> = exclude.complement(n).iter().collect();
    if m_stale > pool.len() {
        return invalid(format!(
            "cannot take {m_stale} stale tokens from {} candidates",
            pool.len()
        ));
    }
    let negated: Vec<f64> = pool.iter().map(|&t| -tracker.freq[t]).collect();
    let picks = top_k_indices(&negated, m_stale)?;
    TokenIndexSet::from_indices(picks.iter().map(|i| pool[i]).collect(), n)
}

/// Fractional ranks scaled to `[0, 1]`; tied values share their mean rank.
pub fn rank_normalize(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    if n < 2 {
        return vec![0.0; n];
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let mean = (i + j) as f64 / 2.0;
        for &o in &order[i..=j] {
            ranks[o] = mean / (n - 1) as f64;
        }
        i = j + 1;
    }
    ranks
}

/// Parameters of the cluster-aware selection rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionParams {
    pub alpha: f64,
    pub stale_fraction: f64,
    pub pos_weight: f64,
    pub neighbor_mix: f64,
    pub intra_balance: f64,
    pub cluster_count: usize,
    pub clusters_selected: usize,
    pub kmeans_max_iters: usize,
}

impl SelectionParams {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            alpha: cfg.alpha,
            stale_fraction: cfg.stale_fraction,
            pos_weight: cfg.pos_weight,
            neighbor_mix: cfg.neighbor_mix,
            intra_balance: cfg.intra_balance,
            cluster_count: cfg.cluster_count,
            clusters_selected: cfg.selected_clusters(),
            kmeans_max_iters: cfg.kmeans_max_iters,
        }
    }
}

/// Splits `quota` tokens over clusters in score order.
///
/// The first `selected` clusters share the quota evenly, the remainder going
/// to better-scored clusters. A cluster smaller than its share passes the
/// surplus on to the next cluster in score order. Surplus left after the last
/// cluster fills the remaining room from the best-scored cluster down.
pub fn cluster_quotas(order: &[usize], sizes: &[usize], selected: usize, quota: usize) -> Vec<(usize, usize)> {
    let selected = selected.min(order.len()).max(1);
    let (base, extra) = (quota / selected, quota % selected);
    let mut takes = vec![0usize; order.len()];
    let mut carry = 0;
    for (rank, &c) in order.iter().enumerate() {
        let share = if rank < selected { base + usize::from(rank < extra) } else { 0 };
        let want = share + carry;
        if want == 0 && rank >= selected {
            break;
        }
        takes[rank] = want.min(sizes[c]);
        carry = want - takes[rank];
    }
    for (rank, &c) in order.iter().enumerate() {
        if carry == 0 {
            break;
        }
        let more = carry.min(sizes[c] - takes[rank]);
        takes[rank] += more;
        carry -= more;
    }
    order.iter().zip(takes).filter(|(_, t)| *t > 0).map(|(&c, t)| (c, t)).collect()
}

/// Best `take` members of one cluster by rank-normalized noise norm minus
/// `intra_balance` times rank-normalized frequency.
fn pick_in_cluster(members: &[usize], rn_norms: &[f64], freq: &[f64], intra_balance: f64, take: usize) -> Result<Vec<usize>> {
    let norms: Vec<f64> = members.iter().map(|&t| rn_norms[t]).collect();
    let fs: Vec<f64> = members.iter().map(|&t| freq[t]).collect();
    let scores: Vec<f64> = rank_normalize(&norms)
        .iter()
        .zip(rank_normalize(&fs))
        .map(|(r, f)| r - intra_balance * f)
        .collect();
    Ok(top_k_indices(&scores, take)?.iter().map(|i| members[i]).collect())
}

/// Cluster-aware index selection for pruned step `step`.
///
/// On the first pruned step (`step == t0 + 1`) the cluster model is fitted
/// from the relative noise and stored in `clusters`; later steps require it to
/// be present and reuse it. The first pruned step takes no stale tokens.
#[allow(clippy::too_many_arguments)]
pub fn find_indices(
    step: usize,
    t0: usize,
    current: &TokenGrid,
    reference: &TokenGrid,
    clusters: &mut Option<ClusterModel>,
    tracker: &FrequencyTracker,
    pe: &PositionalEncoding,
    params: &SelectionParams,
    seed: u64,
) -> Result<TokenIndexSet> {
    if step <= t0 {
        return invalid(format!("step {step} is not a pruned step (t0 = {t0})"));
    }
    let rn = relative_noise(current, reference)?;
    let n = rn.token_count();
    let m = crate::config::round_half_up(params.alpha * n as f64);
    let first = step == t0 + 1;
    if first {
        if clusters.is_some() {
            return Err(CatError::State("cluster model is already frozen".into()));
        }
        let mut rng = SeededRng::new(seed).substream(KMEANS_INIT);
        *clusters = Some(ClusterModel::fit(
            &rn,
            pe,
            params.pos_weight,
            params.cluster_count,
            &mut rng,
            params.kmeans_max_iters,
            step,
        )?);
    }
    let model = clusters
        .as_ref()
        .ok_or_else(|| CatError::State(format!("no cluster model at step {step}")))?;
    let m_stale = if first {
        0
    } else {
        crate::config::round_half_up(params.stale_fraction * m as f64)
    };

    let features = build_features(&rn, pe, params.pos_weight)?;
    let scores = graph_pool(model, &features, params.neighbor_mix);
    let order = top_clusters(&scores, model.k)?;
    let rn_norms = token_norms(&rn);
    let mut picked = Vec::with_capacity(m);
    for (c, take) in cluster_quotas(&order, &model.sizes(), params.clusters_selected, m - m_stale) {
        picked.extend(pick_in_cluster(
            &model.members[c],
            &rn_norms,
            tracker.frequencies(),
            params.intra_balance,
            take,
        )?);
    }
    let picked = TokenIndexSet::from_indices(picked, n)?;
    let stale = stale_candidates(tracker, &picked, m_stale)?;
    Ok(picked.union(&stale))
}

/// Global top-`m` by relative-noise norm.
pub fn noise_only(rn: &TokenGrid, m: usize) -> Result<TokenIndexSet> {
    top_k_indices(&token_norms(rn), m)
}

/// Global noise ranking for `m - m_stale` tokens plus `m_stale` stale ones.
pub fn noise_with_staleness(
    rn: &TokenGrid,
    tracker: &FrequencyTracker,
    m: usize,
    m_stale: usize,
) -> Result<TokenIndexSet> {
    let picked = top_k_indices(&token_norms(rn), m - m_stale)?;
    let stale = stale_candidates(tracker, &picked, m_stale)?;
    Ok(picked.union(&stale))
}

/// Raster-order window of `m` tokens starting at row `2 * (pruned_step - 1)`.
///
/// `pruned_step` counts from 1 at the first pruned step, so step 1 begins with
/// rows 0 and 1, step 2 with rows 2 and 3, and so on, wrapping around the grid.
pub fn sequential_rows(height: usize, width: usize, pruned_step: usize, m: usize) -> Result<TokenIndexSet> {
    let n = height * width;
    if m > n || pruned_step == 0 {
        return invalid(format!("invalid sequential selection of {m} tokens at pruned step {pruned_step}"));
    }
    let start = (2 * (pruned_step - 1) % height) * width;
    TokenIndexSet::from_indices((0..m).map(|o| (start + o) % n).collect(), n)
}

/// Per-run selection state: the strategy, the frozen cluster model and the
/// frequency tracker.
#[derive(Debug, Clone)]
pub struct Selector {
    strategy: Strategy,
    params: SelectionParams,
    height: usize,
    width: usize,
    t0: usize,
    seed: u64,
    pe: Option<PositionalEncoding>,
    clusters: Option<ClusterModel>,
    tracker: FrequencyTracker,
}

/// Selection made for one pruned step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSelection {
    pub step: usize,
    pub selected: TokenIndexSet,
    /// Per-token norm of the relative noise used for ranking.
    pub rn_norms: Vec<f64>,
    /// Frequencies after this step's update.
    pub frequencies: Vec<f64>,
}

impl Selector {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let pe = match cfg.strategy {
            Strategy::FullCat => Some(PositionalEncoding::new(cfg.height, cfg.width, cfg.noise_channels)?),
            _ => None,
        };
        Ok(Self {
            strategy: cfg.strategy,
            params: SelectionParams::from_config(cfg),
            height: cfg.height,
            width: cfg.width,
            t0: cfg.warmup,
            seed: cfg.seed,
            pe,
            clusters: None,
            tracker: FrequencyTracker::new(cfg.ewma_decay, cfg.image_tokens())?,
        })
    }

    pub fn tracker(&self) -> &FrequencyTracker {
        &self.tracker
    }

    pub fn clusters(&self) -> Option<&ClusterModel> {
        self.clusters.as_ref()
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    /// Chooses the tokens for pruned step `step` from the relative change
    /// `current - reference`, then records the choice in the tracker.
    pub fn select(&mut self, step: usize, current: &TokenGrid, reference: &TokenGrid) -> Result<StepSelection> {
        if step <= self.t0 {
            return invalid(format!("step {step} is within warmup (t0 = {})", self.t0));
        }
        let rn = relative_noise(current, reference)?;
        let n = rn.token_count();
        let m = crate::config::round_half_up(self.params.alpha * n as f64);
        let m_stale = if step == self.t0 + 1 {
            0
        } else {
            crate::config::round_half_up(self.params.stale_fraction * m as f64)
        };
        let selected = match self.strategy {
            Strategy::FullCat => find_indices(
                step,
                self.t0,
                current,
                reference,
                &mut self.clusters,
                &self.tracker,
                self.pe.as_ref().expect("full-cat keeps an encoding"),
                &self.params,
                self.seed,
            )?,
            Strategy::NoiseOnly => noise_only(&rn, m)?,
            Strategy::NoiseStaleness => noise_with_staleness(&rn, &self.tracker, m, m_stale)?,
            Strategy::SequentialRows => sequential_rows(self.height, self.width, step - self.t0, m)?,
        };
        debug_assert_eq!(selected.len(), m);
        self.tracker.update(&selected, step);
        Ok(StepSelection {
            step,
            selected,
            rn_norms: token_norms(&rn),
            frequencies: self.tracker.frequencies().to_vec(),
        })
    }
}

/// Pooled cluster scores for `rn` under a frozen model.
pub fn cluster_scores(model: &ClusterModel, rn: &TokenGrid, pe: &PositionalEncoding, params: &SelectionParams) -> Result<Vec<f64>> {
    let features = build_features(rn, pe, params.pos_weight)?;
    Ok(graph_pool(model, &features, params.neighbor_mix))
}
