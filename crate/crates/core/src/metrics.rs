//! MACs accounting, correlation and fidelity metrics.

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{invalid, CatError, Result};
use crate::grid::{token_norms, TokenGrid};

/// Which rows get fresh key/value projections on a pruned step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KvVariant {
    /// Only selected rows; the rest are served from the cache.
    SelectedOnly,
    /// Every row, with queries still restricted to the selection.
    AllTokens,
}

/// Analytic multiply-accumulate count of the transformer blocks.
///
/// Token counts are real-valued so that a text overhead can be expressed as a
/// fraction of the image tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub image_tokens: f64,
    pub text_tokens: f64,
    pub model_width: f64,
    pub layers: usize,
    pub mlp_ratio: f64,
    pub total_steps: usize,
    pub warmup: usize,
    pub alpha: f64,
    pub kv: KvVariant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MacsSummary {
    pub full: f64,
    pub pruned: f64,
    pub ratio: f64,
}

impl CostModel {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            image_tokens: cfg.image_tokens() as f64,
            text_tokens: cfg.text_tokens as f64,
            model_width: cfg.model_width as f64,
            layers: cfg.layers,
            mlp_ratio: cfg.mlp_ratio as f64,
            total_steps: cfg.total_steps,
            warmup: cfg.warmup,
            alpha: cfg.alpha,
            kv: KvVariant::SelectedOnly,
        }
    }

    /// Sets the text tokens to `fraction` of the image tokens.
    pub fn with_text_overhead(mut self, fraction: f64) -> Self {
        self.text_tokens = fraction * self.image_tokens;
        self
    }

    pub fn total_tokens(&self) -> f64 {
        self.image_tokens + self.text_tokens
    }

    /// One block with `rows` query rows and `kv_rows` key/value rows.
    fn block_macs(&self, rows: f64, kv_rows: f64) -> f64 {
        let d = self.model_width;
        let projections = (rows + 2.0 * kv_rows + rows) * d * d;
        let mlp = 2.0 * self.mlp_ratio * rows * d * d;
        let attention = 2.0 * rows * self.total_tokens() * d;
        projections + mlp + attention
    }

    pub fn dense_step(&self) -> f64 {
        let all = self.total_tokens();
        self.layers as f64 * self.block_macs(all, all)
    }

    pub fn pruned_step(&self) -> f64 {
        let rows = self.alpha * self.image_tokens + self.text_tokens;
        let kv_rows = match self.kv {
            KvVariant::SelectedOnly => rows,
            KvVariant::AllTokens => self.total_tokens(),
        };
        self.layers as f64 * self.block_macs(rows, kv_rows)
    }

    /// `t0` dense steps, then `N - t0` pruned ones, against `N` dense steps.
    pub fn macs_total(&self) -> MacsSummary {
        let n = self.total_steps as f64;
        let t0 = self.warmup as f64;
        let full = n * self.dense_step();
        let pruned = t0 * self.dense_step() + (n - t0) * self.pruned_step();
        MacsSummary {
            full,
            pruned,
            ratio: pruned / full,
        }
    }
}

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return invalid(format!(
            "pearson needs equal lengths >= 2, got {} and {}",
            x.len(),
            y.len()
        ));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(CatError::UndefinedCorrelation("zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepCorrelation {
    pub step: usize,
    /// `None` when either side has zero variance.
    pub r: Option<f64>,
}

/// Per-step Pearson r between `|n_t - n_t0|` and `|n_{t-1} - n_t0|` over tokens.
///
/// `noises[s]` is the noise predicted on step `s + 1`. Steps `t0 + 2 ..= N`
/// are reported.
pub fn step_correlation(noises: &[TokenGrid], t0: usize) -> Result<Vec<StepCorrelation>> {
    if t0 == 0 || t0 > noises.len() {
        return invalid(format!("t0 = {t0} outside a trace of {} steps", noises.len()));
    }
    let reference = &noises[t0 - 1];
    let rel = |t: usize| -> Result<Vec<f64>> { Ok(token_norms(&noises[t - 1].sub(reference)?)) };
    let mut out = Vec::new();
    for t in t0 + 2..=noises.len() {
        let r = match pearson(&rel(t)?, &rel(t - 1)?) {
            Ok(r) => Some(r),
            Err(CatError::UndefinedCorrelation(_)) => None,
            Err(e) => return Err(e),
        };
        out.push(StepCorrelation { step: t, r });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fidelity {
    pub mse: f64,
    /// Relative to the reference's dynamic range; `None` when infinite or undefined.
    pub psnr: Option<f64>,
    pub max_abs_diff: f64,
}

pub fn fidelity(reference: &TokenGrid, candidate: &TokenGrid) -> Result<Fidelity> {
    reference.check_same_shape(candidate, "fidelity")?;
    let n = reference.data().len() as f64;
    let (mut sq, mut max_abs) = (0.0, 0.0f64);
    for (a, b) in reference.data().iter().zip(candidate.data()) {
        let d = a - b;
        sq += d * d;
        max_abs = max_abs.max(d.abs());
    }
    let mse = sq / n;
    let lo = reference.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = reference.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let psnr = (mse > 0.0 && range > 0.0).then(|| 10.0 * (range * range / mse).log10());
    Ok(Fidelity {
        mse,
        psnr,
        max_abs_diff: max_abs,
    })
}

/// Mean squared difference restricted to `rows` of two `tokens x width` matrices.
pub fn row_mse(a: &[f64], b: &[f64], width: usize, rows: impl IntoIterator<Item = usize>) -> f64 {
    let (mut sum, mut count) = (0.0, 0usize);
    for r in rows {
        for (x, y) in a[r * width..(r + 1) * width].iter().zip(&b[r * width..(r + 1) * width]) {
            sum += (x - y) * (x - y);
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}
