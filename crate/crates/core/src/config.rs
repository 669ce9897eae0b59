//! Run configuration and its plain-text file form.
//!
//! The file form is one `key = value` pair per line. `#` starts a comment.
//! Unknown keys, malformed values and violated invariants are all reported
//! with the line that caused them.

use std::collections::HashMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{CatError, Result};

/// Which noise predictor drives the sampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DenoiserKind {
    /// The seeded toy diffusion transformer.
    ToyTransformer,
    /// `n(x) = x - target`, a closed-form smooth flow towards a fixed image.
    SyntheticSmooth,
}

/// Token-selection rule used on pruned steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Clusters, noise magnitude and staleness together.
    FullCat,
    /// Global top-m by relative-noise magnitude.
    NoiseOnly,
    /// Global noise ranking plus least-frequent stale tokens.
    NoiseStaleness,
    /// Two new rows per pruned step, in raster order.
    SequentialRows,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::NoiseOnly,
        Strategy::NoiseStaleness,
        Strategy::FullCat,
        Strategy::SequentialRows,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::FullCat => "full-cat",
            Strategy::NoiseOnly => "noise-only",
            Strategy::NoiseStaleness => "noise-staleness",
            Strategy::SequentialRows => "sequential-rows",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "full-cat" | "cat" => Ok(Strategy::FullCat),
            "noise-only" => Ok(Strategy::NoiseOnly),
            "noise-staleness" | "noise+staleness" => Ok(Strategy::NoiseStaleness),
            "sequential-rows" => Ok(Strategy::SequentialRows),
            other => Err(format!("unknown selection mode '{other}'")),
        }
    }
}

impl DenoiserKind {
    pub fn name(self) -> &'static str {
        match self {
            DenoiserKind::ToyTransformer => "toy-transformer",
            DenoiserKind::SyntheticSmooth => "synthetic-smooth",
        }
    }
}

impl FromStr for DenoiserKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "toy-transformer" | "transformer" => Ok(DenoiserKind::ToyTransformer),
            "synthetic-smooth" | "synthetic" => Ok(DenoiserKind::SyntheticSmooth),
            other => Err(format!("unknown denoiser '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub height: usize,
    pub width: usize,
    pub noise_channels: usize,
    pub total_steps: usize,
    pub warmup: usize,
    pub alpha: f64,
    pub cluster_count: usize,
    /// Clusters taken per pruned step; `None` means `ceil(alpha * k)`.
    pub clusters_selected: Option<usize>,
    pub ewma_decay: f64,
    pub stale_fraction: f64,
    pub pos_weight: f64,
    pub neighbor_mix: f64,
    pub intra_balance: f64,
    pub kmeans_max_iters: usize,
    pub seed: u64,
    pub layers: usize,
    pub model_width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub text_tokens: usize,
    pub denoiser: DenoiserKind,
    pub strategy: Strategy,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            noise_channels: 8,
            total_steps: 28,
            warmup: 8,
            alpha: 0.3,
            cluster_count: 20,
            clusters_selected: None,
            ewma_decay: 0.9,
            stale_fraction: 0.25,
            pos_weight: 1.0,
            neighbor_mix: 0.5,
            intra_balance: 0.5,
            kmeans_max_iters: 50,
            seed: 0,
            layers: 4,
            model_width: 64,
            heads: 4,
            mlp_ratio: 4,
            text_tokens: 0,
            denoiser: DenoiserKind::ToyTransformer,
            strategy: Strategy::FullCat,
        }
    }
}

/// Round half up, the rounding rule for every budget in the pipeline.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

impl RunConfig {
    pub fn image_tokens(&self) -> usize {
        self.height * self.width
    }

    /// Tokens recomputed on each pruned step, `round(alpha * h * w)`.
    pub fn budget(&self) -> usize {
        round_half_up(self.alpha * self.image_tokens() as f64)
    }

    /// Stale-token slots on steps after the first pruned one.
    pub fn stale_budget(&self) -> usize {
        round_half_up(self.stale_fraction * self.budget() as f64)
    }

    pub fn selected_clusters(&self) -> usize {
        self.clusters_selected
            .unwrap_or_else(|| (self.alpha * self.cluster_count as f64).ceil() as usize)
            .clamp(1, self.cluster_count)
    }

    pub fn validate(&self) -> Result<()> {
        self.check().map_err(|(_, msg)| CatError::InvalidArgument(msg))
    }

    /// Returns the offending key along with the message.
    fn check(&self) -> std::result::Result<(), (&'static str, String)> {
        let fail = |key: &'static str, msg: String| Err((key, msg));
        if self.height == 0 || self.width == 0 {
            return fail("height", format!("grid must be non-empty, got {}x{}", self.height, self.width));
        }
        if self.noise_channels == 0 {
            return fail("noise_channels", "noise_channels must be >= 1".into());
        }
        if self.strategy == Strategy::FullCat && self.noise_channels % 2 != 0 {
            return fail(
                "noise_channels",
                format!("positional encoding needs an even channel count, got {}", self.noise_channels),
            );
        }
        if self.warmup < 1 || self.warmup >= self.total_steps {
            return fail(
                "warmup",
                format!("need 1 <= warmup < total_steps, got warmup={} total_steps={}", self.warmup, self.total_steps),
            );
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return fail("alpha", format!("alpha must be in (0, 1], got {}", self.alpha));
        }
        if self.cluster_count < 1 || self.cluster_count > self.image_tokens() {
            return fail(
                "cluster_count",
                format!("need 1 <= cluster_count <= {}, got {}", self.image_tokens(), self.cluster_count),
            );
        }
        if let Some(m) = self.clusters_selected {
            if m < 1 || m > self.cluster_count {
                return fail(
                    "clusters_selected",
                    format!("need 1 <= clusters_selected <= {}, got {m}", self.cluster_count),
                );
            }
        }
        if !(self.ewma_decay > 0.0 && self.ewma_decay < 1.0) {
            return fail("ewma_decay", format!("ewma_decay must be in (0, 1), got {}", self.ewma_decay));
        }
        if !(self.stale_fraction >= 0.0 && self.stale_fraction < 1.0) {
            return fail(
                "stale_fraction",
                format!("stale_fraction must be in [0, 1), got {}", self.stale_fraction),
            );
        }
        if !(self.pos_weight >= 0.0 && self.pos_weight.is_finite()) {
            return fail("pos_weight", format!("pos_weight must be >= 0, got {}", self.pos_weight));
        }
        if !(0.0..=1.0).contains(&self.neighbor_mix) {
            return fail("neighbor_mix", format!("neighbor_mix must be in [0, 1], got {}", self.neighbor_mix));
        }
        if !(self.intra_balance >= 0.0 && self.intra_balance.is_finite()) {
            return fail("intra_balance", format!("intra_balance must be >= 0, got {}", self.intra_balance));
        }
        if self.kmeans_max_iters == 0 {
            return fail("kmeans_max_iters", "kmeans_max_iters must be >= 1".into());
        }
        if self.layers == 0 {
            return fail("layers", "layers must be >= 1".into());
        }
        if self.heads == 0 || self.model_width == 0 || self.model_width % self.heads != 0 {
            return fail(
                "heads",
                format!("model_width {} must be a positive multiple of heads {}", self.model_width, self.heads),
            );
        }
        if self.mlp_ratio == 0 {
            return fail("mlp_ratio", "mlp_ratio must be >= 1".into());
        }
        Ok(())
    }
}

/// File form of [`RunConfig`] plus output and export settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub run: RunConfig,
    pub out_dir: Option<PathBuf>,
    /// Write per-channel PGM images of the final latent.
    pub export_latent_pgm: bool,
    /// Record wall-clock per step in metrics.json. Off by default because
    /// timings make output directories differ between otherwise identical runs.
    pub record_timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            run: RunConfig::default(),
            out_dir: None,
            export_latent_pgm: false,
            record_timing: false,
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "height",
    "width",
    "noise_channels",
    "total_steps",
    "warmup",
    "alpha",
    "cluster_count",
    "clusters_selected",
    "ewma_decay",
    "stale_fraction",
    "pos_weight",
    "neighbor_mix",
    "intra_balance",
    "kmeans_max_iters",
    "seed",
    "layers",
    "model_width",
    "heads",
    "mlp_ratio",
    "text_tokens",
    "denoiser",
    "strategy",
    "out_dir",
    "export_latent_pgm",
    "record_timing",
];

fn parse<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String>
where
    T::Err: fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| format!("invalid value '{value}' for {key}: {e}"))
}

impl ExperimentConfig {
    /// Applies one key/value pair. Errors carry no line number; callers add it.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let r = &mut self.run;
        match key {
            "height" => r.height = parse(key, value)?,
            "width" => r.width = parse(key, value)?,
            "noise_channels" => r.noise_channels = parse(key, value)?,
            "total_steps" => r.total_steps = parse(key, value)?,
            "warmup" => r.warmup = parse(key, value)?,
            "alpha" => r.alpha = parse(key, value)?,
            "cluster_count" => r.cluster_count = parse(key, value)?,
            "clusters_selected" => {
                r.clusters_selected = match value {
                    "auto" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "ewma_decay" => r.ewma_decay = parse(key, value)?,
            "stale_fraction" => r.stale_fraction = parse(key, value)?,
            "pos_weight" => r.pos_weight = parse(key, value)?,
            "neighbor_mix" => r.neighbor_mix = parse(key, value)?,
            "intra_balance" => r.intra_balance = parse(key, value)?,
            "kmeans_max_iters" => r.kmeans_max_iters = parse(key, value)?,
            "seed" => r.seed = parse(key, value)?,
            "layers" => r.layers = parse(key, value)?,
            "model_width" => r.model_width = parse(key, value)?,
            "heads" => r.heads = parse(key, value)?,
            "mlp_ratio" => r.mlp_ratio = parse(key, value)?,
            "text_tokens" => r.text_tokens = parse(key, value)?,
            "denoiser" => r.denoiser = parse(key, value)?,
            "strategy" => r.strategy = parse(key, value)?,
            "out_dir" => self.out_dir = Some(PathBuf::from(value)),
            "export_latent_pgm" => self.export_latent_pgm = parse(key, value)?,
            "record_timing" => self.record_timing = parse(key, value)?,
            other => return Err(format!("unknown key '{other}'")),
        }
        Ok(())
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut lines_of: HashMap<&str, usize> = HashMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(CatError::Config {
                    line,
                    message: format!("expected 'key = value', got '{content}'"),
                });
            };
            let (key, value) = (key.trim(), value.trim());
            let Some(&known) = CONFIG_KEYS.iter().find(|k| **k == key) else {
                return Err(CatError::Config {
                    line,
                    message: format!("unknown key '{key}'"),
                });
            };
            if let Some(prev) = lines_of.insert(known, line) {
                return Err(CatError::Config {
                    line,
                    message: format!("duplicate key '{key}' (first set on line {prev})"),
                });
            }
            cfg.set(key, value)
                .map_err(|message| CatError::Config { line, message })?;
        }
        cfg.run.check().map_err(|(key, message)| CatError::Config {
            line: lines_of.get(key).copied().unwrap_or(0),
            message,
        })?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(c.budget(), 307);
        assert_eq!(c.stale_budget(), 77);
        assert_eq!(c.selected_clusters(), 6);
    }

    #[test]
    fn rounding_is_half_up() {
        assert_eq!(round_half_up(2.5), 3);
        assert_eq!(round_half_up(2.49), 2);
        assert_eq!(round_half_up(0.0), 0);
        let c = RunConfig {
            height: 16,
            width: 16,
            ..RunConfig::default()
        };
        assert_eq!(c.budget(), 77);
        assert_eq!(c.stale_budget(), 19);
    }

    #[test]
    fn rejects_invariant_violations() {
        let bad = [
            RunConfig { warmup: 0, ..RunConfig::default() },
            RunConfig { warmup: 28, ..RunConfig::default() },
            RunConfig { alpha: 0.0, ..RunConfig::default() },
            RunConfig { alpha: 1.5, ..RunConfig::default() },
            RunConfig { ewma_decay: 1.0, ..RunConfig::default() },
            RunConfig { cluster_count: 2000, ..RunConfig::default() },
            RunConfig { noise_channels: 7, ..RunConfig::default() },
            RunConfig { heads: 3, ..RunConfig::default() },
            RunConfig { stale_fraction: 1.0, ..RunConfig::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn parses_file_form() {
        let text = "# experiment\nalpha = 0.5\nseed=9  # trailing\n\nstrategy = noise-only\nclusters_selected = auto\n";
        let cfg = ExperimentConfig::parse_str(text).unwrap();
        assert_eq!(cfg.run.alpha, 0.5);
        assert_eq!(cfg.run.seed, 9);
        assert_eq!(cfg.run.strategy, Strategy::NoiseOnly);
        assert_eq!(cfg.run.clusters_selected, None);
    }

    #[test]
    fn errors_point_at_lines() {
        let err = ExperimentConfig::parse_str("alpha = 0.3\nbogus = 1\n").unwrap_err();
        assert!(matches!(err, CatError::Config { line: 2, .. }), "{err}");

        let err = ExperimentConfig::parse_str("seed = 1\n\nalpha = abc\n").unwrap_err();
        assert!(matches!(err, CatError::Config { line: 3, .. }), "{err}");

        let err = ExperimentConfig::parse_str("seed = 1\nwarmup = 40\n").unwrap_err();
        assert!(matches!(err, CatError::Config { line: 2, .. }), "{err}");

        let err = ExperimentConfig::parse_str("alpha 0.3\n").unwrap_err();
        assert!(matches!(err, CatError::Config { line: 1, .. }), "{err}");

        let err = ExperimentConfig::parse_str("seed = 1\nseed = 2\n").unwrap_err();
        assert!(matches!(err, CatError::Config { line: 2, .. }), "{err}");
    }
}
