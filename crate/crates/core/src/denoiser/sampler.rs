use std::time::{Duration, Instant};

use rand_distr::{Distribution, StandardNormal};

use super::transformer::{DenoiserCaches, Rows, ToyDiT};
use crate::clustering::ClusterModel;
use crate::config::{DenoiserKind, RunConfig};
use crate::error::{CatError, Result};
use crate::grid::{TokenGrid, TokenIndexSet};
use crate::rng::{SeededRng, LATENT, TARGET};
use crate::selector::{FrequencyTracker, Selector, StepSelection};

/// Whether a run prunes after warmup or stays dense throughout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    Full,
    Pruned,
}

/// `n(x) = x - target`: the exact flow towards a fixed seeded image.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSmooth {
    pub target: TokenGrid,
    pub prev_noise: Option<TokenGrid>,
}

impl SyntheticSmooth {
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        let mut rng = SeededRng::new(cfg.seed).substream(TARGET);
        let target = TokenGrid::from_fn(cfg.height, cfg.width, cfg.noise_channels, |_, _| {
            StandardNormal.sample(&mut rng)
        })?;
        Ok(Self {
            target,
            prev_noise: None,
        })
    }

    pub fn predict_noise(&mut self, x: &TokenGrid, rows: Rows<'_>) -> Result<TokenGrid> {
        let fresh = x.sub(&self.target)?;
        let noise = match rows {
            Rows::Full => fresh,
            Rows::Selected(sel) => {
                let mut out = self
                    .prev_noise
                    .clone()
                    .ok_or_else(|| CatError::State("pruned prediction before warmup".into()))?;
                for t in sel.iter() {
                    out.token_mut(t).copy_from_slice(fresh.token(t));
                }
                out
            }
        };
        self.prev_noise = Some(noise.clone());
        Ok(noise)
    }
}

#[derive(Debug, Clone)]
pub enum NoiseModel {
    Transformer {
        model: Box<ToyDiT>,
        caches: DenoiserCaches,
    },
    Synthetic(SyntheticSmooth),
}

impl NoiseModel {
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        Ok(match cfg.denoiser {
            DenoiserKind::ToyTransformer => {
                let model = ToyDiT::from_config(cfg)?;
                let caches = model.new_caches();
                NoiseModel::Transformer {
                    model: Box::new(model),
                    caches,
                }
            }
            DenoiserKind::SyntheticSmooth => NoiseModel::Synthetic(SyntheticSmooth::from_config(cfg)?),
        })
    }

    pub fn predict(&mut self, x: &TokenGrid, tau: f64, rows: Rows<'_>) -> Result<TokenGrid> {
        match self {
            NoiseModel::Transformer { model, caches } => model.predict_noise(x, tau, rows, caches),
            NoiseModel::Synthetic(s) => s.predict_noise(x, rows),
        }
    }

    pub fn caches(&self) -> Option<&DenoiserCaches> {
        match self {
            NoiseModel::Transformer { caches, .. } => Some(caches),
            NoiseModel::Synthetic(_) => None,
        }
    }
}

/// Standard-normal initial latent from the `latent` substream.
pub fn initial_latent(cfg: &RunConfig) -> Result<TokenGrid> {
    let mut rng = SeededRng::new(cfg.seed).substream(LATENT);
    TokenGrid::from_fn(cfg.height, cfg.width, cfg.noise_channels, |_, _| {
        StandardNormal.sample(&mut rng)
    })
}

/// Everything observed on one sampler step.
#[derive(Debug, Clone)]
pub struct StepRecord {
    /// 1-based step number.
    pub step: usize,
    pub tau: f64,
    /// `None` on dense steps.
    pub selection: Option<StepSelection>,
    pub noise: TokenGrid,
    pub elapsed: Duration,
}

impl StepRecord {
    pub fn selected_count(&self, image_tokens: usize) -> usize {
        self.selection
            .as_ref()
            .map_or(image_tokens, |s| s.selected.len())
    }
}

/// Result of a complete sampler run.
#[derive(Debug, Clone)]
pub struct SampleTrace {
    pub config: RunConfig,
    pub mode: RunMode,
    pub initial_latent: TokenGrid,
    pub final_latent: TokenGrid,
    pub steps: Vec<StepRecord>,
    pub clusters: Option<ClusterModel>,
    pub tracker: FrequencyTracker,
}

impl SampleTrace {
    /// Predicted noise on the last warmup step.
    pub fn reference_noise(&self) -> &TokenGrid {
        &self.steps[self.config.warmup - 1].noise
    }

    pub fn pruned_steps(&self) -> impl Iterator<Item = &StepRecord> {
        self.steps.iter().filter(|s| s.selection.is_some())
    }
}

/// Explicit Euler sampler over uniform steps from `tau = 1` to `tau = 0`.
///
/// Steps `1..=t0` are dense. In [`RunMode::Pruned`], step `t0 + 1` fits the
/// cluster model and every later step reuses it.
#[derive(Debug, Clone)]
pub struct Sampler {
    config: RunConfig,
    mode: RunMode,
    model: NoiseModel,
    selector: Selector,
    initial: TokenGrid,
    latent: TokenGrid,
    next_step: usize,
    history: Vec<TokenGrid>,
}

impl Sampler {
    pub fn new(config: &RunConfig, mode: RunMode) -> Result<Self> {
        config.validate()?;
        let initial = initial_latent(config)?;
        Ok(Self {
            config: config.clone(),
            mode,
            model: NoiseModel::from_config(config)?,
            selector: Selector::new(config)?,
            latent: initial.clone(),
            initial,
            next_step: 1,
            history: Vec::new(),
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn latent(&self) -> &TokenGrid {
        &self.latent
    }

    pub fn model(&self) -> &NoiseModel {
        &self.model
    }

    pub fn selector(&self) -> &Selector {
        &self.selector
    }

    pub fn next_step(&self) -> usize {
        self.next_step
    }

    pub fn is_done(&self) -> bool {
        self.next_step > self.config.total_steps
    }

    pub fn step_size(&self) -> f64 {
        1.0 / self.config.total_steps as f64
    }

    pub fn tau(&self, step: usize) -> f64 {
        1.0 - (step - 1) as f64 * self.step_size()
    }

    /// The pair whose difference ranks tokens at pruned step `step`.
    ///
    /// Later steps compare the freshest noise against the last warmup step.
    /// On the first pruned step that difference is identically zero, so the
    /// change across the last warmup step is used instead.
    fn ranking_pair(&self, step: usize) -> Result<(TokenGrid, TokenGrid)> {
        let t0 = self.config.warmup;
        let reference = self.history[t0 - 1].clone();
        if step == t0 + 1 {
            let before = match t0 {
                1 => TokenGrid::zeros(self.config.height, self.config.width, self.config.noise_channels)?,
                _ => self.history[t0 - 2].clone(),
            };
            Ok((reference, before))
        } else {
            Ok((self.history[step - 2].clone(), reference))
        }
    }

    pub fn step(&mut self) -> Result<StepRecord> {
        if self.is_done() {
            return Err(CatError::State("sampler already finished".into()));
        }
        let started = Instant::now();
        let step = self.next_step;
        let tau = self.tau(step);
        let pruned = self.mode == RunMode::Pruned && step > self.config.warmup;

        let selection = if pruned {
            let (current, reference) = self.ranking_pair(step)?;
            Some(self.selector.select(step, &current, &reference)?)
        } else {
            None
        };
        let rows = match &selection {
            Some(s) => Rows::Selected(&s.selected),
            None => Rows::Full,
        };
        let noise = self.model.predict(&self.latent, tau, rows)?;
        if step == self.config.warmup {
            if let NoiseModel::Transformer { caches, .. } = &mut self.model {
                caches.reference_noise = Some(noise.clone());
            }
        }
        self.latent = self.latent.euler_step(&noise, self.step_size())?;
        self.history.push(noise.clone());
        self.next_step += 1;
        Ok(StepRecord {
            step,
            tau,
            selection,
            noise,
            elapsed: started.elapsed(),
        })
    }

    pub fn run(mut self) -> Result<SampleTrace> {
        let mut steps = Vec::with_capacity(self.config.total_steps);
        while !self.is_done() {
            steps.push(self.step()?);
        }
        Ok(SampleTrace {
            config: self.config,
            mode: self.mode,
            initial_latent: self.initial,
            final_latent: self.latent,
            steps,
            clusters: self.selector.clusters().cloned(),
            tracker: self.selector.tracker().clone(),
        })
    }
}

/// Runs a complete sampler pass.
pub fn sample(config: &RunConfig, mode: RunMode) -> Result<SampleTrace> {
    Sampler::new(config, mode)?.run()
}

/// Closed-form synthetic-smooth latent after `steps` Euler steps:
/// `target + (1 - dt)^steps * (x0 - target)`.
pub fn synthetic_closed_form(x0: &TokenGrid, target: &TokenGrid, dt: f64, steps: usize) -> Result<TokenGrid> {
    let decay = (1.0 - dt).powi(steps as i32);
    let data = x0
        .data()
        .iter()
        .zip(target.data())
        .map(|(x, t)| t + decay * (x - t))
        .collect();
    TokenGrid::new(x0.height(), x0.width(), x0.channels(), data)
}

/// Image tokens that were never selected on any pruned step.
pub fn never_selected(trace: &SampleTrace) -> TokenIndexSet {
    let n = trace.config.image_tokens();
    let mut seen = vec![false; n];
    for s in trace.pruned_steps() {
        for t in s.selection.as_ref().unwrap().selected.iter() {
            seen[t] = true;
        }
    }
    TokenIndexSet::from_indices((0..n).filter(|&t| !seen[t]).collect(), n).unwrap()
}
