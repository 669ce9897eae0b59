//! The metrics.json document written by `cat-prune run`.

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::denoiser::SampleTrace;
use crate::error::Result;
use crate::metrics::{fidelity, step_correlation, CostModel, Fidelity, MacsSummary};

/// Bumped on any change to the fields below.
pub const SCHEMA_VERSION: u32 = 1;

pub const QUALITY_NOTE: &str =
    "fidelity is MSE/PSNR of the final latent against the unpruned run with the same seed; it stands in for perceptual image-quality scores";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepReport {
    pub step: usize,
    pub pruned: bool,
    pub selected_count: usize,
    /// Pearson r of relative-noise norms between this step and the previous one.
    pub pearson_r: Option<f64>,
    pub mean_rn_norm: Option<f64>,
    pub wall_clock_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunReport {
    pub schema_version: u32,
    pub config: RunConfig,
    pub steps: Vec<StepReport>,
    pub macs: MacsSummary,
    pub fidelity: Option<Fidelity>,
    /// `histogram[c]` = number of image tokens selected on exactly `c` pruned steps.
    pub selection_histogram: Vec<usize>,
    pub quality_note: String,
}

impl RunReport {
    /// Builds the report for `trace`, comparing against `full` when given.
    pub fn from_trace(trace: &SampleTrace, full: Option<&SampleTrace>, record_timing: bool) -> Result<Self> {
        let cfg = &trace.config;
        let noises: Vec<_> = trace.steps.iter().map(|s| s.noise.clone()).collect();
        let correlations = step_correlation(&noises, cfg.warmup)?;
        let r_at = |step: usize| correlations.iter().find(|c| c.step == step).and_then(|c| c.r);

        let steps = trace
            .steps
            .iter()
            .map(|s| StepReport {
                step: s.step,
                pruned: s.selection.is_some(),
                selected_count: s.selected_count(cfg.image_tokens()),
                pearson_r: r_at(s.step),
                mean_rn_norm: s
                    .selection
                    .as_ref()
                    .map(|sel| sel.rn_norms.iter().sum::<f64>() / sel.rn_norms.len() as f64),
                wall_clock_ms: record_timing.then(|| s.elapsed.as_secs_f64() * 1e3),
            })
            .collect();

        let pruned_steps = trace.pruned_steps().count();
        let mut counts = vec![0usize; cfg.image_tokens()];
        for s in trace.pruned_steps() {
            for t in s.selection.as_ref().unwrap().selected.iter() {
                counts[t] += 1;
            }
        }
        let mut selection_histogram = vec![0usize; pruned_steps + 1];
        for c in counts {
            selection_histogram[c] += 1;
        }

        let mut cost = CostModel::from_config(cfg);
        if trace.mode == crate::denoiser::RunMode::Full {
            cost.alpha = 1.0;
        }
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            config: cfg.clone(),
            steps,
            macs: cost.macs_total(),
            fidelity: full
                .map(|f| fidelity(&f.final_latent, &trace.final_latent))
                .transpose()?,
            selection_histogram,
            quality_note: QUALITY_NOTE.to_owned(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}
