//! The `cat-prune` experiment runner.
//!
//! Exit codes: 0 on success, 2 for configuration errors, 3 for I/O errors,
//! 1 for anything else.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{DenoiserKind, ExperimentConfig, RunConfig, Strategy};
use crate::denoiser::{never_selected, sample, RunMode, SampleTrace, Sampler};
use crate::error::{CatError, Result};
use crate::io::{channel_image, cluster_image, encode_grid, selection_mask, write_grid, write_noise_csv};
use crate::metrics::{fidelity, CostModel, Fidelity, MacsSummary};
use crate::report::RunReport;
use crate::selector::{cluster_scores, relative_noise, SelectionParams};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;

pub const THREADS_ENV: &str = "CAT_PRUNE_THREADS";

#[derive(Debug, Parser)]
#[command(name = "cat-prune", version, about = "Cluster-aware token pruning experiments on a toy diffusion transformer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one pruned sampling pass and export its artifacts.
    Run(CommonArgs),
    /// Compare pruned runs against the unpruned run with the same seed.
    Compare {
        #[command(flatten)]
        common: CommonArgs,
        /// Run every selection mode instead of just --mode.
        #[arg(long)]
        ablation: bool,
        /// Number of consecutive seeds starting at --seed.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
    /// Print analytic MACs for the configured schedule and the reference schedules.
    Macs {
        #[command(flatten)]
        common: CommonArgs,
        /// Text tokens as a fraction of image tokens; overrides text_tokens.
        #[arg(long)]
        text_overhead: Option<f64>,
    },
    /// Fit the cluster model and export it as an image plus pooled scores.
    ClusterViz(CommonArgs),
}

#[derive(Debug, Args, Clone, Default)]
pub struct CommonArgs {
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, value_name = "U64")]
    pub seed: Option<u64>,
    #[arg(long, value_name = "F")]
    pub alpha: Option<f64>,
    #[arg(long, value_name = "I")]
    pub t0: Option<usize>,
    #[arg(long, value_name = "I")]
    pub steps: Option<usize>,
    #[arg(long, value_name = "I")]
    pub clusters: Option<usize>,
    #[arg(long, value_name = "F")]
    pub ewma_decay: Option<f64>,
    #[arg(long, value_name = "F")]
    pub stale_frac: Option<f64>,
    /// Selection mode: full-cat, noise-only, noise-staleness or sequential-rows.
    #[arg(long, value_name = "NAME")]
    pub mode: Option<Strategy>,
    /// Noise predictor: toy-transformer or synthetic-smooth.
    #[arg(long, value_name = "NAME")]
    pub denoiser: Option<DenoiserKind>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub json: bool,
}

impl CommonArgs {
    /// Loads the config file (if any) and applies command-line overrides.
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::parse_str(&fs::read_to_string(path)?)?,
            None => ExperimentConfig::default(),
        };
        let r = &mut cfg.run;
        if let Some(v) = self.seed {
            r.seed = v;
        }
        if let Some(v) = self.alpha {
            r.alpha = v;
        }
        if let Some(v) = self.t0 {
            r.warmup = v;
        }
        if let Some(v) = self.steps {
            r.total_steps = v;
        }
        if let Some(v) = self.clusters {
            r.cluster_count = v;
        }
        if let Some(v) = self.ewma_decay {
            r.ewma_decay = v;
        }
        if let Some(v) = self.stale_frac {
            r.stale_fraction = v;
        }
        if let Some(v) = self.mode {
            r.strategy = v;
        }
        if let Some(v) = self.denoiser {
            r.denoiser = v;
        }
        if let Some(v) = &self.out {
            cfg.out_dir = Some(v.clone());
        }
        cfg.run.validate()?;
        Ok(cfg)
    }
}

fn out_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("cat-prune-out"))
}

/// Runs the pruned pipeline and the unpruned one with the same seed.
pub fn run_pair(cfg: &RunConfig) -> Result<(SampleTrace, SampleTrace)> {
    let (full, pruned) = rayon::join(|| sample(cfg, RunMode::Full), || sample(cfg, RunMode::Pruned));
    Ok((full?, pruned?))
}

/// `run`: writes masks, noise CSVs, clusters.pgm, metrics.json and
/// final_latent.bin under `out`.
pub fn cmd_run(cfg: &ExperimentConfig, out: &Path) -> Result<RunReport> {
    cfg.run.validate()?;
    let (full, trace) = run_pair(&cfg.run)?;
    let (h, w) = (cfg.run.height, cfg.run.width);

    let masks = out.join("selection_masks");
    let norms = out.join("noise_norm");
    fs::create_dir_all(&masks)?;
    fs::create_dir_all(&norms)?;
    for s in trace.pruned_steps() {
        let sel = s.selection.as_ref().unwrap();
        selection_mask(&sel.selected, h, w)?.write(&masks.join(format!("step_{:03}.pgm", s.step)))?;
        let mut csv = Vec::new();
        write_noise_csv(&mut csv, &sel.rn_norms, &sel.frequencies)?;
        fs::write(norms.join(format!("step_{:03}.csv", s.step)), csv)?;
    }
    if let Some(model) = &trace.clusters {
        cluster_image(&model.assignment, model.k, h, w)?.write(&out.join("clusters.pgm"))?;
    }
    write_grid(&out.join("final_latent.bin"), &trace.final_latent, cfg.run.total_steps as u32)?;
    if cfg.export_latent_pgm {
        for c in 0..trace.final_latent.channels() {
            channel_image(&trace.final_latent, c)?.write(&out.join(format!("final_latent_c{c:02}.pgm")))?;
        }
    }
    let report = RunReport::from_trace(&trace, Some(&full), cfg.record_timing)?;
    fs::write(out.join("metrics.json"), report.to_json())?;
    Ok(report)
}

/// SHA-256 of the binary encoding of a final latent.
pub fn latent_hash(trace: &SampleTrace) -> String {
    let digest = Sha256::digest(encode_grid(&trace.final_latent, trace.config.total_steps as u32));
    digest.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareEntry {
    pub mode: Strategy,
    pub seed: u64,
    pub full_run_hash: String,
    pub pruned_run_hash: String,
    pub fidelity: Fidelity,
    pub macs_ratio: f64,
    pub never_selected: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub schema_version: u32,
    pub quality_note: String,
    pub entries: Vec<CompareEntry>,
}

/// `compare`: every `(mode, seed)` pair against the shared full run.
pub fn cmd_compare(cfg: &RunConfig, modes: &[Strategy], seeds: &[u64]) -> Result<CompareReport> {
    let mut entries = Vec::new();
    for &seed in seeds {
        let base = RunConfig { seed, ..cfg.clone() };
        base.validate()?;
        let full = sample(&base, RunMode::Full)?;
        let full_hash = latent_hash(&full);
        let runs: Vec<Result<CompareEntry>> = {
            use rayon::prelude::*;
            modes
                .par_iter()
                .map(|&mode| {
                    let run_cfg = RunConfig { strategy: mode, ..base.clone() };
                    let trace = sample(&run_cfg, RunMode::Pruned)?;
                    Ok(CompareEntry {
                        mode,
                        seed,
                        full_run_hash: full_hash.clone(),
                        pruned_run_hash: latent_hash(&trace),
                        fidelity: fidelity(&full.final_latent, &trace.final_latent)?,
                        macs_ratio: CostModel::from_config(&run_cfg).macs_total().ratio,
                        never_selected: never_selected(&trace).len(),
                    })
                })
                .collect()
        };
        for r in runs {
            entries.push(r?);
        }
    }
    Ok(CompareReport {
        schema_version: crate::report::SCHEMA_VERSION,
        quality_note: crate::report::QUALITY_NOTE.to_owned(),
        entries,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacsRow {
    pub label: String,
    pub total_steps: usize,
    pub warmup: usize,
    pub alpha: f64,
    pub text_overhead: f64,
    pub macs: MacsSummary,
}

/// Text overhead (as a fraction of image tokens) used for the reference rows.
pub const REFERENCE_TEXT_OVERHEAD: f64 = 0.12;

/// `macs`: the configured schedule plus the 28- and 50-step reference schedules.
pub fn cmd_macs(cfg: &RunConfig, text_overhead: Option<f64>) -> Vec<MacsRow> {
    let base = CostModel::from_config(cfg);
    let configured = match text_overhead {
        Some(f) => base.with_text_overhead(f),
        None => base,
    };
    let overhead = configured.text_tokens / configured.image_tokens;
    let mut rows = vec![MacsRow {
        label: "config".into(),
        total_steps: cfg.total_steps,
        warmup: cfg.warmup,
        alpha: cfg.alpha,
        text_overhead: overhead,
        macs: configured.macs_total(),
    }];
    for steps in [28, 50] {
        let m = CostModel {
            total_steps: steps,
            warmup: 8,
            alpha: 0.3,
            ..base
        }
        .with_text_overhead(REFERENCE_TEXT_OVERHEAD);
        rows.push(MacsRow {
            label: format!("reference-{steps}"),
            total_steps: steps,
            warmup: 8,
            alpha: 0.3,
            text_overhead: REFERENCE_TEXT_OVERHEAD,
            macs: m.macs_total(),
        });
    }
    rows
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterViz {
    pub assignment: Vec<usize>,
    pub scores: Vec<f64>,
    pub sizes: Vec<usize>,
}

/// `cluster-viz`: warmup plus the first pruned step, then exports
/// clusters.pgm and cluster_scores.csv.
pub fn cmd_cluster_viz(cfg: &RunConfig, out: &Path) -> Result<ClusterViz> {
    let cfg = RunConfig { strategy: Strategy::FullCat, ..cfg.clone() };
    cfg.validate()?;
    let mut sampler = Sampler::new(&cfg, RunMode::Pruned)?;
    let mut noises = Vec::new();
    while sampler.next_step() <= cfg.warmup + 1 {
        noises.push(sampler.step()?.noise);
    }
    let model = sampler
        .selector()
        .clusters()
        .cloned()
        .ok_or_else(|| CatError::State("no cluster model after the first pruned step".into()))?;
    let t0 = cfg.warmup;
    let before = if t0 >= 2 {
        noises[t0 - 2].clone()
    } else {
        crate::grid::TokenGrid::zeros(cfg.height, cfg.width, cfg.noise_channels)?
    };
    let rn = relative_noise(&noises[t0 - 1], &before)?;
    let pe = crate::clustering::PositionalEncoding::new(cfg.height, cfg.width, cfg.noise_channels)?;
    let scores = cluster_scores(&model, &rn, &pe, &SelectionParams::from_config(&cfg))?;
    write_cluster_viz(out, &model.assignment, model.k, cfg.height, cfg.width, &scores, &model.sizes())?;
    Ok(ClusterViz {
        assignment: model.assignment.clone(),
        sizes: model.sizes(),
        scores,
    })
}

pub fn write_cluster_viz(
    out: &Path,
    assignment: &[usize],
    k: usize,
    height: usize,
    width: usize,
    scores: &[f64],
    sizes: &[usize],
) -> Result<()> {
    fs::create_dir_all(out)?;
    cluster_image(assignment, k, height, width)?.write(&out.join("clusters.pgm"))?;
    let mut csv = String::from("cluster_id,size,score\n");
    for (c, (s, n)) in scores.iter().zip(sizes).enumerate() {
        let _ = writeln!(csv, "{c},{n},{s:?}");
    }
    fs::write(out.join("cluster_scores.csv"), csv)?;
    Ok(())
}

pub fn exit_code(err: &CatError) -> i32 {
    match err {
        CatError::Config { .. } | CatError::InvalidArgument(_) => EXIT_CONFIG,
        CatError::Io(_) => EXIT_IO,
        _ => EXIT_FAILURE,
    }
}

/// Caps rayon's global pool from `CAT_PRUNE_THREADS`, if set.
pub fn init_threads() {
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

fn print_macs(so: &mut impl std::io::Write, rows: &[MacsRow]) -> std::io::Result<()> {
    writeln!(so, "{:<14} {:>5} {:>4} {:>6} {:>8} {:>14} {:>14} {:>7}", "schedule", "N", "t0", "alpha", "text", "full MACs", "pruned MACs", "ratio")?;
    for r in rows {
        writeln!(
            so,
            "{:<14} {:>5} {:>4} {:>6.3} {:>7.1}% {:>14.4e} {:>14.4e} {:>7.3}",
            r.label,
            r.total_steps,
            r.warmup,
            r.alpha,
            r.text_overhead * 100.0,
            r.macs.full,
            r.macs.pruned,
            r.macs.ratio
        )?;
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    let mut so = std::io::stdout().lock();
    match cli.command {
        Command::Run(args) => {
            let cfg = args.resolve()?;
            let out = out_dir(&cfg);
            let report = cmd_run(&cfg, &out)?;
            if args.json {
                writeln!(so, "{}", report.to_json())?;
            } else {
                let f = report.fidelity.expect("run compares against the full pass");
                writeln!(
                    so,
                    "wrote {} (MACs ratio {:.3}, MSE vs full {:.3e})",
                    out.display(),
                    report.macs.ratio,
                    f.mse
                )?;
            }
        }
        Command::Compare { common, ablation, seeds } => {
            let cfg = common.resolve()?;
            let modes: Vec<Strategy> = if ablation { Strategy::ALL.to_vec() } else { vec![cfg.run.strategy] };
            let seed_list: Vec<u64> = (0..seeds.max(1)).map(|i| cfg.run.seed.wrapping_add(i)).collect();
            let report = cmd_compare(&cfg.run, &modes, &seed_list)?;
            let json = serde_json::to_string_pretty(&report).expect("report serializes");
            if let Some(dir) = &cfg.out_dir {
                fs::create_dir_all(dir)?;
                fs::write(dir.join("compare.json"), &json)?;
            }
            if common.json {
                writeln!(so, "{json}")?;
            } else {
                writeln!(so, "{:<16} {:>6} {:>12} {:>10} {:>12} {:>7} {:>6}", "mode", "seed", "mse", "psnr", "max|diff|", "macs", "never")?;
                for e in &report.entries {
                    let psnr = e.fidelity.psnr.map_or("inf".to_owned(), |p| format!("{p:.2}"));
                    writeln!(
                        so,
                        "{:<16} {:>6} {:>12.4e} {:>10} {:>12.4e} {:>7.3} {:>6}",
                        e.mode.name(),
                        e.seed,
                        e.fidelity.mse,
                        psnr,
                        e.fidelity.max_abs_diff,
                        e.macs_ratio,
                        e.never_selected
                    )?;
                }
            }
        }
        Command::Macs { common, text_overhead } => {
            let cfg = common.resolve()?;
            let rows = cmd_macs(&cfg.run, text_overhead);
            if common.json {
                writeln!(so, "{}", serde_json::to_string_pretty(&rows).expect("rows serialize"))?;
            } else {
                print_macs(&mut so, &rows)?;
            }
        }
        Command::ClusterViz(args) => {
            let cfg = args.resolve()?;
            let out = out_dir(&cfg);
            let viz = cmd_cluster_viz(&cfg.run, &out)?;
            writeln!(so, "wrote {} ({} clusters)", out.display(), viz.sizes.len())?;
        }
    }
    Ok(())
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    init_threads();
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(CatError::Io(e)) if e.kind() == std::io::ErrorKind::BrokenPipe => EXIT_OK,
        Err(e) => {
            eprintln!("cat-prune: {e}");
            exit_code(&e)
        }
    }
}
