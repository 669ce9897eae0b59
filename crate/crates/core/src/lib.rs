//! Cluster-aware, staleness-balanced token pruning for diffusion transformers.
//!
//! The crate is organised around the pruning pipeline:
//!
//! * [`grid`] holds the token lattice types and numeric primitives,
//! * [`selector`] scores relative noise, tracks selection frequency and
//!   chooses the tokens recomputed at each pruned step,
//! * [`clustering`] builds the spatial cluster model once pruning starts,
//! * [`denoiser`] is a small deterministic diffusion transformer with
//!   row-level caches, plus the Euler sampler that drives it,
//! * [`metrics`] covers MACs accounting, correlation and fidelity,
//! * [`cli`] implements the experiment runner behind the `cat-prune` binary.

pub mod cli;
pub mod clustering;
pub mod config;
pub mod denoiser;
pub mod error;
pub mod grid;
pub mod io;
pub mod metrics;
pub mod report;
pub mod rng;
pub mod selector;

pub use config::{DenoiserKind, RunConfig, Strategy};
pub use error::{CatError, Result};
pub use grid::{token_norms, top_k_indices, TokenGrid, TokenIndexSet};
