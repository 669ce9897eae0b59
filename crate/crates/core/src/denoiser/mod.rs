//! Toy diffusion transformer, its row caches and the Euler sampler.
//!
//! A pruned step recomputes only the selected token rows. Every other row of
//! the per-layer key/value caches, the block-output caches and the predicted
//! noise is carried over from the previous step unchanged.

mod sampler;
mod transformer;

pub use sampler::{
    initial_latent, never_selected, sample, synthetic_closed_form, NoiseModel, RunMode, SampleTrace, Sampler,
    StepRecord, SyntheticSmooth,
};
pub use transformer::{gelu, rms_norm, Block, DenoiserCaches, LayerCache, Linear, Rows, ToyDiT};
