use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::error::{invalid, CatError, Result};
use crate::grid::{TokenGrid, TokenIndexSet};
use crate::rng::{SeededRng, WEIGHTS};

const NORM_EPS: f64 = 1e-6;

/// Dense affine map, `y = x W + b` with `W` stored `in_dim x out_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn random(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, 1.0 / (in_dim as f64).sqrt()).unwrap();
        let weight = (0..in_dim * out_dim).map(|_| normal.sample(rng)).collect();
        let bias = (0..out_dim).map(|_| 0.02 * (rng.random::<f64>() - 0.5)).collect();
        Self {
            in_dim,
            out_dim,
            weight,
            bias,
        }
    }

    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.bias);
        for (i, &xi) in x.iter().enumerate() {
            let row = &self.weight[i * self.out_dim..(i + 1) * self.out_dim];
            for (o, w) in out.iter_mut().zip(row) {
                *o += xi * w;
            }
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.out_dim];
        self.apply(x, &mut out);
        out
    }
}

/// RMS normalization with a per-channel scale.
pub fn rms_norm(x: &[f64], scale: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + NORM_EPS).sqrt();
    x.iter().zip(scale).map(|(v, s)| v * inv * s).collect()
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

/// Per-layer row caches. Every matrix is `tokens x width`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache {
    pub keys: Vec<f64>,
    pub values: Vec<f64>,
    /// Block output from the last time each row was computed.
    pub output: Vec<f64>,
    pub populated: bool,
}

impl LayerCache {
    pub fn new(tokens: usize, width: usize) -> Self {
        Self {
            keys: vec![0.0; tokens * width],
            values: vec![0.0; tokens * width],
            output: vec![0.0; tokens * width],
            populated: false,
        }
    }
}

/// One pre-norm transformer block: multi-head self-attention then an MLP,
/// each with a residual connection.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub width: usize,
    pub heads: usize,
    pub attn_norm: Vec<f64>,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out_proj: Linear,
    pub mlp_norm: Vec<f64>,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
}

impl Block {
    pub fn random(width: usize, heads: usize, mlp_ratio: usize, rng: &mut ChaCha8Rng) -> Self {
        let norm = |rng: &mut ChaCha8Rng| (0..width).map(|_| 1.0 + 0.1 * (rng.random::<f64>() - 0.5)).collect();
        let attn_norm = norm(rng);
        let query = Linear::random(width, width, rng);
        let key = Linear::random(width, width, rng);
        let value = Linear::random(width, width, rng);
        let out_proj = Linear::random(width, width, rng);
        let mlp_norm = norm(rng);
        let mlp_in = Linear::random(width, width * mlp_ratio, rng);
        let mlp_out = Linear::random(width * mlp_ratio, width, rng);
        Self {
            width,
            heads,
            attn_norm,
            query,
            key,
            value,
            out_proj,
            mlp_norm,
            mlp_in,
            mlp_out,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    /// Pruned forward over `rows`.
    ///
    /// `input` is the full `tokens x width` layer input; only the rows in
    /// `rows` are read. Queries are formed for those rows only. Their keys and
    /// values overwrite the cached ones, and attention runs against every
    /// cached key/value row. Outputs of `rows` replace their cached block
    /// outputs; all other cached rows are left untouched.
    pub fn forward_rows(&self, input: &[f64], rows: &[usize], cache: &mut LayerCache) -> Result<()> {
        let w = self.width;
        let tokens = cache.output.len() / w;
        if input.len() != tokens * w {
            return invalid(format!("layer input has {} values, expected {}", input.len(), tokens * w));
        }
        if !cache.populated && rows.len() != tokens {
            return Err(CatError::State(
                "pruned forward before the layer cache was populated by a full pass".into(),
            ));
        }
        if rows.is_empty() {
            return Ok(());
        }

        let projected: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = rows
            .par_iter()
            .map(|&r| {
                let a = rms_norm(&input[r * w..(r + 1) * w], &self.attn_norm);
                (self.query.forward(&a), self.key.forward(&a), self.value.forward(&a))
            })
            .collect();
        for (&r, (_, k, v)) in rows.iter().zip(&projected) {
            cache.keys[r * w..(r + 1) * w].copy_from_slice(k);
            cache.values[r * w..(r + 1) * w].copy_from_slice(v);
        }

        let keys_t = transpose(&cache.keys, tokens, w);
        let values_t = transpose(&cache.values, tokens, w);
        let outputs: Vec<Vec<f64>> = rows
            .par_iter()
            .zip(&projected)
            .map(|(&r, (q, _, _))| {
                let attended = self.attend(q, &keys_t, &values_t, tokens);
                let mut h: Vec<f64> = input[r * w..(r + 1) * w].to_vec();
                for (x, o) in h.iter_mut().zip(self.out_proj.forward(&attended)) {
                    *x += o;
                }
                let m = rms_norm(&h, &self.mlp_norm);
                let hidden: Vec<f64> = self.mlp_in.forward(&m).into_iter().map(gelu).collect();
                for (x, o) in h.iter_mut().zip(self.mlp_out.forward(&hidden)) {
                    *x += o;
                }
                h
            })
            .collect();
        for (&r, h) in rows.iter().zip(outputs) {
            cache.output[r * w..(r + 1) * w].copy_from_slice(&h);
        }
        if rows.len() == tokens {
            cache.populated = true;
        }
        Ok(())
    }

    /// Attention of one query row. `keys_t` and `values_t` are the caches
    /// transposed to `width x tokens`.
    fn attend(&self, q: &[f64], keys_t: &[f64], values_t: &[f64], tokens: usize) -> Vec<f64> {
        let hd = self.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut out = vec![0.0; self.width];
        let mut logits = vec![0.0; tokens];
        for h in 0..self.heads {
            logits.fill(0.0);
            for c in h * hd..(h + 1) * hd {
                let qc = q[c] * scale;
                for (l, k) in logits.iter_mut().zip(&keys_t[c * tokens..(c + 1) * tokens]) {
                    *l += qc * k;
                }
            }
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for l in logits.iter_mut() {
                *l = (*l - max).exp();
                denom += *l;
            }
            for c in h * hd..(h + 1) * hd {
                out[c] = dot(&logits, &values_t[c * tokens..(c + 1) * tokens]) / denom;
            }
        }
        out
    }
}

fn transpose(m: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; m.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = m[r * cols + c];
        }
    }
    t
}

/// Dot product with four independent accumulators.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Caches carried between sampler steps.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserCaches {
    pub layers: Vec<LayerCache>,
    /// Noise predicted on the previous step.
    pub prev_noise: Option<TokenGrid>,
    /// Noise recorded on the last warmup step.
    pub reference_noise: Option<TokenGrid>,
}

impl DenoiserCaches {
    pub fn is_populated(&self) -> bool {
        self.prev_noise.is_some() && self.layers.iter().all(|l| l.populated)
    }
}

/// Rows recomputed by a forward pass.
#[derive(Debug, Clone, Copy)]
pub enum Rows<'a> {
    Full,
    Selected(&'a TokenIndexSet),
}

/// Small seeded diffusion transformer over an `h x w` token lattice.
///
/// Image tokens are embedded from the latent, text tokens are fixed seeded
/// embeddings that are always recomputed and never pruned. The model output
/// is one noise vector per image token.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDiT {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub model_width: usize,
    pub text_tokens: usize,
    pub embed: Linear,
    pub pos_embed: Vec<f64>,
    pub text_embed: Vec<f64>,
    pub blocks: Vec<Block>,
    pub final_norm: Vec<f64>,
    pub head: Linear,
}

impl ToyDiT {
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SeededRng::new(cfg.seed).substream(WEIGHTS);
        Ok(Self::random(
            cfg.height,
            cfg.width,
            cfg.noise_channels,
            cfg.model_width,
            cfg.layers,
            cfg.heads,
            cfg.mlp_ratio,
            cfg.text_tokens,
            &mut rng,
        ))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn random(
        height: usize,
        width: usize,
        channels: usize,
        model_width: usize,
        layers: usize,
        heads: usize,
        mlp_ratio: usize,
        text_tokens: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let normal = Normal::new(0.0, 0.5).unwrap();
        let embed = Linear::random(channels, model_width, rng);
        let pos_embed = (0..height * width * model_width).map(|_| normal.sample(rng)).collect();
        let text_embed = (0..text_tokens * model_width).map(|_| normal.sample(rng)).collect();
        let blocks = (0..layers)
            .map(|_| Block::random(model_width, heads, mlp_ratio, rng))
            .collect();
        let final_norm = vec![1.0; model_width];
        let head = Linear::random(model_width, channels, rng);
        Self {
            height,
            width,
            channels,
            model_width,
            text_tokens,
            embed,
            pos_embed,
            text_embed,
            blocks,
            final_norm,
            head,
        }
    }

    pub fn image_tokens(&self) -> usize {
        self.height * self.width
    }

    pub fn total_tokens(&self) -> usize {
        self.image_tokens() + self.text_tokens
    }

    pub fn new_caches(&self) -> DenoiserCaches {
        DenoiserCaches {
            layers: self
                .blocks
                .iter()
                .map(|_| LayerCache::new(self.total_tokens(), self.model_width))
                .collect(),
            prev_noise: None,
            reference_noise: None,
        }
    }

    /// Sinusoidal embedding of the flow time `tau` in `[0, 1]`.
    pub fn time_embedding(&self, tau: f64) -> Vec<f64> {
        let half = self.model_width / 2;
        let mut out = vec![0.0; self.model_width];
        for k in 0..half {
            let freq = (-(10_000f64).ln() * k as f64 / half as f64).exp();
            let arg = 1000.0 * tau * freq;
            out[k] = arg.sin();
            out[half + k] = arg.cos();
        }
        out
    }

    /// Layer-0 input rows for `rows`; other rows are left at zero and never read.
    fn embed_rows(&self, x: &TokenGrid, tau: f64, rows: &[usize]) -> Vec<f64> {
        let w = self.model_width;
        let temb = self.time_embedding(tau);
        let mut out = vec![0.0; self.total_tokens() * w];
        for &r in rows {
            let dst = &mut out[r * w..(r + 1) * w];
            if r < self.image_tokens() {
                self.embed.apply(x.token(r), dst);
                for ((d, p), t) in dst.iter_mut().zip(&self.pos_embed[r * w..(r + 1) * w]).zip(&temb) {
                    *d += p + t;
                }
            } else {
                let s = r - self.image_tokens();
                for ((d, e), t) in dst.iter_mut().zip(&self.text_embed[s * w..(s + 1) * w]).zip(&temb) {
                    *d = e + t;
                }
            }
        }
        out
    }

    /// Predicts noise for the latent `x` at flow time `tau`.
    ///
    /// With [`Rows::Selected`], only the selected image tokens (plus every text
    /// token) are pushed through the blocks; unselected tokens keep their
    /// cached hidden states and their previous noise rows.
    pub fn predict_noise(
        &self,
        x: &TokenGrid,
        tau: f64,
        rows: Rows<'_>,
        caches: &mut DenoiserCaches,
    ) -> Result<TokenGrid> {
        if x.shape() != (self.height, self.width, self.channels) {
            return invalid(format!("latent {:?} does not match model", x.shape()));
        }
        let n_img = self.image_tokens();
        let active: Vec<usize> = match rows {
            Rows::Full => (0..self.total_tokens()).collect(),
            Rows::Selected(sel) => {
                if sel.as_slice().last().is_some_and(|&t| t >= n_img) {
                    return invalid("selection refers to a non-image token");
                }
                if !caches.is_populated() {
                    return Err(CatError::State("pruned prediction before warmup populated the caches".into()));
                }
                sel.iter().chain(n_img..self.total_tokens()).collect()
            }
        };

        let mut input = self.embed_rows(x, tau, &active);
        for (l, block) in self.blocks.iter().enumerate() {
            block.forward_rows(&input, &active, &mut caches.layers[l])?;
            input.clone_from(&caches.layers[l].output);
        }

        let w = self.model_width;
        let mut noise = match (&rows, &caches.prev_noise) {
            (Rows::Selected(_), Some(prev)) => prev.clone(),
            _ => TokenGrid::zeros(self.height, self.width, self.channels)?,
        };
        let image_rows: Vec<usize> = active.iter().copied().filter(|&r| r < n_img).collect();
        let heads: Vec<Vec<f64>> = image_rows
            .par_iter()
            .map(|&r| self.head.forward(&rms_norm(&input[r * w..(r + 1) * w], &self.final_norm)))
            .collect();
        for (&r, n) in image_rows.iter().zip(heads) {
            noise.token_mut(r).copy_from_slice(&n);
        }
        let noise = TokenGrid::new(self.height, self.width, self.channels, noise.into_data())?;
        caches.prev_noise = Some(noise.clone());
        Ok(noise)
    }
}
