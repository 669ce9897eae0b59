//! Shared helpers for the integration tests: an independent dense forward
//! oracle for the toy transformer and small configurations.

#![allow(dead_code)]

use cat_prune_core::denoiser::{Block, Linear, ToyDiT};
use cat_prune_core::{DenoiserKind, RunConfig, Strategy, TokenGrid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Small transformer config that keeps a full+pruned pair well under a second.
pub fn toy_config(seed: u64) -> RunConfig {
    RunConfig {
        height: 16,
        width: 16,
        noise_channels: 8,
        model_width: 32,
        layers: 2,
        heads: 4,
        cluster_count: 12,
        seed,
        ..RunConfig::default()
    }
}

pub fn synthetic_config(seed: u64) -> RunConfig {
    RunConfig {
        denoiser: DenoiserKind::SyntheticSmooth,
        strategy: Strategy::FullCat,
        ..toy_config(seed)
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn matmul(x: &[f64], rows: usize, lin: &Linear) -> Vec<f64> {
    let (n, m) = (lin.in_dim, lin.out_dim);
    let mut out = vec![0.0; rows * m];
    for r in 0..rows {
        for c in 0..m {
            let mut acc = lin.bias[c];
            for i in 0..n {
                acc += x[r * n + i] * lin.weight[i * m + c];
            }
            out[r * m + c] = acc;
        }
    }
    out
}

fn rms(x: &[f64], rows: usize, scale: &[f64]) -> Vec<f64> {
    let w = scale.len();
    let mut out = x.to_vec();
    for r in 0..rows {
        let row = &mut out[r * w..(r + 1) * w];
        let ms = row.iter().map(|v| v * v).sum::<f64>() / w as f64;
        let inv = 1.0 / (ms + 1e-6).sqrt();
        for (v, s) in row.iter_mut().zip(scale) {
            *v *= inv * s;
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Dense block forward over every row of `x` (`tokens x width`).
pub fn dense_block(block: &Block, x: &[f64]) -> Vec<f64> {
    let w = block.width;
    let tokens = x.len() / w;
    let hd = w / block.heads;
    let a = rms(x, tokens, &block.attn_norm);
    let q = matmul(&a, tokens, &block.query);
    let k = matmul(&a, tokens, &block.key);
    let v = matmul(&a, tokens, &block.value);
    let mut attn = vec![0.0; tokens * w];
    for h in 0..block.heads {
        for i in 0..tokens {
            let s: Vec<f64> = (0..tokens)
                .map(|j| (0..hd).map(|c| q[i * w + h * hd + c] * k[j * w + h * hd + c]).sum::<f64>() / (hd as f64).sqrt())
                .collect();
            let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|v| (v - max).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..hd {
                attn[i * w + h * hd + c] = (0..tokens).map(|j| e[j] / z * v[j * w + h * hd + c]).sum();
            }
        }
    }
    let o = matmul(&attn, tokens, &block.out_proj);
    let h1: Vec<f64> = x.iter().zip(&o).map(|(a, b)| a + b).collect();
    let m = rms(&h1, tokens, &block.mlp_norm);
    let hidden: Vec<f64> = matmul(&m, tokens, &block.mlp_in).into_iter().map(gelu).collect();
    let out = matmul(&hidden, tokens, &block.mlp_out);
    h1.iter().zip(&out).map(|(a, b)| a + b).collect()
}

/// Keeps `fresh` rows in `active` and `stale` rows elsewhere.
pub fn overwrite_rows(fresh: &[f64], stale: &[f64], width: usize, active: &[bool]) -> Vec<f64> {
    let mut out = stale.to_vec();
    for (r, &on) in active.iter().enumerate() {
        if on {
            out[r * width..(r + 1) * width].copy_from_slice(&fresh[r * width..(r + 1) * width]);
        }
    }
    out
}

/// Dense re-implementation of the toy transformer that remembers every
/// layer's input and output from its last step.
pub struct DenseOracle<'a> {
    pub model: &'a ToyDiT,
    inputs: Vec<Vec<f64>>,
    outputs: Vec<Vec<f64>>,
    noise: Vec<f64>,
}

impl<'a> DenseOracle<'a> {
    pub fn new(model: &'a ToyDiT) -> Self {
        Self {
            model,
            inputs: Vec::new(),
            outputs: Vec::new(),
            noise: Vec::new(),
        }
    }

    fn embed(&self, x: &TokenGrid, tau: f64) -> Vec<f64> {
        let m = self.model;
        let w = m.model_width;
        let half = w / 2;
        let temb: Vec<f64> = (0..w)
            .map(|c| {
                let k = c % half;
                let arg = 1000.0 * tau * (-(10_000f64).ln() * k as f64 / half as f64).exp();
                if c < half {
                    arg.sin()
                } else {
                    arg.cos()
                }
            })
            .collect();
        let n_img = m.image_tokens();
        let mut out = vec![0.0; m.total_tokens() * w];
        let emb = matmul(x.data(), n_img, &m.embed);
        for r in 0..m.total_tokens() {
            for c in 0..w {
                out[r * w + c] = if r < n_img {
                    emb[r * w + c] + m.pos_embed[r * w + c] + temb[c]
                } else {
                    m.text_embed[(r - n_img) * w + c] + temb[c]
                };
            }
        }
        out
    }

    /// One step. `selected` is `None` for a full pass, otherwise the image
    /// tokens recomputed; text tokens are always recomputed.
    pub fn step(&mut self, x: &TokenGrid, tau: f64, selected: Option<&[usize]>) -> Vec<f64> {
        let m = self.model;
        let w = m.model_width;
        let n_img = m.image_tokens();
        let mut active = vec![selected.is_none(); m.total_tokens()];
        if let Some(sel) = selected {
            for &t in sel {
                active[t] = true;
            }
            active[n_img..].iter_mut().for_each(|a| *a = true);
        }
        let mut input = self.embed(x, tau);
        for (l, block) in m.blocks.iter().enumerate() {
            if selected.is_some() {
                input = overwrite_rows(&input, &self.inputs[l], w, &active);
            }
            let dense = dense_block(block, &input);
            let out = match selected {
                None => dense,
                Some(_) => overwrite_rows(&dense, &self.outputs[l], w, &active),
            };
            if l < self.inputs.len() {
                self.inputs[l] = input;
                self.outputs[l] = out.clone();
            } else {
                self.inputs.push(input);
                self.outputs.push(out.clone());
            }
            input = out;
        }
        let head = matmul(&rms(&input[..n_img * w], n_img, &m.final_norm), n_img, &m.head);
        let noise = match selected {
            None => head,
            Some(_) => overwrite_rows(&head, &self.noise, m.channels, &active[..n_img]),
        };
        self.noise = noise.clone();
        noise
    }
}
