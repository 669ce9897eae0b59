//! File formats: binary PGM (P5), a flat little-endian f64 grid dump and the
//! per-step noise CSV.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{invalid, Result};
use crate::grid::{TokenGrid, TokenIndexSet};

/// An 8-bit grayscale image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return invalid(format!("{width}x{height} image needs {} pixels, got {}", width * height, pixels.len()));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut reader = BufReader::new(bytes);
        let mut fields = Vec::new();
        while fields.len() < 4 {
            let mut line = String::new();
            if reader.read_line(&mut line)? == 0 {
                return invalid("truncated PGM header");
            }
            let content = line.split('#').next().unwrap_or("");
            fields.extend(content.split_whitespace().map(str::to_owned));
        }
        if fields[0] != "P5" || fields[3] != "255" {
            return invalid("only 8-bit binary PGM (P5, maxval 255) is supported");
        }
        let parse = |s: &str| s.parse::<usize>().or_else(|_| invalid(format!("bad PGM dimension '{s}'")));
        let (width, height) = (parse(&fields[1])?, parse(&fields[2])?);
        let mut pixels = Vec::new();
        reader.read_to_end(&mut pixels)?;
        Self::new(width, height, pixels)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

/// Selected tokens white (255), the rest black.
pub fn selection_mask(selected: &TokenIndexSet, height: usize, width: usize) -> Result<GrayImage> {
    let pixels = selected
        .to_mask(height * width)
        .into_iter()
        .map(|m| if m { 255 } else { 0 })
        .collect();
    GrayImage::new(width, height, pixels)
}

/// Gray level of cluster `id` out of `k`: evenly spaced over 0..=255.
pub fn cluster_gray(id: usize, k: usize) -> u8 {
    if k <= 1 {
        0
    } else {
        ((id * 255) as f64 / (k - 1) as f64).round() as u8
    }
}

pub fn cluster_image(assignment: &[usize], k: usize, height: usize, width: usize) -> Result<GrayImage> {
    GrayImage::new(width, height, assignment.iter().map(|&c| cluster_gray(c, k)).collect())
}

/// One channel of a grid, min-max scaled to 0..=255.
pub fn channel_image(grid: &TokenGrid, channel: usize) -> Result<GrayImage> {
    if channel >= grid.channels() {
        return invalid(format!("channel {channel} out of range"));
    }
    let vals: Vec<f64> = (0..grid.token_count()).map(|t| grid.get(t, channel)).collect();
    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let pixels = vals
        .iter()
        .map(|v| ((v - lo) / span * 255.0).round() as u8)
        .collect();
    GrayImage::new(grid.width(), grid.height(), pixels)
}

/// 16-byte header `{h, w, d, step}` as little-endian u32, then `h*w*d` f64 LE.
pub fn encode_grid(grid: &TokenGrid, step: u32) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + grid.data().len() * 8);
    for v in [grid.height() as u32, grid.width() as u32, grid.channels() as u32, step] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in grid.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_grid(bytes: &[u8]) -> Result<(TokenGrid, u32)> {
    if bytes.len() < 16 {
        return invalid("grid file shorter than its header");
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i * 4..i * 4 + 4].try_into().unwrap());
    let (h, w, d, step) = (word(0) as usize, word(1) as usize, word(2) as usize, word(3));
    let body = &bytes[16..];
    if body.len() != h * w * d * 8 {
        return invalid(format!("grid body has {} bytes, header implies {}", body.len(), h * w * d * 8));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((TokenGrid::new(h, w, d, data)?, step))
}

pub fn write_grid(path: &Path, grid: &TokenGrid, step: u32) -> Result<()> {
    fs::write(path, encode_grid(grid, step))?;
    Ok(())
}

pub fn read_grid(path: &Path) -> Result<(TokenGrid, u32)> {
    decode_grid(&fs::read(path)?)
}

/// `token_index,rn_norm,frequency` rows. Floats use Rust's shortest
/// round-trip formatting so the file parses back to identical values.
pub fn write_noise_csv(out: &mut impl Write, rn_norms: &[f64], frequencies: &[f64]) -> Result<()> {
    writeln!(out, "token_index,rn_norm,frequency")?;
    for (t, (n, f)) in rn_norms.iter().zip(frequencies).enumerate() {
        writeln!(out, "{t},{n:?},{f:?}")?;
    }
    Ok(())
}

pub fn read_noise_csv(text: &str) -> Result<Vec<(usize, f64, f64)>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 3 {
            return invalid(format!("csv line {} has {} columns", i + 1, cols.len()));
        }
        let bad = |_| crate::error::CatError::InvalidArgument(format!("bad number on csv line {}", i + 1));
        rows.push((
            cols[0].parse().map_err(|_| crate::error::CatError::InvalidArgument(format!("bad index on csv line {}", i + 1)))?,
            cols[1].parse().map_err(bad)?,
            cols[2].parse().map_err(bad)?,
        ));
    }
    Ok(rows)
}
