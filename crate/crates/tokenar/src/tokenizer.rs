//! Deterministic palette tokenizer.
//!
//! A fixed codebook of RGB colors stands in for a learned VQ vocabulary:
//! images are cut into square patches, each patch's mean color is snapped to
//! the nearest codebook entry, and decoding paints each token back as a solid
//! patch. On palette-aligned images the round trip is bit-exact, which is
//! what makes identity preservation measurable downstream.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TokenArError};
use crate::rng;

/// The discrete color vocabulary. Entries are RGB triples in [0,1], exactly
/// representable as 8-bit values so PPM round trips are lossless.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub entries: Vec<[f32; 3]>,
    pub seed: u64,
}

/// A w×h RGB image, row-major, channels in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    pub width: usize,
    pub height: usize,
    /// len = width * height * 3
    pub pixels: Vec<f32>,
}

/// A grid of codebook indices, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenGrid {
    pub cols: usize,
    pub rows: usize,
    pub tokens: Vec<u32>,
}

impl ImageGrid {
    pub fn new(width: usize, height: usize) -> Self {
        ImageGrid {
            width,
            height,
            pixels: vec![0.0; width * height * 3],
        }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }
}

impl TokenGrid {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    #[inline]
    pub fn at(&self, col: usize, row: usize) -> u32 {
        self.tokens[row * self.cols + col]
    }
}

/// Builds the deterministic palette for `(seed, k)`.
///
/// Colors come from the smallest cubic RGB lattice with at least `k` points,
/// snapped to exact 8-bit values and taken in a seed-shuffled order. The full
/// lattice is maximally spread for cubic `k` (e.g. the default k=64 covers
/// the 4×4×4 lattice); the seed controls which points survive when k is not
/// a perfect cube and in which order entries are numbered.
pub fn build_codebook(seed: u64, k: usize) -> Result<Codebook> {
    if k < 2 {
        return Err(TokenArError::invalid(format!(
            "codebook size must be at least 2, got {k}"
        )));
    }
    let mut side = 2usize;
    while side * side * side < k {
        side += 1;
    }
    let mut lattice = Vec::with_capacity(side * side * side);
    for r in 0..side {
        for g in 0..side {
            for b in 0..side {
                lattice.push([level(r, side), level(g, side), level(b, side)]);
            }
        }
    }
    let mut stream = rng::stream(seed, 0x50A1_E77E);
    let order = rng::shuffled_indices(&mut stream, lattice.len());
    let entries: Vec<[f32; 3]> = order[..k].iter().map(|&i| lattice[i]).collect();
    Ok(Codebook { entries, seed })
}

/// 8-bit-exact lattice level: round(255*i/(side-1))/255.
fn level(i: usize, side: usize) -> f32 {
    let u = ((255.0 * i as f64 / (side - 1) as f64).round()) as u8;
    u as f32 / 255.0
}

/// Maps an image to its token grid: each `patch`×`patch` block's mean color
/// goes to the nearest codebook entry under squared Euclidean distance, ties
/// broken by lowest index.
pub fn quantize(image: &ImageGrid, codebook: &Codebook, patch: usize) -> Result<TokenGrid> {
    if patch == 0 || image.width % patch != 0 || image.height % patch != 0 {
        return Err(TokenArError::invalid(format!(
            "image {}x{} not divisible by patch {}",
            image.width, image.height, patch
        )));
    }
    let cols = image.width / patch;
    let rows = image.height / patch;
    let mut tokens = Vec::with_capacity(cols * rows);
    for row in 0..rows {
        for col in 0..cols {
            let mean = patch_mean(image, col * patch, row * patch, patch);
            tokens.push(nearest_entry(&mean, &codebook.entries));
        }
    }
    Ok(TokenGrid { cols, rows, tokens })
}

fn patch_mean(image: &ImageGrid, x0: usize, y0: usize, patch: usize) -> [f64; 3] {
    let mut acc = [0.0f64; 3];
    for y in y0..y0 + patch {
        for x in x0..x0 + patch {
            let p = image.pixel(x, y);
            acc[0] += p[0] as f64;
            acc[1] += p[1] as f64;
            acc[2] += p[2] as f64;
        }
    }
    let n = (patch * patch) as f64;
    [acc[0] / n, acc[1] / n, acc[2] / n]
}

fn nearest_entry(color: &[f64; 3], entries: &[[f32; 3]]) -> u32 {
    let mut best = 0u32;
    let mut best_d = f64::INFINITY;
    for (i, e) in entries.iter().enumerate() {
        let dr = color[0] - e[0] as f64;
        let dg = color[1] - e[1] as f64;
        let db = color[2] - e[2] as f64;
        let d = dr * dr + dg * dg + db * db;
        if d < best_d {
            best_d = d;
            best = i as u32;
        }
    }
    best
}

/// Paints each token as a solid `patch`×`patch` block of its codebook color.
pub fn dequantize(tokens: &TokenGrid, codebook: &Codebook, patch: usize) -> Result<ImageGrid> {
    let k = codebook.entries.len() as u32;
    if let Some(&bad) = tokens.tokens.iter().find(|&&t| t >= k) {
        return Err(TokenArError::invalid(format!(
            "token {bad} out of range for codebook size {k}"
        )));
    }
    let mut image = ImageGrid::new(tokens.cols * patch, tokens.rows * patch);
    for row in 0..tokens.rows {
        for col in 0..tokens.cols {
            let color = codebook.entries[tokens.at(col, row) as usize];
            for y in row * patch..(row + 1) * patch {
                for x in col * patch..(col + 1) * patch {
                    image.set_pixel(x, y, color);
                }
            }
        }
    }
    Ok(image)
}
