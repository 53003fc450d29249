//! Synthetic crop-to-reveal grid task.
//!
//! A `G x G` grid of cells, each showing one of `K` glyphs drawn as a
//! 4x4 block pattern in the green channel. Every glyph lights exactly
//! half of its blocks, so a cell-level average (the global view) is the
//! same for all of them; only a crop resolves the pattern. One cell is
//! outlined in red and the question asks for its glyph.

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::rollout::RolloutSample;
use crate::types::{BBox, MAX_PIXELS, MIN_PIXELS};
use crate::vision::WorkingImage;

pub const PATTERN_SIDE: u32 = 4;
/// Length of the fine feature vector read from an injected region.
pub const FEATURE_LEN: usize = (PATTERN_SIDE * PATTERN_SIDE) as usize;
pub const QUESTION: &str = "What symbol is in the highlighted cell?";
const BORDER_PX: u32 = 2;
const MIN_PATTERN_DISTANCE: u32 = 6;

pub const SYMBOL_NAMES: [&str; 16] = [
    "circle", "cross", "square", "star", "ring", "arrow", "wave", "moon", "sun", "key", "bell", "leaf", "fish", "bird",
    "tree", "drop",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyTaskConfig {
    pub grid: u32,
    pub symbols: usize,
    pub cell_px: u32,
}

impl Default for ToyTaskConfig {
    fn default() -> Self {
        ToyTaskConfig {
            grid: 3,
            symbols: 8,
            cell_px: 24,
        }
    }
}

/// Fixture descriptor: everything needed to regenerate the splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyFixture {
    pub grid: u32,
    pub symbols: usize,
    pub cell_px: u32,
    pub seed: u64,
    pub train_size: usize,
    pub eval_size: usize,
}

impl ToyFixture {
    pub fn config(&self) -> ToyTaskConfig {
        ToyTaskConfig {
            grid: self.grid,
            symbols: self.symbols,
            cell_px: self.cell_px,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ToyTaskError {
    #[error("invalid toy task: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone)]
pub struct ToyTask {
    config: ToyTaskConfig,
    patterns: Vec<u16>,
}

/// All 16-bit masks with eight bits set, greedily thinned to a code with
/// minimum Hamming distance `MIN_PATTERN_DISTANCE`.
fn glyph_patterns(k: usize) -> Vec<u16> {
    let mut chosen: Vec<u16> = Vec::new();
    for m in 0u32..=u16::MAX as u32 {
        let m = m as u16;
        if m.count_ones() != 8 {
            continue;
        }
        if chosen.iter().all(|c| (c ^ m).count_ones() >= MIN_PATTERN_DISTANCE) {
            chosen.push(m);
            if chosen.len() == k {
                break;
            }
        }
    }
    chosen
}

impl ToyTask {
    pub fn new(config: ToyTaskConfig) -> Result<Self, ToyTaskError> {
        if !(2..=SYMBOL_NAMES.len()).contains(&config.symbols) {
            return Err(ToyTaskError::Invalid(format!(
                "symbols must be in 2..={}, got {}",
                SYMBOL_NAMES.len(),
                config.symbols
            )));
        }
        if config.grid == 0 || config.cell_px == 0 || config.cell_px % PATTERN_SIDE != 0 {
            return Err(ToyTaskError::Invalid(format!(
                "grid must be positive and cell_px a positive multiple of {PATTERN_SIDE}"
            )));
        }
        let side = config.grid as u64 * config.cell_px as u64;
        if side * side < MIN_PIXELS || side * side > MAX_PIXELS {
            return Err(ToyTaskError::Invalid(format!(
                "a {side}x{side} image is outside the pixel bounds"
            )));
        }
        let patterns = glyph_patterns(config.symbols);
        Ok(ToyTask { config, patterns })
    }

    pub fn config(&self) -> &ToyTaskConfig {
        &self.config
    }

    pub fn cells(&self) -> usize {
        (self.config.grid * self.config.grid) as usize
    }

    pub fn symbols(&self) -> usize {
        self.config.symbols
    }

    pub fn image_side(&self) -> u32 {
        self.config.grid * self.config.cell_px
    }

    pub fn symbol_name(&self, k: usize) -> &'static str {
        SYMBOL_NAMES[k]
    }

    pub fn symbol_index(&self, name: &str) -> Option<usize> {
        SYMBOL_NAMES[..self.config.symbols].iter().position(|n| *n == name)
    }

    pub fn cell_bbox(&self, cell: usize) -> BBox {
        let g = self.config.grid;
        let c = self.config.cell_px;
        let (row, col) = (cell as u32 / g, cell as u32 % g);
        BBox {
            x1: col * c,
            y1: row * c,
            x2: (col + 1) * c,
            y2: (row + 1) * c,
        }
    }

    pub fn pattern_bits(&self, k: usize) -> [f64; FEATURE_LEN] {
        let mut out = [0.0; FEATURE_LEN];
        for (i, o) in out.iter_mut().enumerate() {
            *o = ((self.patterns[k] >> i) & 1) as f64;
        }
        out
    }

    pub fn render(&self, symbols: &[usize], highlighted: usize) -> RgbImage {
        let side = self.image_side();
        let c = self.config.cell_px;
        let block = c / PATTERN_SIDE;
        let g = self.config.grid;
        RgbImage::from_fn(side, side, |x, y| {
            let (col, row) = (x / c, y / c);
            let cell = (row * g + col) as usize;
            let (lx, ly) = (x % c, y % c);
            let bit = (ly / block) * PATTERN_SIDE + lx / block;
            let green = if (self.patterns[symbols[cell]] >> bit) & 1 == 1 { 255 } else { 0 };
            let on_border = lx < BORDER_PX || ly < BORDER_PX || lx >= c - BORDER_PX || ly >= c - BORDER_PX;
            let red = if cell == highlighted && on_border { 255 } else { 0 };
            Rgb([red, green, 0])
        })
    }

    /// One sample with a given target glyph; other cells are random.
    pub fn sample_with_target(&self, id: String, target_symbol: usize, rng: &mut impl Rng) -> RolloutSample {
        let cells = self.cells();
        let highlighted = rng.random_range(0..cells);
        let mut symbols: Vec<usize> = (0..cells).map(|_| rng.random_range(0..self.config.symbols)).collect();
        symbols[highlighted] = target_symbol;
        RolloutSample {
            id,
            image: WorkingImage::from_normalized(self.render(&symbols, highlighted)),
            question: QUESTION.to_string(),
            answer: self.symbol_name(target_symbol).to_string(),
        }
    }

    /// `n` samples keyed by `seed`. With `balanced`, target glyphs cycle
    /// through the alphabet so each appears equally often (up to `n % K`).
    pub fn generate(&self, prefix: &str, seed: u64, n: usize, balanced: bool) -> Vec<RolloutSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let target = if balanced {
                    i % self.config.symbols
                } else {
                    rng.random_range(0..self.config.symbols)
                };
                self.sample_with_target(format!("{prefix}-{i}"), target, &mut rng)
            })
            .collect()
    }

    pub fn splits(&self, fixture: &ToyFixture) -> (Vec<RolloutSample>, Vec<RolloutSample>) {
        let train = self.generate("train", fixture.seed, fixture.train_size, false);
        let eval = self.generate("eval", fixture.seed ^ 0x5eed_e7a1, fixture.eval_size, true);
        (train, eval)
    }

    /// Per-cell outline marker (red mean over the outline's share of the
    /// cell, so a marked cell reads 1) and coarse glyph (green mean).
    pub fn global_features(&self, image: &RgbImage) -> Vec<f64> {
        let g = self.config.grid;
        let (w, h) = image.dimensions();
        let cells = self.cells();
        let c = self.config.cell_px as f64;
        let inner = (c - 2.0 * BORDER_PX as f64).max(0.0);
        let outline_share = (c * c - inner * inner) / (c * c);
        let mut out = vec![0.0; 2 * cells];
        for row in 0..g {
            for col in 0..g {
                let (x0, x1) = bin(col, g, w);
                let (y0, y1) = bin(row, g, h);
                let (r, gr) = channel_means(image, x0, x1, y0, y1);
                let cell = (row * g + col) as usize;
                out[cell] = r / outline_share;
                out[cells + cell] = gr;
            }
        }
        out
    }

    /// 4x4 average pool of the green channel over a region image.
    pub fn fine_features(&self, region: &RgbImage) -> [f64; FEATURE_LEN] {
        let (w, h) = region.dimensions();
        let mut out = [0.0; FEATURE_LEN];
        for by in 0..PATTERN_SIDE {
            for bx in 0..PATTERN_SIDE {
                let (x0, x1) = bin(bx, PATTERN_SIDE, w);
                let (y0, y1) = bin(by, PATTERN_SIDE, h);
                out[(by * PATTERN_SIDE + bx) as usize] = channel_means(region, x0, x1, y0, y1).1;
            }
        }
        out
    }

    /// Nearest glyph to a fine feature vector (squared distance).
    pub fn decode(&self, features: &[f64; FEATURE_LEN]) -> usize {
        (0..self.config.symbols)
            .min_by(|&a, &b| {
                let da = sq_dist(&self.pattern_bits(a), features);
                let db = sq_dist(&self.pattern_bits(b), features);
                da.total_cmp(&db)
            })
            .unwrap_or(0)
    }

    /// Cell with the strongest outline marker.
    pub fn highlighted_cell(&self, image: &RgbImage) -> usize {
        let feats = self.global_features(image);
        (0..self.cells())
            .max_by(|&a, &b| feats[a].total_cmp(&feats[b]).then(b.cmp(&a)))
            .unwrap_or(0)
    }
}

fn sq_dist(a: &[f64; FEATURE_LEN], b: &[f64; FEATURE_LEN]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Pixel range of bin `i` of `n` over a length, never empty.
fn bin(i: u32, n: u32, len: u32) -> (u32, u32) {
    let start = ((i as u64 * len as u64) / n as u64) as u32;
    let end = (((i + 1) as u64 * len as u64) / n as u64) as u32;
    let start = start.min(len - 1);
    (start, end.max(start + 1))
}

fn channel_means(image: &RgbImage, x0: u32, x1: u32, y0: u32, y1: u32) -> (f64, f64) {
    let (mut r, mut g) = (0u64, 0u64);
    for y in y0..y1 {
        for x in x0..x1 {
            let p = image.get_pixel(x, y);
            r += p[0] as u64;
            g += p[1] as u64;
        }
    }
    let n = ((x1 - x0) * (y1 - y0)) as f64 * 255.0;
    (r as f64 / n, g as f64 / n)
}
