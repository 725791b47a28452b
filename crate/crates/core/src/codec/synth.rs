//! Synthetic KV pages with controllable compressibility.
//!
//! [`correlated_block`] builds rows as piecewise-linear walks on the INT8 grid:
//! each segment has a constant integer slope, so after quantization and delta
//! coding a segment becomes one RLE run. The mean segment length is derived
//! from the requested compression ratio.

use half::f16;
use rand::Rng;
use rand_distr::{Distribution, Geometric, StandardNormal};

use super::{KvBlock, HEADER_BYTES, QMAX};

/// Expected per-layer compression ratio.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCompressProfile {
    ratios: Vec<f64>,
}

pub const EARLY_RATIO: f64 = 3.6;
pub const MIDDLE_RATIO: f64 = 3.2;
pub const LATE_RATIO: f64 = 2.8;

impl LayerCompressProfile {
    /// Early third of the stack at 3.6, late third at 2.8, the rest at 3.2.
    pub fn default_for(layers: usize) -> Self {
        let l = layers.max(1) as f64;
        let ratios = (0..layers.max(1))
            .map(|i| {
                let pos = (i as f64 + 0.5) / l;
                if pos < 1.0 / 3.0 {
                    EARLY_RATIO
                } else if pos > 2.0 / 3.0 {
                    LATE_RATIO
                } else {
                    MIDDLE_RATIO
                }
            })
            .collect();
        Self { ratios }
    }

    pub fn from_ratios(ratios: Vec<f64>) -> Option<Self> {
        (!ratios.is_empty() && ratios.iter().all(|r| (1.0..=8.0).contains(r))).then_some(Self { ratios })
    }

    pub fn ratio(&self, layer: usize) -> f64 {
        self.ratios[layer.min(self.ratios.len() - 1)]
    }

    pub fn layers(&self) -> usize {
        self.ratios.len()
    }

    pub fn mean(&self) -> f64 {
        self.ratios.iter().sum::<f64>() / self.ratios.len() as f64
    }
}

/// Mean segment length that makes an `rows x cols` page hit `target_ratio`
/// (stored bytes including the header) under pair RLE.
pub fn segment_mean_for_ratio(rows: usize, cols: usize, target_ratio: f64) -> f64 {
    let raw = (rows * cols * 2) as f64;
    let runs_total = ((raw / target_ratio - HEADER_BYTES as f64) / 2.0).max(rows as f64);
    // Each row spends one run on its leading raw byte.
    let segs_per_row = (runs_total / rows as f64 - 1.0).max(1.0);
    ((cols - 1) as f64 / segs_per_row).max(1.0)
}

/// Smooth, spatially correlated page whose full-pipeline ratio is close to
/// `target_ratio`. Values are exact multiples of `amplitude / 127` so the
/// quantized grid reproduces the integer walk.
pub fn correlated_block<R: Rng + ?Sized>(
    rng: &mut R,
    rows: usize,
    cols: usize,
    target_ratio: f64,
) -> KvBlock {
    let mean = segment_mean_for_ratio(rows, cols, target_ratio);
    let geo = Geometric::new((1.0 / mean).min(1.0)).expect("valid probability");
    let amplitude = f64::from(f16::from_f64(rng.random_range(0.25..4.0)));
    let unit = amplitude / f64::from(QMAX);
    let mut values = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let mut level: i32 = if r == 0 {
            if rng.random_bool(0.5) {
                QMAX
            } else {
                -QMAX
            }
        } else {
            rng.random_range(-64..=64)
        };
        let mut prev_slope = i32::MAX;
        let mut left = 0u64;
        let mut slope = 0i32;
        values.push(level);
        for _ in 1..cols {
            if left == 0 {
                left = (geo.sample(rng) + 1).min(63);
                slope = pick_slope(rng, level, left as i32, prev_slope);
                prev_slope = slope;
            }
            level += slope;
            left -= 1;
            values.push(level);
        }
    }
    let values = values
        .into_iter()
        .map(|z| f64::from(f16::from_f64(f64::from(z) * unit)))
        .collect();
    KvBlock::new(rows, cols, values).expect("generator stays finite")
}

fn pick_slope<R: Rng + ?Sized>(rng: &mut R, level: i32, len: i32, prev: i32) -> i32 {
    const SLOPES: [i32; 5] = [-2, -1, 0, 1, 2];
    let fits = |s: i32| (level + s * len).abs() <= QMAX;
    let options: Vec<i32> = SLOPES.iter().copied().filter(|&s| s != prev && fits(s)).collect();
    if options.is_empty() {
        // Head back toward zero; always in range for len <= 63.
        let s = if level > 0 { -1 } else { 1 };
        if s == prev {
            2 * s
        } else {
            s
        }
    } else {
        options[rng.random_range(0..options.len())]
    }
}

/// Independent uniform values in `[-amp, amp]`, rounded to FP16.
pub fn noise_block<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, amp: f32) -> KvBlock {
    let data: Vec<f32> = (0..rows * cols).map(|_| rng.random_range(-amp..=amp)).collect();
    KvBlock::from_f32(rows, cols, &data).expect("finite noise")
}

/// Gaussian values clustered around zero, as seen in trained KV tensors.
pub fn gaussian_block<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, sigma: f32) -> KvBlock {
    let data: Vec<f32> = (0..rows * cols)
        .map(|_| {
            let z: f32 = StandardNormal.sample(rng);
            (z * sigma).clamp(-60000.0, 60000.0)
        })
        .collect();
    KvBlock::from_f32(rows, cols, &data).expect("finite gaussian")
}

/// Mostly zeros with a few spikes.
pub fn sparse_block<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, density: f64) -> KvBlock {
    let data: Vec<f32> = (0..rows * cols)
        .map(|_| {
            if rng.random_bool(density) {
                rng.random_range(-8.0f32..8.0)
            } else {
                0.0
            }
        })
        .collect();
    KvBlock::from_f32(rows, cols, &data).expect("finite sparse")
}

/// Draws one of the shapes above at random, with random dimensions up to
/// `max_rows x max_cols`.
pub fn mixed_block<R: Rng + ?Sized>(rng: &mut R, max_rows: usize, max_cols: usize) -> KvBlock {
    let rows = rng.random_range(1..=max_rows);
    let cols = rng.random_range(1..=max_cols);
    match rng.random_range(0..5u8) {
        0 => {
            let amp = rng.random_range(0.01f32..100.0);
            noise_block(rng, rows, cols, amp)
        }
        1 => {
            let sigma = rng.random_range(0.01f32..10.0);
            gaussian_block(rng, rows, cols, sigma)
        }
        2 => {
            let density = rng.random_range(0.0..0.3);
            sparse_block(rng, rows, cols, density)
        }
        3 if cols > 1 => {
            let target = rng.random_range(1.5..4.0);
            correlated_block(rng, rows, cols, target)
        }
        _ => {
            let v = f64::from(f16::from_f64(rng.random_range(-5.0..5.0)));
            KvBlock::new(rows, cols, vec![v; rows * cols]).expect("finite constant")
        }
    }
}
