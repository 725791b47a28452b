//! Ratio measurement of one scheme over a layer-compressibility profile.

use serde::Serialize;
use thiserror::Error;

use super::synth::{correlated_block, LayerCompressProfile};
use super::{compress, decompress, reconstruction_quality, BypassStats, Scheme};
use crate::seed::{rng_for, stream};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProfileError {
    #[error("bad layer count `{0}`")]
    Layers(String),
    #[error("bad ratio `{0}`")]
    Ratio(String),
    #[error("ratios must lie in [1, 8]")]
    Range,
    #[error("profile is empty")]
    Empty,
}

/// `default`, `default:<layers>`, or a comma / whitespace separated list of
/// per-layer ratios.
pub fn parse_profile(text: &str) -> Result<LayerCompressProfile, ProfileError> {
    let t = text.trim();
    if t == "default" {
        return Ok(LayerCompressProfile::default_for(80));
    }
    if let Some(n) = t.strip_prefix("default:") {
        let layers: usize = n.trim().parse().map_err(|_| ProfileError::Layers(n.into()))?;
        if layers == 0 {
            return Err(ProfileError::Layers(n.into()));
        }
        return Ok(LayerCompressProfile::default_for(layers));
    }
    let ratios = t
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| ProfileError::Ratio(s.into())))
        .collect::<Result<Vec<_>, _>>()?;
    if ratios.is_empty() {
        return Err(ProfileError::Empty);
    }
    LayerCompressProfile::from_ratios(ratios).ok_or(ProfileError::Range)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerBench {
    pub layer: usize,
    pub target: f64,
    pub ratio: f64,
    pub bypass: f64,
    pub quality: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub scheme: Scheme,
    pub layers: Vec<LayerBench>,
    pub mean_target: f64,
    /// Mean of per-block ratios.
    pub mean_ratio: f64,
    /// Bytes in over bytes out across every block.
    pub aggregate_ratio: f64,
    pub bypass: f64,
    pub quality: f64,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,target,ratio,bypass,quality\n");
        for l in &self.layers {
            s.push_str(&format!("{},{:.4},{:.4},{:.4},{:.6}\n", l.layer, l.target, l.ratio, l.bypass, l.quality));
        }
        s.push_str(&format!(
            "mean,{:.4},{:.4},{:.4},{:.6}\n",
            self.mean_target, self.mean_ratio, self.bypass, self.quality
        ));
        s
    }
}

/// Compresses `blocks` correlated `rows x cols` pages per layer, each drawn
/// to hit that layer's target ratio, and checks every round trip.
pub fn bench(
    profile: &LayerCompressProfile,
    scheme: Scheme,
    rows: usize,
    cols: usize,
    blocks: usize,
    seed: u64,
) -> BenchReport {
    let mut all = BypassStats::default();
    let mut layers = Vec::with_capacity(profile.layers());
    let (mut ratio_sum, mut quality_sum, mut n) = (0.0, 0.0, 0.0);
    for layer in 0..profile.layers() {
        let mut rng = rng_for(seed, &[stream::CODEC, 0xBE7C, layer as u64]);
        let mut stats = BypassStats::default();
        let (mut r, mut q) = (0.0, 0.0);
        for _ in 0..blocks.max(1) {
            let b = correlated_block(&mut rng, rows.max(1), cols.max(1), profile.ratio(layer));
            let cb = compress(&b, scheme);
            let back = decompress(&cb).expect("fresh block decodes");
            stats.record(scheme, &cb);
            all.record(scheme, &cb);
            r += cb.ratio();
            q += reconstruction_quality(&b, &back);
        }
        let m = blocks.max(1) as f64;
        ratio_sum += r;
        quality_sum += q;
        n += m;
        layers.push(LayerBench {
            layer,
            target: profile.ratio(layer),
            ratio: r / m,
            bypass: stats.alpha(),
            quality: q / m,
        });
    }
    BenchReport {
        scheme,
        mean_target: profile.mean(),
        mean_ratio: ratio_sum / n,
        aggregate_ratio: all.ratio(),
        bypass: all.alpha(),
        quality: quality_sum / n,
        layers,
    }
}
