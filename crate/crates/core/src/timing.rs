//! Closed-form latency, bandwidth and throughput model.
//!
//! Every tick cost the engine charges comes from here. Cycle quantities are
//! in the single `f_clk` domain; nanosecond inputs are converted by rounding
//! up to whole cycles.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelGeometry;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TimingError {
    #[error("latency parameter `{field}` must be positive (got {value})")]
    NonPositive { field: &'static str, value: f64 },
    #[error("utilization component {index} must lie in (0, 1] (got {value})")]
    Utilization { index: usize, value: f64 },
    #[error("utilization vector is empty")]
    EmptyUtilization,
}

/// Hardware constants of the memory-side pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyParams {
    /// Accelerator clock in Hz.
    pub f_clk: f64,
    pub l_pred: u64,
    /// Budgeted translation latency used in the prefetch decomposition.
    pub l_atu: u64,
    pub l_dma: u64,
    pub l_walk: u64,
    pub tlb_hit_latency: u64,
    pub l_crit_decomp: u64,
    pub l_bypass: u64,
    pub pipeline_depth: u64,
    pub ii: u64,
    pub omega_max: usize,
    /// Bytes per speculative entry before compression.
    pub s_entry: u64,
    /// Far-memory link bandwidth per direction, bytes/s.
    pub bw_cxl: f64,
    /// Cache-engine HBM bandwidth, bytes/s.
    pub bw_hbm: f64,
    /// GPU HBM bandwidth, bytes/s.
    pub bw_gpu_hbm: f64,
    pub c_hbm: u32,
    pub sync_miss_ns: f64,
    pub prefetch_hit_ns: f64,
    /// GPU dense peak, FLOP/s.
    pub gpu_peak_flops: f64,
}

impl Default for LatencyParams {
    fn default() -> Self {
        Self {
            f_clk: 800e6,
            l_pred: 64,
            l_atu: 4,
            l_dma: 12,
            l_walk: 15,
            tlb_hit_latency: 1,
            l_crit_decomp: 25,
            l_bypass: 5,
            pipeline_depth: 20,
            ii: 1,
            omega_max: 16,
            s_entry: 4096,
            bw_cxl: 64e9,
            bw_hbm: 1600e9,
            bw_gpu_hbm: 1600e9,
            c_hbm: 16,
            sync_miss_ns: 1850.0,
            prefetch_hit_ns: 285.0,
            gpu_peak_flops: 312e12,
        }
    }
}

impl LatencyParams {
    pub fn validate(&self) -> Result<(), TimingError> {
        let reals = [
            ("f_clk", self.f_clk),
            ("bw_cxl", self.bw_cxl),
            ("bw_hbm", self.bw_hbm),
            ("bw_gpu_hbm", self.bw_gpu_hbm),
            ("sync_miss_ns", self.sync_miss_ns),
            ("prefetch_hit_ns", self.prefetch_hit_ns),
            ("gpu_peak_flops", self.gpu_peak_flops),
        ];
        for (field, value) in reals {
            if !(value.is_finite() && value > 0.0) {
                return Err(TimingError::NonPositive { field, value });
            }
        }
        let counts = [
            ("l_dma", self.l_dma),
            ("l_walk", self.l_walk),
            ("tlb_hit_latency", self.tlb_hit_latency),
            ("l_crit_decomp", self.l_crit_decomp),
            ("l_bypass", self.l_bypass),
            ("pipeline_depth", self.pipeline_depth),
            ("ii", self.ii),
            ("omega_max", self.omega_max as u64),
            ("s_entry", self.s_entry),
            ("c_hbm", u64::from(self.c_hbm)),
        ];
        for (field, value) in counts {
            if value == 0 {
                return Err(TimingError::NonPositive { field, value: 0.0 });
            }
        }
        Ok(())
    }

    pub fn ns_to_cycles(&self, ns: f64) -> u64 {
        ceil_cycles(ns * 1e-9 * self.f_clk)
    }

    pub fn cycles_to_ns(&self, cycles: u64) -> f64 {
        cycles as f64 / self.f_clk * 1e9
    }

    pub fn secs_to_cycles(&self, secs: f64) -> u64 {
        ceil_cycles(secs * self.f_clk)
    }

    /// Link serialization time for `bytes` in whole cycles.
    pub fn link_cycles(&self, bytes: u64) -> u64 {
        ceil_cycles(bytes as f64 / self.bw_cxl * self.f_clk)
    }

    pub fn sync_miss_cycles(&self) -> u64 {
        self.ns_to_cycles(self.sync_miss_ns)
    }

    pub fn prefetch_hit_cycles(&self) -> u64 {
        self.ns_to_cycles(self.prefetch_hit_ns)
    }
}

/// Rounds up, ignoring float noise below a millionth of a cycle.
fn ceil_cycles(x: f64) -> u64 {
    let nearest = x.round();
    if (x - nearest).abs() < 1e-6 {
        nearest.max(0.0) as u64
    } else {
        x.ceil().max(0.0) as u64
    }
}

/// `L_pred + L_ATU + L_DMA`.
pub fn prefetch_latency_cycles(p: &LatencyParams) -> u64 {
    p.l_pred + p.l_atu + p.l_dma
}

/// `hit + (1 - H)·walk`.
pub fn atu_expected_latency(h_tlb: f64, hit: f64, walk: f64) -> f64 {
    hit + (1.0 - h_tlb) * walk
}

/// `(1 - α)·L_crit + α·L_bypass`.
pub fn decomp_effective_latency(alpha: f64, p: &LatencyParams) -> f64 {
    (1.0 - alpha) * p.l_crit_decomp as f64 + alpha * p.l_bypass as f64
}

/// `H·hit + (1 - H)·miss`.
pub fn effective_access_latency(h: f64, hit_ns: f64, miss_ns: f64) -> f64 {
    h * hit_ns + (1.0 - h) * miss_ns
}

/// Which side of the minimum bounds the effective prefetch rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ThetaBound {
    Dma,
    Bandwidth,
}

/// Entries per second: `min(Ω_max / L_DMA · f_clk, BW_CXL / S_entry)`.
pub fn theta_eff(p: &LatencyParams) -> (f64, ThetaBound) {
    theta_eff_for_entry(p, p.s_entry as f64)
}

/// [`theta_eff`] with an explicit bytes-per-entry figure, e.g. after compression.
pub fn theta_eff_for_entry(p: &LatencyParams, entry_bytes: f64) -> (f64, ThetaBound) {
    let dma = p.omega_max as f64 / p.l_dma as f64 * p.f_clk;
    let bw = p.bw_cxl / entry_bytes;
    if dma < bw {
        (dma, ThetaBound::Dma)
    } else {
        (bw, ThetaBound::Bandwidth)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stability {
    Stable,
    Unstable,
}

/// Strict test of `λ·k·S < BW·H`.
pub fn stability_check(lambda: f64, k: f64, entry_bytes: f64, bw: f64, h_pred: f64) -> Stability {
    if lambda * k * entry_bytes < bw * h_pred {
        Stability::Stable
    } else {
        Stability::Unstable
    }
}

/// [`stability_check`] against the link bandwidth and entry size in `p`.
pub fn stability_check_params(lambda: f64, k: u32, p: &LatencyParams, h_pred: f64) -> Stability {
    stability_check(lambda, f64::from(k), p.s_entry as f64, p.bw_cxl, h_pred)
}

/// `T_compute + max(T_prefetch - 2·T_layer, 0)`.
pub fn t_effective(t_compute: f64, t_prefetch: f64, t_layer: f64) -> f64 {
    t_compute + (t_prefetch - 2.0 * t_layer).max(0.0)
}

/// `⌊1 / max(U)⌋` over a resource-utilization vector.
pub fn engine_headroom(u: &[f64]) -> Result<u32, TimingError> {
    if u.is_empty() {
        return Err(TimingError::EmptyUtilization);
    }
    let mut max = 0.0f64;
    for (index, &value) in u.iter().enumerate() {
        if !(value > 0.0 && value <= 1.0) {
            return Err(TimingError::Utilization { index, value });
        }
        max = max.max(value);
    }
    Ok((1.0 / max).floor() as u32)
}

/// Linear contention model `ρ(N) = c·(N - 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Contention {
    pub c: f64,
}

pub const THETA_SINGLE_GBPS: f64 = 412.0;
pub const B_HBM_GBPS: f64 = 1600.0;
const FOUR_ENGINE_GBPS: f64 = 1487.0;

impl Contention {
    /// Solves `c` so that `n` engines deliver `observed` throughput.
    pub fn calibrate(theta_single: f64, n: u32, observed: f64) -> Self {
        assert!(n >= 2, "calibration needs at least two engines");
        let ideal = f64::from(n) * theta_single;
        Self {
            c: (1.0 - observed / ideal) / f64::from(n - 1),
        }
    }

    /// Calibrated on the four-engine measurement.
    pub fn reference() -> Self {
        Self::calibrate(THETA_SINGLE_GBPS, 4, FOUR_ENGINE_GBPS)
    }

    pub fn rho(&self, n: u32) -> f64 {
        (self.c * f64::from(n.saturating_sub(1))).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScalingPoint {
    pub engines: u32,
    pub throughput: f64,
    pub efficiency: f64,
    pub saturated: bool,
}

/// `min(N·Θ·(1 - ρ(N)), B_HBM)` and its efficiency relative to `N·Θ`.
pub fn aggregate_throughput(n: u32, theta_single: f64, contention: Contention, b_hbm: f64) -> ScalingPoint {
    assert!(n >= 1, "at least one engine");
    let ideal = f64::from(n) * theta_single;
    let raw = ideal * (1.0 - contention.rho(n));
    let throughput = raw.min(b_hbm);
    ScalingPoint {
        engines: n,
        throughput,
        efficiency: throughput / ideal,
        saturated: raw >= b_hbm,
    }
}

/// `⌈B_HBM / Θ_single⌉`.
pub fn saturation_engines(theta_single: f64, b_hbm: f64) -> u32 {
    (b_hbm / theta_single).ceil() as u32
}

/// Per-engine arbitration inputs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EngineState {
    pub id: usize,
    pub queue_depth: f64,
    pub mean_latency: f64,
    pub weight: f64,
    /// Half-open page-id range `[start, end)` owned by this engine.
    pub partition: (u64, u64),
}

impl EngineState {
    /// Engines with equal slices of `[0, pages)`; the last takes the remainder.
    pub fn partitioned(n: usize, pages: u64) -> Vec<Self> {
        let n64 = n.max(1) as u64;
        let slice = pages / n64;
        (0..n)
            .map(|i| {
                let start = slice * i as u64;
                let end = if i + 1 == n { pages } else { start + slice };
                Self {
                    id: i,
                    queue_depth: 0.0,
                    mean_latency: 1.0,
                    weight: 0.0,
                    partition: (start, end),
                }
            })
            .collect()
    }

    pub fn owns(&self, page: u64) -> bool {
        (self.partition.0..self.partition.1).contains(&page)
    }
}

/// `w = α·Q + (1 - α)/L̄`.
pub fn engine_weight(alpha: f64, queue_depth: f64, mean_latency: f64) -> f64 {
    alpha * queue_depth + (1.0 - alpha) / mean_latency
}

/// Smoothed deficit round-robin over engine weights.
///
/// Each slot every engine accrues its normalized weight as credit; the
/// engine with the most credit wins (lowest id on ties) and pays one slot.
#[derive(Debug, Clone, Default)]
pub struct Arbiter {
    credit: Vec<f64>,
}

impl Arbiter {
    pub fn new(n: usize) -> Self {
        Self { credit: vec![0.0; n] }
    }

    pub fn arbitrate(&mut self, engines: &mut [EngineState], alpha: f64) -> usize {
        assert!(!engines.is_empty(), "arbitrate needs at least one engine");
        if self.credit.len() != engines.len() {
            self.credit = vec![0.0; engines.len()];
        }
        for e in engines.iter_mut() {
            e.weight = engine_weight(alpha, e.queue_depth, e.mean_latency);
        }
        let total: f64 = engines.iter().map(|e| e.weight).sum();
        let n = engines.len() as f64;
        for (c, e) in self.credit.iter_mut().zip(engines.iter()) {
            *c += if total > 0.0 { e.weight / total } else { 1.0 / n };
        }
        let mut best = 0;
        for i in 1..self.credit.len() {
            if self.credit[i] > self.credit[best] {
                best = i;
            }
        }
        self.credit[best] -= 1.0;
        engines[best].id
    }
}

/// Roofline time of one transformer layer for a decode batch, in seconds.
///
/// Weight traffic assumes INT8 weights (`12·d_h²` bytes); KV traffic reads
/// each request's full context.
pub fn layer_time_secs(geom: &ModelGeometry, contexts: &[usize], p: &LatencyParams) -> f64 {
    let d = geom.hidden_dim as f64;
    let kv_per_token = 2.0 * d * f64::from(geom.precision_bits) / 8.0;
    let mut flops = 0.0;
    let mut kv_bytes = 0.0;
    for &c in contexts {
        flops += 24.0 * d * d + 4.0 * d * c as f64;
        kv_bytes += c as f64 * kv_per_token;
    }
    let weight_bytes = 12.0 * d * d;
    (flops / p.gpu_peak_flops).max((weight_bytes + kv_bytes) / p.bw_gpu_hbm)
}

/// Roofline time of one layer of prefill over `n` prompt tokens, in seconds.
pub fn prefill_layer_time_secs(geom: &ModelGeometry, n: usize, p: &LatencyParams) -> f64 {
    let d = geom.hidden_dim as f64;
    let n = n as f64;
    let flops = 24.0 * d * d * n + 2.0 * d * n * n;
    let bytes = 12.0 * d * d + n * 2.0 * d * f64::from(geom.precision_bits) / 8.0;
    (flops / p.gpu_peak_flops).max(bytes / p.bw_gpu_hbm)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prefetch_latency_examples() {
        let mut p = LatencyParams::default();
        assert_eq!(prefetch_latency_cycles(&p), 80);
        assert_eq!(p.cycles_to_ns(80), 100.0);
        p.l_pred = 0;
        assert_eq!(prefetch_latency_cycles(&p), 16);
        let p = LatencyParams {
            l_pred: 128,
            l_atu: 8,
            l_dma: 24,
            ..LatencyParams::default()
        };
        assert_eq!(prefetch_latency_cycles(&p), 160);
    }

    #[test]
    fn atu_examples() {
        assert_eq!(atu_expected_latency(1.0, 1.0, 15.0), 1.0);
        assert!((atu_expected_latency(0.92, 1.0, 15.0) - 2.2).abs() < 1e-12);
        assert_eq!(atu_expected_latency(0.0, 1.0, 15.0), 16.0);
    }

    #[test]
    fn decomp_examples() {
        let p = LatencyParams::default();
        assert!((decomp_effective_latency(0.3, &p) - 19.0).abs() < 1e-12);
        assert_eq!(decomp_effective_latency(0.0, &p), 25.0);
        assert_eq!(decomp_effective_latency(1.0, &p), 5.0);
    }

    #[test]
    fn effective_latency_examples() {
        assert!((effective_access_latency(0.947, 285.0, 1850.0) - 367.945).abs() < 1e-9);
        assert_eq!(effective_access_latency(1.0, 285.0, 1850.0), 285.0);
        assert_eq!(effective_access_latency(0.0, 285.0, 1850.0), 1850.0);
    }

    #[test]
    fn theta_eff_branches() {
        let p = LatencyParams::default();
        let (theta, bound) = theta_eff(&p);
        assert_eq!(theta, 1.5625e7);
        assert_eq!(bound, ThetaBound::Bandwidth);
        let dma_bound = LatencyParams {
            omega_max: 1,
            l_dma: 800_000_000,
            ..LatencyParams::default()
        };
        let (theta, bound) = theta_eff(&dma_bound);
        assert_eq!(bound, ThetaBound::Dma);
        assert_eq!(theta, 1.0);
        let half = LatencyParams {
            s_entry: 2048,
            ..LatencyParams::default()
        };
        assert_eq!(theta_eff(&half).0, 2.0 * 1.5625e7);
    }

    #[test]
    fn theta_eff_boundary_sides() {
        // DMA branch = 16/12·800e6; make the bandwidth branch straddle it.
        let p = LatencyParams::default();
        let dma = 16.0 / 12.0 * 800e6;
        let entry = p.bw_cxl / dma;
        assert_eq!(theta_eff_for_entry(&p, entry * 1.01).1, ThetaBound::Bandwidth);
        assert_eq!(theta_eff_for_entry(&p, entry * 0.99).1, ThetaBound::Dma);
    }

    #[test]
    fn stability_examples() {
        let p = LatencyParams::default();
        assert_eq!(stability_check_params(100.0, 4, &p, 0.95), Stability::Stable);
        let lambda = p.bw_cxl * 0.95 / (4.0 * 4096.0);
        assert_eq!(stability_check_params(lambda, 4, &p, 0.95), Stability::Unstable);
        assert_eq!(stability_check_params(lambda * 0.999, 4, &p, 0.95), Stability::Stable);
        assert_eq!(stability_check_params(1e-9, 4, &p, 0.0), Stability::Unstable);
    }

    #[test]
    fn t_effective_examples() {
        assert_eq!(t_effective(10.0, 4.0, 2.0), 10.0);
        assert_eq!(t_effective(10.0, 0.0, 2.0), 10.0);
        assert_eq!(t_effective(10.0, 7.0, 2.0), 13.0);
        assert_eq!(t_effective(10.0, 4.0 + 1e-9, 2.0), 10.0 + 1e-9);
    }

    #[test]
    fn headroom_examples() {
        assert_eq!(engine_headroom(&[0.305, 0.140, 0.158, 0.259]).unwrap(), 3);
        assert_eq!(engine_headroom(&[0.5, 0.2]).unwrap(), 2);
        assert_eq!(engine_headroom(&[1.0]).unwrap(), 1);
        assert!(engine_headroom(&[0.3, 0.0]).is_err());
        assert!(engine_headroom(&[]).is_err());
        assert!(engine_headroom(&[1.2]).is_err());
    }

    #[test]
    fn scaling_matches_reference_points() {
        assert_eq!(saturation_engines(412.0, 1600.0), 4);
        let c = Contention::reference();
        assert!((c.c - 0.032565).abs() < 1e-5);
        let expected = [412.0, 798.0, 1156.0, 1487.0];
        for (n, want) in (1..=4).zip(expected) {
            let pt = aggregate_throughput(n, 412.0, c, 1600.0);
            assert!((pt.throughput - want).abs() / want < 0.05, "N={n}: {}", pt.throughput);
            assert!(pt.throughput <= 1600.0);
        }
        let four = aggregate_throughput(4, 412.0, c, 1600.0);
        assert!((four.throughput - 1487.0).abs() < 1e-9);
        assert!((four.efficiency - 0.9023).abs() < 1e-3);
        assert_eq!(aggregate_throughput(1, 412.0, c, 1600.0).efficiency, 1.0);
        let capped = aggregate_throughput(8, 412.0, Contention { c: 0.0 }, 1600.0);
        assert_eq!(capped.throughput, 1600.0);
        assert!(capped.saturated);
    }

    fn counts(engines: &mut [EngineState], alpha: f64, draws: usize) -> Vec<usize> {
        let mut arb = Arbiter::new(engines.len());
        let mut c = vec![0; engines.len()];
        for _ in 0..draws {
            c[arb.arbitrate(engines, alpha)] += 1;
        }
        c
    }

    #[test]
    fn arbitration_proportions() {
        let mut e = EngineState::partitioned(3, 300);
        let c = counts(&mut e, 0.5, 30_000);
        assert_eq!(c, vec![10_000, 10_000, 10_000]);

        let mut e = EngineState::partitioned(2, 100);
        e[0].queue_depth = 10.0;
        e[1].queue_depth = 1.0;
        let c = counts(&mut e, 1.0, 11_000);
        assert_eq!(c, vec![10_000, 1_000]);

        let mut e = EngineState::partitioned(2, 100);
        e[0].mean_latency = 2.0;
        e[1].mean_latency = 1.0;
        let c = counts(&mut e, 0.0, 30_000);
        assert_eq!(c, vec![10_000, 20_000]);
    }

    #[test]
    fn arbitration_chi_square() {
        let mut e = EngineState::partitioned(4, 400);
        for (i, s) in e.iter_mut().enumerate() {
            s.queue_depth = (i + 1) as f64;
            s.mean_latency = 1.0 + i as f64 * 0.5;
        }
        let alpha = 0.7;
        let m = 100_000;
        let c = counts(&mut e, alpha, m);
        let w: Vec<f64> = e.iter().map(|s| engine_weight(alpha, s.queue_depth, s.mean_latency)).collect();
        let total: f64 = w.iter().sum();
        let chi2: f64 = c
            .iter()
            .zip(&w)
            .map(|(&o, &wi)| {
                let exp = m as f64 * wi / total;
                (o as f64 - exp).powi(2) / exp
            })
            .sum();
        // 3 degrees of freedom, p = 0.001.
        assert!(chi2 < 16.27, "chi2 = {chi2}");
    }

    #[test]
    fn partitions_are_disjoint_and_cover() {
        let e = EngineState::partitioned(3, 100);
        for page in 0..100 {
            assert_eq!(e.iter().filter(|s| s.owns(page)).count(), 1);
        }
    }

    #[test]
    fn cycle_conversion_rounds_up() {
        let p = LatencyParams::default();
        assert_eq!(p.sync_miss_cycles(), 1480);
        assert_eq!(p.prefetch_hit_cycles(), 228);
        assert_eq!(p.ns_to_cycles(1.0), 1);
        assert_eq!(p.link_cycles(4096), 52);
    }

    #[test]
    fn layer_roofline_is_bandwidth_bound_at_desk_scale() {
        let g = ModelGeometry::desk();
        let p = LatencyParams::default();
        let t = layer_time_secs(&g, &[128; 8], &p);
        let bytes = 12.0 * 512.0 * 512.0 + 8.0 * 128.0 * 2048.0;
        assert!((t - bytes / 1600e9).abs() < 1e-15);
        assert!(layer_time_secs(&g, &[256; 8], &p) > t);
    }

    #[test]
    fn validation_rejects_zeroes() {
        assert!(LatencyParams::default().validate().is_ok());
        let p = LatencyParams {
            omega_max: 0,
            ..LatencyParams::default()
        };
        assert!(p.validate().is_err());
        let p = LatencyParams {
            bw_cxl: -1.0,
            ..LatencyParams::default()
        };
        assert!(p.validate().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn aggregate_never_exceeds_hbm(n in 1u32..64, theta in 1.0f64..2000.0, c in 0.0f64..0.2) {
                let pt = aggregate_throughput(n, theta, Contention { c }, 1600.0);
                prop_assert!(pt.throughput <= 1600.0);
                prop_assert!(pt.efficiency <= 1.0 + 1e-12);
            }

            #[test]
            fn effective_latency_is_between_bounds(h in 0.0f64..=1.0) {
                let v = effective_access_latency(h, 285.0, 1850.0);
                prop_assert!((285.0 - 1e-9..=1850.0 + 1e-9).contains(&v));
            }
        }
    }
}
