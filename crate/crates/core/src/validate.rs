//! Closed-form checks of the formulas the simulator is built on.
//!
//! Each check recomputes one documented example from first principles and
//! compares it to the library. `validate` on the CLI prints these.

use serde::Serialize;

use crate::adapt::{objective, select_scheme, throttle_update, ucb_score, ucb_score_at, SchemeCandidate, Weights};
use crate::codec::{delta_decode, delta_encode, dequantize, quantize, rle_encode, KvBlock, Quantized, Scheme};
use crate::model::{kv_bytes_per_token_layer, kv_bytes_total, ModelGeometry};
use crate::timing::{
    aggregate_throughput, atu_expected_latency, decomp_effective_latency, effective_access_latency, engine_headroom,
    prefetch_latency_cycles, saturation_engines, stability_check, t_effective, theta_eff, Arbiter, Contention,
    EngineState, LatencyParams, Stability, ThetaBound, B_HBM_GBPS, THETA_SINGLE_GBPS,
};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub module: &'static str,
    pub name: String,
    pub expected: String,
    pub got: String,
    pub pass: bool,
}

struct Suite {
    module: &'static str,
    checks: Vec<Check>,
}

impl Suite {
    fn section(&mut self, module: &'static str) {
        self.module = module;
    }

    fn exact<T: PartialEq + std::fmt::Debug>(&mut self, name: &str, expected: T, got: T) {
        self.push(name, format!("{expected:?}"), format!("{got:?}"), expected == got);
    }

    fn approx(&mut self, name: &str, expected: f64, got: f64, tol: f64) {
        let pass = (expected - got).abs() <= tol;
        self.push(name, format!("{expected} ± {tol}"), format!("{got}"), pass);
    }

    fn within(&mut self, name: &str, lo: f64, hi: f64, got: f64) {
        self.push(name, format!("[{lo}, {hi}]"), format!("{got}"), (lo..=hi).contains(&got));
    }

    fn push(&mut self, name: &str, expected: String, got: String, pass: bool) {
        self.checks.push(Check {
            module: self.module,
            name: name.to_string(),
            expected,
            got,
            pass,
        });
    }
}

fn geom(layers: u64, hidden: u64, bits: u32) -> ModelGeometry {
    ModelGeometry {
        layers,
        hidden_dim: hidden,
        heads: 1,
        precision_bits: bits,
        max_seq: 1 << 20,
    }
}

/// Selection frequencies of the arbiter over `rounds` slots with fixed inputs.
fn arbiter_counts(q: &[f64], lat: &[f64], alpha: f64, rounds: usize) -> Vec<f64> {
    let mut states = EngineState::partitioned(q.len(), 1024);
    for (s, (&qd, &l)) in states.iter_mut().zip(q.iter().zip(lat)) {
        s.queue_depth = qd;
        s.mean_latency = l;
    }
    let mut arb = Arbiter::new(q.len());
    let mut counts = vec![0.0; q.len()];
    for _ in 0..rounds {
        counts[arb.arbitrate(&mut states, alpha)] += 1.0;
    }
    counts
}

pub fn run_all() -> Vec<Check> {
    let mut s = Suite {
        module: "",
        checks: Vec::new(),
    };

    s.section("model_config");
    s.exact("kv_total unit", Ok(4), kv_bytes_total(&geom(1, 1, 16), 1, 1));
    s.exact("kv_total 70b batch 32", Ok(171_798_691_840), kv_bytes_total(&geom(80, 8192, 16), 32, 2048));
    s.exact("kv_total int8 small", Ok(131_072), kv_bytes_total(&geom(2, 64, 8), 4, 128));
    s.exact("per token layer fp16 8192", 32_768, kv_bytes_per_token_layer(&geom(1, 8192, 16)));
    s.exact("per token layer int8 64", 128, kv_bytes_per_token_layer(&geom(1, 64, 8)));
    s.exact("per token layer unit", 4, kv_bytes_per_token_layer(&geom(1, 1, 16)));

    s.section("kv_codec");
    let q = quantize(&KvBlock::new(1, 3, vec![0.5, -1.0, 1.0]).expect("block"));
    s.approx("quantize scale", 1.0 / 127.0, f64::from(q.scale), 1e-9);
    s.exact("quantize codes", vec![64i8, -127, 127], q.codes.clone());
    let z = quantize(&KvBlock::new(1, 4, vec![0.0; 4]).expect("block"));
    s.exact("quantize zeros", (0.0f32, vec![0i8; 4]), (z.scale, z.codes));
    let one = quantize(&KvBlock::new(1, 1, vec![1.27]).expect("block"));
    s.approx("quantize singleton scale", 0.01, f64::from(one.scale), 1e-9);
    s.exact("quantize singleton code", vec![127i8], one.codes);
    let dq = |scale: f32, codes: Vec<i8>| {
        let n = codes.len();
        dequantize(&Quantized {
            scale,
            rows: 1,
            cols: n,
            codes,
        })
        .values()
        .to_vec()
    };
    s.approx("dequantize max", 1.0, dq(1.0 / 127.0, vec![127])[0], 1e-6);
    s.exact("dequantize zero scale", vec![0.0; 3], dq(0.0, vec![0, 0, 0]));
    s.approx("dequantize 64 at 0.01", 0.64, dq(0.01, vec![64])[0], 1e-6);
    s.exact("delta row", vec![5u8, 2, 0, 0, 253], delta_encode(&[5, 7, 7, 7, 4], 5));
    s.exact("delta constant row", vec![9u8, 0, 0], delta_encode(&[9, 9, 9], 3));
    s.exact("delta single", vec![253u8], delta_encode(&[-3], 1));
    s.exact("undelta row", Ok(vec![5i8, 7, 7, 7, 4]), delta_decode(&[5, 2, 0, 0, 253], 5));
    s.exact("undelta constant", Ok(vec![9i8, 9, 9]), delta_decode(&[9, 0, 0], 3));
    s.exact("undelta single", Ok(vec![-3i8]), delta_decode(&[253], 1));
    s.exact("rle single run", vec![0u8, 4], rle_encode(&[0, 0, 0, 0]));
    s.exact("rle two runs", vec![1u8, 1, 2, 2], rle_encode(&[1, 2, 2]));
    s.exact("rle 300 zeros", vec![0u8, 255, 0, 45], rle_encode(&[0; 300]));

    s.section("timing_model");
    let p = LatencyParams::default();
    s.exact("prefetch latency defaults", 80, prefetch_latency_cycles(&p));
    s.approx("prefetch latency ns", 100.0, p.cycles_to_ns(prefetch_latency_cycles(&p)), 1e-9);
    let no_pred = LatencyParams { l_pred: 0, ..p.clone() };
    s.exact("prefetch latency no predictor", 16, prefetch_latency_cycles(&no_pred));
    let doubled = LatencyParams {
        l_pred: 2 * p.l_pred,
        l_atu: 2 * p.l_atu,
        l_dma: 2 * p.l_dma,
        ..p.clone()
    };
    s.exact("prefetch latency doubled", 160, prefetch_latency_cycles(&doubled));
    s.approx("atu H=1", 1.0, atu_expected_latency(1.0, 1.0, 15.0), 1e-12);
    s.approx("atu H=0.92", 2.2, atu_expected_latency(0.92, 1.0, 15.0), 1e-9);
    s.approx("atu H=0", 16.0, atu_expected_latency(0.0, 1.0, 15.0), 1e-12);
    s.approx("decomp alpha 0.3", 19.0, decomp_effective_latency(0.3, &p), 1e-9);
    s.approx("decomp alpha 0", 25.0, decomp_effective_latency(0.0, &p), 1e-12);
    s.approx("decomp alpha 1", 5.0, decomp_effective_latency(1.0, &p), 1e-12);
    s.approx("access latency H=0.947", 367.945, effective_access_latency(0.947, 285.0, 1850.0), 1e-6);
    s.approx("access latency H=1", 285.0, effective_access_latency(1.0, 285.0, 1850.0), 1e-9);
    s.approx("access latency H=0", 1850.0, effective_access_latency(0.0, 285.0, 1850.0), 1e-9);
    let (th, bound) = theta_eff(&p);
    s.approx("theta defaults", 1.5625e7, th, 1e-3);
    s.exact("theta defaults bound", ThetaBound::Bandwidth, bound);
    let dma_bound = LatencyParams {
        omega_max: 1,
        l_dma: 800_000_000,
        ..p.clone()
    };
    s.exact("theta dma-bound", ThetaBound::Dma, theta_eff(&dma_bound).1);
    let half = LatencyParams { s_entry: 2048, ..p.clone() };
    s.approx("theta half entry", 2.0 * th, theta_eff(&half).0, 1e-3);
    let bw = 64e9 * 0.95;
    s.exact("stability low load", Stability::Stable, stability_check(100.0, 4.0, 4096.0, 64e9, 0.95));
    let lambda_eq = bw / (4.0 * 4096.0);
    s.exact("stability boundary", Stability::Unstable, stability_check(lambda_eq, 4.0, 4096.0, 64e9, 0.95));
    s.exact("stability H=0", Stability::Unstable, stability_check(1e-6, 4.0, 4096.0, 64e9, 0.0));
    let rounds = 30_000;
    let eq = arbiter_counts(&[3.0, 3.0, 3.0], &[1.0, 1.0, 1.0], 0.5, rounds);
    let spread = eq.iter().fold(0.0f64, |m, c| m.max((c - rounds as f64 / 3.0).abs())) / rounds as f64;
    s.within("arbiter equal inputs spread", 0.0, 0.01, spread);
    let qa = arbiter_counts(&[10.0, 1.0], &[1.0, 1.0], 1.0, rounds);
    s.approx("arbiter alpha=1 Q ratio", 10.0, qa[0] / qa[1], 0.2);
    let la = arbiter_counts(&[0.0, 0.0], &[2.0, 1.0], 0.0, rounds);
    s.approx("arbiter alpha=0 latency ratio", 2.0, la[1] / la[0], 0.05);
    s.exact("saturation engines", 4, saturation_engines(THETA_SINGLE_GBPS, B_HBM_GBPS));
    let one_engine = aggregate_throughput(1, THETA_SINGLE_GBPS, Contention::reference(), B_HBM_GBPS);
    s.approx("scaling N=1 efficiency", 1.0, one_engine.efficiency, 1e-9);
    let four = aggregate_throughput(4, THETA_SINGLE_GBPS, Contention::reference(), B_HBM_GBPS);
    s.approx("scaling N=4 throughput", 1487.0, four.throughput, 1487.0 * 0.05);
    s.approx("scaling N=4 efficiency", 0.90, four.efficiency, 0.01);
    s.approx("t_eff boundary", 10.0, t_effective(10.0, 4.0, 2.0), 1e-12);
    s.approx("t_eff no prefetch", 10.0, t_effective(10.0, 0.0, 2.0), 1e-12);
    s.approx("t_eff exposed", 13.0, t_effective(10.0, 7.0, 2.0), 1e-12);
    s.exact("headroom measured", Ok(3), engine_headroom(&[0.305, 0.140, 0.158, 0.259]));
    s.exact("headroom half", Ok(2), engine_headroom(&[0.5, 0.5]));
    s.exact("headroom full", Ok(1), engine_headroom(&[1.0]));
    s.exact("headroom zero rejected", true, engine_headroom(&[0.0]).is_err());

    s.section("adaptation");
    s.approx("throttle underload", 0.8, throttle_update(0.8, 0.5, 0.7, 0.6, 0.1), 1e-12);
    s.approx("throttle overload", 0.9, throttle_update(1.0, 0.5, 0.7, 0.9, 0.1), 1e-12);
    let mut beta = 1.0;
    for _ in 0..1000 {
        beta = throttle_update(beta, 0.5, 0.7, 1.0, 0.1);
    }
    s.approx("throttle floor", 0.1, beta, 1e-12);
    let cand = |scheme, ratio, quality| SchemeCandidate {
        scheme,
        ratio,
        quality,
        latency: 1.0,
    };
    let cands = [
        cand(Scheme::Raw, 1.0, 1.0),
        cand(Scheme::Int8, 2.0, 0.994),
        cand(Scheme::Int8DeltaRle, 3.21, 0.988),
    ];
    let w = Weights { r: 1.0, q: 1.0, c: 0.01 };
    s.exact("select mixed weights", Ok(Scheme::Int8DeltaRle), select_scheme(&w, 0.98, &cands));
    s.approx("objective full pipeline", 4.188, objective(&w, &cands[2]), 1e-9);
    s.approx("objective int8", 2.984, objective(&w, &cands[1]), 1e-9);
    s.exact("select lossless floor", Ok(Scheme::Raw), select_scheme(&w, 1.0, &cands));
    let ratio_only = Weights { r: 1.0, q: 0.0, c: 0.0 };
    s.exact("select ratio only", Ok(Scheme::Int8DeltaRle), select_scheme(&ratio_only, 0.0, &cands));
    s.exact("ucb unpulled", f64::INFINITY, ucb_score(0.0, 0, 10, 1.0));
    let e2 = std::f64::consts::E.powi(2);
    s.approx("ucb arithmetic", 0.5 + 2f64.sqrt(), ucb_score_at(0.5, 2, e2, 1.0), 1e-9);
    s.approx("ucb greedy", 0.5, ucb_score(0.5, 2, 100, 0.0), 1e-12);

    s.checks
}

/// Formats one line per check plus a summary line.
pub fn render(checks: &[Check]) -> String {
    let mut out = String::new();
    for c in checks {
        let tag = if c.pass { "PASS" } else { "FAIL" };
        out.push_str(&format!("{tag} {}::{} expected {} got {}\n", c.module, c.name, c.expected, c.got));
    }
    let passed = checks.iter().filter(|c| c.pass).count();
    out.push_str(&format!("{passed}/{} checks passed\n", checks.len()));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes() {
        let checks = run_all();
        let failed: Vec<_> = checks.iter().filter(|c| !c.pass).collect();
        assert!(failed.is_empty(), "{failed:#?}");
        assert!(checks.len() > 60);
    }

    #[test]
    fn render_has_summary() {
        let r = render(&run_all());
        assert!(r.lines().last().unwrap().ends_with("checks passed"));
    }
}
