//! Request streams: Poisson arrivals, uniform lengths, and a calibrated
//! order-2 Markov token process.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::{Mutex, OnceLock};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prefetch::{MarkovOrderN, PredictContext, TokenId, TokenPredictor, DEFAULT_VOCAB};
use crate::seed::{self, stream};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WorkloadError {
    #[error("{0}")]
    Invalid(String),
    #[error("unknown workload profile `{0}` (expected chatbot, summarization, codegen or qa)")]
    UnknownProfile(String),
    #[error("trace line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Inclusive length range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LenRange {
    pub min: u32,
    pub max: u32,
}

impl LenRange {
    pub const fn new(min: u32, max: u32) -> Self {
        Self { min, max }
    }

    pub fn contains(&self, n: u32) -> bool {
        (self.min..=self.max).contains(&n)
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> u32 {
        rng.random_range(self.min..=self.max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadProfile {
    pub name: String,
    pub input_len: LenRange,
    pub output_len: LenRange,
    /// Requests per second.
    pub rate: f64,
    /// Top-4 predictability of the token stream.
    pub accuracy: f64,
}

/// Rates the presets are evaluated at.
pub const RATE_RANGE: (f64, f64) = (5.0, 100.0);
const DEFAULT_RATE: f64 = 20.0;

impl WorkloadProfile {
    pub fn chatbot() -> Self {
        Self::preset("chatbot", LenRange::new(128, 128), LenRange::new(256, 256), 0.965)
    }

    pub fn summarization() -> Self {
        Self::preset("summarization", LenRange::new(1024, 2048), LenRange::new(128, 256), 0.95)
    }

    pub fn codegen() -> Self {
        Self::preset("codegen", LenRange::new(256, 512), LenRange::new(512, 1024), 0.94)
    }

    pub fn qa() -> Self {
        Self::preset("qa", LenRange::new(64, 128), LenRange::new(32, 64), 0.965)
    }

    fn preset(name: &str, input_len: LenRange, output_len: LenRange, accuracy: f64) -> Self {
        Self {
            name: name.into(),
            input_len,
            output_len,
            rate: DEFAULT_RATE,
            accuracy,
        }
    }

    pub fn by_name(name: &str) -> Result<Self, WorkloadError> {
        match name {
            "chatbot" => Ok(Self::chatbot()),
            "summarization" => Ok(Self::summarization()),
            "codegen" => Ok(Self::codegen()),
            "qa" => Ok(Self::qa()),
            other => Err(WorkloadError::UnknownProfile(other.into())),
        }
    }

    /// Ranges must be positive and ordered and the rate positive. Rates
    /// outside [`RATE_RANGE`] are accepted.
    pub fn validate(&self) -> Result<(), WorkloadError> {
        for (what, r) in [("input_len", self.input_len), ("output_len", self.output_len)] {
            if r.min == 0 || r.min > r.max {
                return Err(WorkloadError::Invalid(format!(
                    "workload.{what} must be a positive range a..b with a <= b (got {}..{})",
                    r.min, r.max
                )));
            }
        }
        if !(self.rate > 0.0 && self.rate.is_finite()) {
            return Err(WorkloadError::Invalid(format!("workload.rate must be positive (got {})", self.rate)));
        }
        if !(0.0..=1.0).contains(&self.accuracy) {
            return Err(WorkloadError::Invalid(format!("workload accuracy must lie in [0, 1] (got {})", self.accuracy)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RequestTrace {
    pub id: u64,
    pub arrival_tick: u64,
    pub input_len: u32,
    pub output_len: u32,
    /// `input_len + output_len` tokens: prompt, then generated.
    pub tokens: Vec<TokenId>,
}

impl RequestTrace {
    pub fn total_len(&self) -> u32 {
        self.input_len + self.output_len
    }
}

/// Order-2 Markov chain. Context `(a, b)` ranks successors by a hashed
/// permutation of the vocabulary; rank `r` is drawn with probability
/// proportional to `exp(-r/τ)`.
#[derive(Debug, Clone)]
pub struct TokenProcess {
    pub vocab: u32,
    pub temperature: f64,
    seed: u64,
}

impl TokenProcess {
    pub fn new(vocab: u32, temperature: f64, seed: u64) -> Self {
        assert!(vocab.is_power_of_two() && vocab >= 2, "vocab must be a power of two");
        assert!(temperature >= 0.0, "temperature must be >= 0");
        Self {
            vocab,
            temperature,
            seed,
        }
    }

    /// The chain for `seed` with τ tuned so a trained order-2 predictor
    /// reaches top-4 accuracy `p`.
    pub fn calibrated(p: f64, seed: u64) -> Self {
        Self::new(DEFAULT_VOCAB, calibrate_temperature(p, DEFAULT_VOCAB, seed), seed)
    }

    /// Successor at rank `r` of context `(a, b)`.
    pub fn successor(&self, a: TokenId, b: TokenId, r: u32) -> TokenId {
        let h = seed::derive(self.seed, &[stream::SUCCESSORS, u64::from(a), u64::from(b)]);
        // Odd stride: distinct tokens for every rank below the vocab size.
        let base = (h & 0xFFFF_FFFF) as u32;
        let stride = ((h >> 32) as u32) | 1;
        base.wrapping_add(r.wrapping_mul(stride)) & (self.vocab - 1)
    }

    fn sample_rank<R: Rng>(&self, rng: &mut R) -> u32 {
        if self.temperature <= 0.0 {
            return 0;
        }
        let q = (-1.0 / self.temperature).exp();
        if q >= 1.0 {
            return rng.random_range(0..self.vocab);
        }
        // Inverse CDF of the geometric truncated to the vocab.
        let u: f64 = rng.random();
        let mass = 1.0 - q.powf(f64::from(self.vocab));
        let r = (1.0 - u * mass).ln() / q.ln();
        (r.floor().max(0.0) as u32).min(self.vocab - 1)
    }

    /// Top-4 accuracy of the generating model itself.
    pub fn ideal_top4(&self) -> f64 {
        if self.temperature <= 0.0 {
            return 1.0;
        }
        let q = (-1.0 / self.temperature).exp();
        if q >= 1.0 {
            return 4.0 / f64::from(self.vocab);
        }
        (1.0 - q.powi(4)) / (1.0 - q.powf(f64::from(self.vocab)))
    }

    /// `n` tokens of stream `key`.
    pub fn generate(&self, key: &[u64], n: usize) -> Vec<TokenId> {
        let mut parts = vec![stream::TOKENS];
        parts.extend_from_slice(key);
        let mut rng = seed::rng_for(self.seed, &parts);
        self.generate_with(&mut rng, n)
    }

    /// Every stream starts from the same context, so sequences share a
    /// learnable trunk and diverge with temperature.
    fn generate_with(&self, rng: &mut ChaCha8Rng, n: usize) -> Vec<TokenId> {
        let (mut a, mut b) = (0, 0);
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let r = self.sample_rank(rng);
            let c = self.successor(a, b, r);
            out.push(c);
            a = b;
            b = c;
        }
        out
    }
}

const SEGMENT: usize = 256;
const TRAIN_SEGMENTS: usize = 160;
const EVAL_SEGMENTS: usize = 40;

/// Segments shaped like requests, from a stream disjoint from any trace.
fn segments(tp: &TokenProcess, part: u64, count: usize) -> Vec<Vec<TokenId>> {
    (0..count)
        .map(|i| tp.generate(&[stream::TRAINING, part, i as u64], SEGMENT))
        .collect()
}

/// Training material for a Markov predictor.
pub fn training_sequence(tp: &TokenProcess) -> Vec<TokenId> {
    segments(tp, 0, TRAIN_SEGMENTS).concat()
}

/// Top-4 accuracy of an order-2 model trained on held-out segments.
pub fn measured_top4(tp: &TokenProcess) -> f64 {
    let mut m = MarkovOrderN::new(2, tp.vocab);
    for s in segments(tp, 0, TRAIN_SEGMENTS) {
        m.train(&s);
    }
    let mut hits = 0usize;
    let mut total = 0usize;
    for s in segments(tp, 1, EVAL_SEGMENTS) {
        for i in 0..s.len() {
            let ctx = PredictContext {
                req: 0,
                pos: i as u32,
                history: &s[..i],
                truth: s[i],
            };
            hits += usize::from(m.predict(&ctx, 4).contains(s[i]));
            total += 1;
        }
    }
    hits as f64 / total as f64
}

type CalibrationCache = Mutex<HashMap<(u64, u32, u64), f64>>;

fn calibration_cache() -> &'static CalibrationCache {
    static CACHE: OnceLock<CalibrationCache> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Bisection on `log τ` against [`measured_top4`]. Memoized per
/// `(p, vocab, seed)`.
pub fn calibrate_temperature(p: f64, vocab: u32, seed: u64) -> f64 {
    let key = (p.to_bits(), vocab, seed);
    if let Some(&t) = calibration_cache().lock().expect("cache lock").get(&key) {
        return t;
    }
    let acc = |t: f64| measured_top4(&TokenProcess::new(vocab, t, seed));
    let (mut lo, mut hi) = (-6.0f64, 6.0f64);
    let t = if acc(lo.exp()) <= p {
        lo.exp()
    } else if acc(hi.exp()) >= p {
        hi.exp()
    } else {
        for _ in 0..18 {
            let mid = 0.5 * (lo + hi);
            if acc(mid.exp()) > p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        (0.5 * (lo + hi)).exp()
    };
    calibration_cache().lock().expect("cache lock").insert(key, t);
    t
}

/// Endless arrival stream.
#[derive(Debug, Clone)]
pub struct TraceGenerator {
    profile: WorkloadProfile,
    process: TokenProcess,
    f_clk: f64,
    arrivals: ChaCha8Rng,
    lengths: ChaCha8Rng,
    exp: Exp<f64>,
    clock: f64,
    next_id: u64,
}

impl TraceGenerator {
    pub fn new(profile: WorkloadProfile, process: TokenProcess, seed: u64, f_clk: f64) -> Result<Self, WorkloadError> {
        profile.validate()?;
        let exp = Exp::new(profile.rate).map_err(|e| WorkloadError::Invalid(e.to_string()))?;
        Ok(Self {
            arrivals: seed::rng_for(seed, &[stream::ARRIVALS]),
            lengths: seed::rng_for(seed, &[stream::LENGTHS]),
            profile,
            process,
            f_clk,
            exp,
            clock: 0.0,
            next_id: 0,
        })
    }

    pub fn process(&self) -> &TokenProcess {
        &self.process
    }
}

impl Iterator for TraceGenerator {
    type Item = (f64, RequestTrace);

    /// Yields the arrival time in seconds with the request.
    fn next(&mut self) -> Option<Self::Item> {
        self.clock += self.exp.sample(&mut self.arrivals);
        let input_len = self.profile.input_len.sample(&mut self.lengths);
        let output_len = self.profile.output_len.sample(&mut self.lengths);
        let id = self.next_id;
        self.next_id += 1;
        let tokens = self.process.generate(&[id], (input_len + output_len) as usize);
        Some((
            self.clock,
            RequestTrace {
                id,
                arrival_tick: (self.clock * self.f_clk).round() as u64,
                input_len,
                output_len,
                tokens,
            },
        ))
    }
}

/// Every request arriving within `duration` seconds.
pub fn gen_trace(
    profile: &WorkloadProfile,
    process: &TokenProcess,
    seed: u64,
    duration: f64,
    f_clk: f64,
) -> Result<Vec<RequestTrace>, WorkloadError> {
    if duration.is_nan() || duration <= 0.0 {
        return Err(WorkloadError::Invalid(format!("duration must be positive (got {duration})")));
    }
    let generator = TraceGenerator::new(profile.clone(), process.clone(), seed, f_clk)?;
    Ok(generator.take_while(|(t, _)| *t <= duration).map(|(_, r)| r).collect())
}

pub const TRACE_HEADER: &str = "speckv-trace v1";

pub fn write_trace(trace: &[RequestTrace]) -> String {
    let mut s = String::new();
    s.push_str(TRACE_HEADER);
    s.push('\n');
    for r in trace {
        let _ = write!(s, "{},{},{},{}", r.arrival_tick, r.id, r.input_len, r.output_len);
        for t in &r.tokens {
            let _ = write!(s, " {t}");
        }
        s.push('\n');
    }
    s
}

pub fn read_trace(text: &str) -> Result<Vec<RequestTrace>, WorkloadError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == TRACE_HEADER => {}
        _ => {
            return Err(WorkloadError::Parse {
                line: 1,
                msg: format!("expected header `{TRACE_HEADER}`"),
            })
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        let err = |msg: String| WorkloadError::Parse { line: line_no, msg };
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let head = parts.next().ok_or_else(|| err("empty record".into()))?;
        let fields: Vec<&str> = head.split(',').collect();
        if fields.len() != 4 {
            return Err(err(format!("expected 4 comma-separated fields, found {}", fields.len())));
        }
        let num = |s: &str, what: &str| s.parse::<u64>().map_err(|_| err(format!("bad {what} `{s}`")));
        let arrival_tick = num(fields[0], "arrival_tick")?;
        let id = num(fields[1], "request_id")?;
        let input_len = u32::try_from(num(fields[2], "input_len")?).map_err(|_| err("input_len too large".into()))?;
        let output_len = u32::try_from(num(fields[3], "output_len")?).map_err(|_| err("output_len too large".into()))?;
        if input_len == 0 || output_len == 0 {
            return Err(err("lengths must be positive".into()));
        }
        let tokens = parts
            .map(|t| t.parse::<TokenId>().map_err(|_| err(format!("bad token `{t}`"))))
            .collect::<Result<Vec<_>, _>>()?;
        if tokens.len() != (input_len + output_len) as usize {
            return Err(err(format!(
                "expected {} tokens, found {}",
                input_len + output_len,
                tokens.len()
            )));
        }
        out.push(RequestTrace {
            id,
            arrival_tick,
            input_len,
            output_len,
            tokens,
        });
    }
    if out.windows(2).any(|w| w[1].arrival_tick < w[0].arrival_tick) {
        return Err(WorkloadError::Parse {
            line: 0,
            msg: "arrival ticks must be non-decreasing".into(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const F: f64 = 800e6;

    fn fast_process(seed: u64) -> TokenProcess {
        TokenProcess::new(DEFAULT_VOCAB, 1.0, seed)
    }

    #[test]
    fn poisson_count_over_seeds() {
        let mut p = WorkloadProfile::qa();
        p.rate = 10.0;
        let tp = TokenProcess::new(DEFAULT_VOCAB, 0.0, 1);
        let mut total = 0;
        for seed in 0..20 {
            let n = gen_trace(&p, &tp, seed, 100.0, F).unwrap().len();
            assert!((n as f64 - 1000.0).abs() <= 3.0 * 1000f64.sqrt(), "seed {seed}: {n}");
            total += n;
        }
        let mean = total as f64 / 20.0;
        assert!((mean - 1000.0).abs() < 3.0 * (1000.0f64 / 20.0).sqrt() * 2.0);
    }

    #[test]
    fn tiny_duration_yields_at_most_one() {
        let p = WorkloadProfile::chatbot();
        let tp = fast_process(0);
        for seed in 0..20 {
            assert!(gen_trace(&p, &tp, seed, 1.0 / F, F).unwrap().len() <= 1);
        }
        assert!(gen_trace(&p, &tp, 0, 0.0, F).is_err());
    }

    #[test]
    fn traces_are_deterministic_and_in_range() {
        let p = WorkloadProfile::codegen();
        let tp = fast_process(3);
        let a = gen_trace(&p, &tp, 7, 2.0, F).unwrap();
        let b = gen_trace(&p, &tp, 7, 2.0, F).unwrap();
        assert_eq!(write_trace(&a), write_trace(&b));
        assert_ne!(write_trace(&a), write_trace(&gen_trace(&p, &tp, 8, 2.0, F).unwrap()));
        for r in &a {
            assert!(p.input_len.contains(r.input_len) && p.output_len.contains(r.output_len));
            assert_eq!(r.tokens.len(), r.total_len() as usize);
            assert!(r.tokens.iter().all(|&t| t < DEFAULT_VOCAB));
        }
    }

    #[test]
    fn trace_file_round_trip() {
        let p = WorkloadProfile::qa();
        let a = gen_trace(&p, &fast_process(1), 1, 0.5, F).unwrap();
        let text = write_trace(&a);
        assert!(text.starts_with("speckv-trace v1\n"));
        assert_eq!(read_trace(&text).unwrap(), a);
        assert!(read_trace("nope\n").is_err());
        assert!(read_trace("speckv-trace v1\n1,2,3\n").is_err());
        assert!(read_trace("speckv-trace v1\n1,2,1,1 5\n").is_err());
        assert_eq!(read_trace("speckv-trace v1\n1,2,1,1 5 6\n").unwrap()[0].tokens, vec![5, 6]);
    }

    #[test]
    fn successors_are_a_permutation() {
        let tp = fast_process(4);
        let mut seen = vec![false; DEFAULT_VOCAB as usize];
        for r in 0..DEFAULT_VOCAB {
            let t = tp.successor(3, 9, r) as usize;
            assert!(!seen[t]);
            seen[t] = true;
        }
    }

    #[test]
    fn temperature_extremes() {
        let cold = TokenProcess::new(DEFAULT_VOCAB, 0.0, 2);
        assert_eq!(cold.ideal_top4(), 1.0);
        assert!(measured_top4(&cold) > 0.99);
        let hot = TokenProcess::new(DEFAULT_VOCAB, 1e9, 2);
        assert!((hot.ideal_top4() - 4.0 / 1024.0).abs() < 1e-3);
        assert!(measured_top4(&hot) < 0.02);
    }

    #[test]
    fn chatbot_calibration_hits_target() {
        let p = WorkloadProfile::chatbot().accuracy;
        let tp = TokenProcess::calibrated(p, 11);
        let acc = measured_top4(&tp);
        assert!((acc - 0.96).abs() <= 0.02, "tau {} acc {acc}", tp.temperature);
    }

    #[test]
    fn profiles_validate() {
        for name in ["chatbot", "summarization", "codegen", "qa"] {
            WorkloadProfile::by_name(name).unwrap().validate().unwrap();
        }
        assert!(WorkloadProfile::by_name("poetry").is_err());
        let mut p = WorkloadProfile::qa();
        p.input_len = LenRange::new(5, 2);
        assert!(p.validate().is_err());
    }
}
