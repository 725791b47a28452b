//! Simulation configuration and its `key = value` file format.
//!
//! One setting per line, `#` starts a comment, keys are dotted paths.
//! Unknown or repeated keys are errors. Sizes accept `K`, `M`, `G` suffixes
//! (powers of 1024); ranges are written `a..b`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use crate::adapt::{ThrottleState, Weights};
use crate::codec::Scheme;
use crate::memory::{MemoryConfig, MigrationPolicy, TlbConfig};
use crate::model::{ModelGeometry, ServingConfig};
use crate::prefetch::{PredictorSpec, HISTORY_LEN};
use crate::timing::LatencyParams;
use crate::workload::{LenRange, WorkloadProfile};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: `{key}` set twice")]
    Duplicate { line: usize, key: String },
    #[error("line {line}: bad value `{value}` for `{key}`: {msg}")]
    Value {
        line: usize,
        key: String,
        value: String,
        msg: String,
    },
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),
}

/// Which data paths are enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    /// Tiered memory with speculative prefetch.
    SpecKv,
    /// Everything in GPU memory; admission is limited by L1 capacity.
    GpuOnly,
    /// Tiered memory, no predictor: every demanded entry is fetched on demand.
    CxlNoSpec,
}

impl Baseline {
    pub fn name(self) -> &'static str {
        match self {
            Baseline::SpecKv => "speckv",
            Baseline::GpuOnly => "gpu_only",
            Baseline::CxlNoSpec => "cxl_nospec",
        }
    }
}

impl FromStr for Baseline {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "speckv" => Ok(Baseline::SpecKv),
            "gpu_only" => Ok(Baseline::GpuOnly),
            "cxl_nospec" => Ok(Baseline::CxlNoSpec),
            _ => Err("expected speckv, gpu_only or cxl_nospec".into()),
        }
    }
}

/// Compression choice for transfers and L3 storage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecChoice {
    /// Per-layer selection by the objective.
    Auto,
    Fixed(Scheme),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimConfig {
    pub geometry: ModelGeometry,
    pub serving: ServingConfig,
    pub timing: LatencyParams,
    pub predictor: PredictorSpec,
    /// Set when the predictor accuracy was given explicitly rather than
    /// taken from the workload profile.
    pub predictor_accuracy_set: bool,
    pub throttle: ThrottleState,
    pub beta_ucb: f64,
    pub adaptive_depth: bool,
    pub selector_weights: Weights,
    pub selector_q_min: f64,
    pub selector_learn: bool,
    pub migration: MigrationPolicy,
    pub demote_scan: usize,
    pub tlb: TlbConfig,
    pub workload: WorkloadProfile,
    pub trace_file: Option<String>,
    pub seed: u64,
    /// Seconds of arrivals when no token budget is set.
    pub duration: f64,
    /// Stop generating arrivals once this many output tokens are queued.
    pub max_tokens: Option<u64>,
    pub epoch_ticks: u64,
    pub baseline: Baseline,
    pub codec: CodecChoice,
}

impl Default for SimConfig {
    fn default() -> Self {
        let workload = WorkloadProfile::chatbot();
        Self {
            geometry: ModelGeometry {
                max_seq: 4096,
                ..ModelGeometry::desk()
            },
            serving: ServingConfig::default(),
            timing: LatencyParams::default(),
            predictor: PredictorSpec::Oracle {
                accuracy: workload.accuracy,
                rank_decay: 0.5,
            },
            predictor_accuracy_set: false,
            throttle: ThrottleState::default(),
            beta_ucb: 1.0,
            adaptive_depth: false,
            selector_weights: Weights { r: 1.0, q: 1.0, c: 0.01 },
            selector_q_min: 0.95,
            selector_learn: false,
            migration: MigrationPolicy::default(),
            demote_scan: 8,
            tlb: TlbConfig::default(),
            workload,
            trace_file: None,
            seed: 0,
            duration: 1.0,
            max_tokens: None,
            epoch_ticks: 1024,
            baseline: Baseline::SpecKv,
            codec: CodecChoice::Auto,
        }
    }
}

impl SimConfig {
    /// The acceptance desk setup: 8 layers, d=512, batch 8, 256-token
    /// contexts, oracle predictor at 0.95 and depth 4.
    pub fn desk() -> Self {
        let mut c = Self {
            geometry: ModelGeometry::desk(),
            ..Self::default()
        };
        c.workload.input_len = LenRange::new(64, 128);
        c.workload.output_len = LenRange::new(64, 128);
        c.workload.rate = 10_000.0;
        c.predictor = PredictorSpec::Oracle {
            accuracy: 0.95,
            rank_decay: 0.5,
        };
        c.predictor_accuracy_set = true;
        c.serving.prefetch_depth = 4;
        c.max_tokens = Some(50_000);
        c
    }

    pub fn memory_config(&self) -> MemoryConfig {
        MemoryConfig {
            page_size: self.serving.page_size,
            l1_capacity: self.serving.l1_capacity,
            l2_capacity: self.serving.l2_capacity,
            l3_capacity: self.serving.l3_capacity,
            tlb: self.tlb,
            tlb_hit_latency: self.timing.tlb_hit_latency,
            walk_latency: self.timing.l_walk,
            migration: self.migration.clone(),
            demote_scan: self.demote_scan,
        }
    }

    /// Every problem at once, one message per field.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut errs = Vec::new();
        if let Err(e) = self.geometry.validate() {
            errs.push(format!("model: {e}"));
        }
        if let Err(e) = self.serving.validate() {
            errs.push(format!("serving: {e}"));
        }
        if let Err(e) = self.timing.validate() {
            errs.push(format!("timing: {e}"));
        }
        if let Err(e) = self.predictor.validate() {
            errs.push(e);
        }
        if let Err(e) = self.throttle.validate() {
            errs.push(e.to_string());
        }
        if !(self.beta_ucb >= 0.0 && self.beta_ucb.is_finite()) {
            errs.push(format!("bandit.beta_ucb must be >= 0 (got {})", self.beta_ucb));
        }
        if !(0.0..=1.0).contains(&self.selector_q_min) {
            errs.push(format!("selector.q_min must lie in [0, 1] (got {})", self.selector_q_min));
        }
        if let Err(e) = self.migration.validate() {
            errs.push(format!("memory: {e}"));
        }
        if self.tlb.entries == 0 || self.tlb.ways == 0 || !self.tlb.entries.is_multiple_of(self.tlb.ways) {
            errs.push(format!(
                "atu.tlb_entries ({}) must be a positive multiple of atu.ways ({})",
                self.tlb.entries, self.tlb.ways
            ));
        }
        if self.tlb.span == 0 {
            errs.push("atu.span must be >= 1".into());
        }
        if let Err(e) = self.workload.validate() {
            errs.push(e.to_string());
        }
        if self.serving.history_len > HISTORY_LEN {
            errs.push(format!("serving.history_len must be <= {HISTORY_LEN}"));
        }
        if self.serving.prefetch_depth > 16 {
            errs.push("serving.prefetch_depth must be <= 16".into());
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            errs.push(format!("duration must be positive (got {})", self.duration));
        }
        if self.max_tokens == Some(0) {
            errs.push("max_tokens must be >= 1".into());
        }
        if self.epoch_ticks == 0 {
            errs.push("epoch_ticks must be >= 1".into());
        }
        let longest = u64::from(self.workload.input_len.max + self.workload.output_len.max);
        if longest > self.geometry.max_seq {
            errs.push(format!(
                "workload requests reach {longest} tokens but model.max_seq is {}",
                self.geometry.max_seq
            ));
        }
        let page_bytes = self.serving.page_size;
        let kv = crate::model::kv_bytes_per_token_layer(&self.geometry);
        if kv > page_bytes {
            errs.push(format!(
                "one token-layer of KV ({kv} B) does not fit in serving.page_size ({page_bytes} B)"
            ));
        }
        if self.serving.l2_capacity < 2 * page_bytes {
            errs.push("serving.l2_capacity must hold at least two pages".into());
        }
        // One full request must fit where the baseline keeps it.
        let per_request = longest * self.geometry.layers * page_bytes;
        let home = match self.baseline {
            Baseline::GpuOnly => ("serving.l1_capacity", self.serving.l1_capacity),
            _ => ("serving.l3_capacity", self.serving.l3_capacity),
        };
        if per_request > home.1 {
            errs.push(format!(
                "{} ({} B) cannot hold one request ({per_request} B of pages)",
                home.0, home.1
            ));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(errs))
        }
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries: BTreeMap<String, (usize, String)> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let Some((k, v)) = body.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line,
                    msg: format!("expected `key = value`, found `{body}`"),
                });
            };
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if k.is_empty() || v.is_empty() {
                return Err(ConfigError::Syntax {
                    line,
                    msg: "empty key or value".into(),
                });
            }
            if entries.insert(k.clone(), (line, v)).is_some() {
                return Err(ConfigError::Duplicate { line, key: k });
            }
        }
        let mut c = SimConfig::default();
        // The profile supplies defaults the other workload keys override.
        if let Some((line, v)) = entries.remove("workload") {
            c.workload = WorkloadProfile::by_name(&v).map_err(|e| ConfigError::Value {
                line,
                key: "workload".into(),
                value: v.clone(),
                msg: e.to_string(),
            })?;
        }
        let mut predictor_kind = None;
        if let Some((line, v)) = entries.remove("predictor") {
            predictor_kind = Some((line, v));
        }
        let mut pred = PredOpts::default();
        for (key, (line, value)) in &entries {
            apply(&mut c, &mut pred, key, value).map_err(|e| match e {
                ApplyError::Unknown => ConfigError::UnknownKey {
                    line: *line,
                    key: key.clone(),
                },
                ApplyError::Value(msg) => ConfigError::Value {
                    line: *line,
                    key: key.clone(),
                    value: value.clone(),
                    msg,
                },
            })?;
        }
        let kind = match &predictor_kind {
            Some((line, v)) => match v.as_str() {
                "oracle" | "markov" | "replay" => v.as_str(),
                _ => {
                    return Err(ConfigError::Value {
                        line: *line,
                        key: "predictor".into(),
                        value: v.clone(),
                        msg: "expected oracle, markov or replay".into(),
                    })
                }
            },
            None => "oracle",
        };
        c.predictor_accuracy_set = pred.accuracy.is_some();
        c.predictor = match kind {
            "markov" => PredictorSpec::Markov {
                order: pred.order.unwrap_or(2),
            },
            "replay" => PredictorSpec::Replay {
                corruption: pred.corruption.unwrap_or(0.0),
            },
            _ => PredictorSpec::Oracle {
                accuracy: pred.accuracy.unwrap_or(c.workload.accuracy),
                rank_decay: pred.rank_decay.unwrap_or(0.5),
            },
        };
        c.validate()?;
        Ok(c)
    }

    /// Canonical text form; parsing it gives back an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        let g = &self.geometry;
        put("model.layers", g.layers.to_string());
        put("model.hidden_dim", g.hidden_dim.to_string());
        put("model.heads", g.heads.to_string());
        put("model.precision_bits", g.precision_bits.to_string());
        put("model.max_seq", g.max_seq.to_string());
        let s = &self.serving;
        put("serving.batch_size", s.batch_size.to_string());
        put("serving.page_size", s.page_size.to_string());
        put("serving.l1_capacity", s.l1_capacity.to_string());
        put("serving.l2_capacity", s.l2_capacity.to_string());
        put("serving.l3_capacity", s.l3_capacity.to_string());
        put("serving.prefetch_depth", s.prefetch_depth.to_string());
        put("serving.history_len", s.history_len.to_string());
        for (k, v) in timing_fields(&self.timing) {
            put(&format!("timing.{k}"), v);
        }
        match self.predictor {
            PredictorSpec::Oracle { accuracy, rank_decay } => {
                put("predictor", "oracle".into());
                put("predictor.accuracy", fmt_f(accuracy));
                put("predictor.rank_decay", fmt_f(rank_decay));
            }
            PredictorSpec::Markov { order } => {
                put("predictor", "markov".into());
                put("predictor.order", order.to_string());
            }
            PredictorSpec::Replay { corruption } => {
                put("predictor", "replay".into());
                put("predictor.corruption", fmt_f(corruption));
            }
        }
        put("throttle.kappa", fmt_f(self.throttle.kappa));
        put("throttle.target", fmt_f(self.throttle.target));
        put("bandit.beta_ucb", fmt_f(self.beta_ucb));
        put("bandit.adaptive", self.adaptive_depth.to_string());
        put("selector.q_min", fmt_f(self.selector_q_min));
        put("selector.learn", self.selector_learn.to_string());
        let m = &self.migration;
        put("memory.t_h", fmt_f(m.t_h));
        put("memory.t_c", fmt_f(m.t_c));
        put("memory.step", fmt_f(m.step));
        put("memory.miss_target", fmt_f(m.miss_target));
        put("memory.hot_window", m.hot_window.to_string());
        put("memory.t_h_max", fmt_f(m.t_h_max));
        put("memory.demote_scan", self.demote_scan.to_string());
        put("atu.tlb_entries", self.tlb.entries.to_string());
        put("atu.ways", self.tlb.ways.to_string());
        put("atu.span", self.tlb.span.to_string());
        put("workload", self.workload.name.clone());
        put("workload.rate", fmt_f(self.workload.rate));
        put("workload.input_len", fmt_range(self.workload.input_len));
        put("workload.output_len", fmt_range(self.workload.output_len));
        if let Some(t) = &self.trace_file {
            put("workload.trace", t.clone());
        }
        put("seed", self.seed.to_string());
        put("duration", fmt_f(self.duration));
        if let Some(n) = self.max_tokens {
            put("max_tokens", n.to_string());
        }
        put("epoch_ticks", self.epoch_ticks.to_string());
        put("baseline", self.baseline.name().into());
        put(
            "codec.scheme",
            match self.codec {
                CodecChoice::Auto => "auto".into(),
                CodecChoice::Fixed(s) => s.name().into(),
            },
        );
        out
    }
}

impl fmt::Display for SimConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

fn fmt_f(x: f64) -> String {
    format!("{x:?}")
}

fn fmt_range(r: LenRange) -> String {
    format!("{}..{}", r.min, r.max)
}

#[derive(Default)]
struct PredOpts {
    accuracy: Option<f64>,
    rank_decay: Option<f64>,
    order: Option<usize>,
    corruption: Option<f64>,
}

enum ApplyError {
    Unknown,
    Value(String),
}

fn num<T: FromStr>(v: &str) -> Result<T, ApplyError>
where
    T::Err: fmt::Display,
{
    v.parse::<T>().map_err(|e| ApplyError::Value(e.to_string()))
}

/// Integer with an optional binary `K`/`M`/`G` suffix.
fn size(v: &str) -> Result<u64, ApplyError> {
    let t = v.trim_end_matches(['B', 'b']).trim_end_matches('i');
    let (digits, mult) = match t.chars().last() {
        Some('K' | 'k') => (&t[..t.len() - 1], 1u64 << 10),
        Some('M' | 'm') => (&t[..t.len() - 1], 1 << 20),
        Some('G' | 'g') => (&t[..t.len() - 1], 1 << 30),
        _ => (t, 1),
    };
    let n: u64 = num(digits.trim())?;
    n.checked_mul(mult).ok_or_else(|| ApplyError::Value("size overflows".into()))
}

fn boolean(v: &str) -> Result<bool, ApplyError> {
    match v {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(ApplyError::Value("expected true or false".into())),
    }
}

fn range(v: &str) -> Result<LenRange, ApplyError> {
    match v.split_once("..") {
        Some((a, b)) => Ok(LenRange::new(num(a.trim())?, num(b.trim())?)),
        None => {
            let n = num(v)?;
            Ok(LenRange::new(n, n))
        }
    }
}

fn timing_fields(p: &LatencyParams) -> Vec<(&'static str, String)> {
    vec![
        ("f_clk", fmt_f(p.f_clk)),
        ("l_pred", p.l_pred.to_string()),
        ("l_atu", p.l_atu.to_string()),
        ("l_dma", p.l_dma.to_string()),
        ("l_walk", p.l_walk.to_string()),
        ("tlb_hit_latency", p.tlb_hit_latency.to_string()),
        ("l_crit_decomp", p.l_crit_decomp.to_string()),
        ("l_bypass", p.l_bypass.to_string()),
        ("pipeline_depth", p.pipeline_depth.to_string()),
        ("ii", p.ii.to_string()),
        ("omega_max", p.omega_max.to_string()),
        ("s_entry", p.s_entry.to_string()),
        ("bw_cxl", fmt_f(p.bw_cxl)),
        ("bw_hbm", fmt_f(p.bw_hbm)),
        ("bw_gpu_hbm", fmt_f(p.bw_gpu_hbm)),
        ("c_hbm", p.c_hbm.to_string()),
        ("sync_miss_ns", fmt_f(p.sync_miss_ns)),
        ("prefetch_hit_ns", fmt_f(p.prefetch_hit_ns)),
        ("gpu_peak_flops", fmt_f(p.gpu_peak_flops)),
    ]
}

fn apply_timing(p: &mut LatencyParams, field: &str, v: &str) -> Result<(), ApplyError> {
    match field {
        "f_clk" => p.f_clk = num(v)?,
        "l_pred" => p.l_pred = num(v)?,
        "l_atu" => p.l_atu = num(v)?,
        "l_dma" => p.l_dma = num(v)?,
        "l_walk" => p.l_walk = num(v)?,
        "tlb_hit_latency" => p.tlb_hit_latency = num(v)?,
        "l_crit_decomp" => p.l_crit_decomp = num(v)?,
        "l_bypass" => p.l_bypass = num(v)?,
        "pipeline_depth" => p.pipeline_depth = num(v)?,
        "ii" => p.ii = num(v)?,
        "omega_max" => p.omega_max = num(v)?,
        "s_entry" => p.s_entry = size(v)?,
        "bw_cxl" => p.bw_cxl = num(v)?,
        "bw_hbm" => p.bw_hbm = num(v)?,
        "bw_gpu_hbm" => p.bw_gpu_hbm = num(v)?,
        "c_hbm" => p.c_hbm = num(v)?,
        "sync_miss_ns" => p.sync_miss_ns = num(v)?,
        "prefetch_hit_ns" => p.prefetch_hit_ns = num(v)?,
        "gpu_peak_flops" => p.gpu_peak_flops = num(v)?,
        _ => return Err(ApplyError::Unknown),
    }
    Ok(())
}

fn apply(c: &mut SimConfig, pred: &mut PredOpts, key: &str, v: &str) -> Result<(), ApplyError> {
    if let Some(field) = key.strip_prefix("timing.") {
        return apply_timing(&mut c.timing, field, v);
    }
    match key {
        "model.layers" => c.geometry.layers = num(v)?,
        "model.hidden_dim" => c.geometry.hidden_dim = num(v)?,
        "model.heads" => c.geometry.heads = num(v)?,
        "model.precision_bits" => c.geometry.precision_bits = num(v)?,
        "model.max_seq" => c.geometry.max_seq = num(v)?,
        "serving.batch_size" => c.serving.batch_size = num(v)?,
        "serving.page_size" => c.serving.page_size = size(v)?,
        "serving.l1_capacity" => c.serving.l1_capacity = size(v)?,
        "serving.l2_capacity" => c.serving.l2_capacity = size(v)?,
        "serving.l3_capacity" => c.serving.l3_capacity = size(v)?,
        "serving.prefetch_depth" => c.serving.prefetch_depth = num(v)?,
        "serving.history_len" => c.serving.history_len = num(v)?,
        "predictor.accuracy" => pred.accuracy = Some(num(v)?),
        "predictor.rank_decay" => pred.rank_decay = Some(num(v)?),
        "predictor.order" => pred.order = Some(num(v)?),
        "predictor.corruption" => pred.corruption = Some(num(v)?),
        "throttle.kappa" => c.throttle.kappa = num(v)?,
        "throttle.target" => c.throttle.target = num(v)?,
        "bandit.beta_ucb" => c.beta_ucb = num(v)?,
        "bandit.adaptive" => c.adaptive_depth = boolean(v)?,
        "selector.q_min" => c.selector_q_min = num(v)?,
        "selector.learn" => c.selector_learn = boolean(v)?,
        "memory.t_h" => c.migration.t_h = num(v)?,
        "memory.t_c" => c.migration.t_c = num(v)?,
        "memory.step" => c.migration.step = num(v)?,
        "memory.miss_target" => c.migration.miss_target = num(v)?,
        "memory.hot_window" => c.migration.hot_window = num(v)?,
        "memory.t_h_max" => c.migration.t_h_max = num(v)?,
        "memory.demote_scan" => c.demote_scan = num(v)?,
        "atu.tlb_entries" => c.tlb.entries = num(v)?,
        "atu.ways" => c.tlb.ways = num(v)?,
        "atu.span" => c.tlb.span = num(v)?,
        "workload.rate" => c.workload.rate = num(v)?,
        "workload.input_len" => c.workload.input_len = range(v)?,
        "workload.output_len" => c.workload.output_len = range(v)?,
        "workload.trace" => c.trace_file = Some(v.to_string()),
        "seed" => c.seed = num(v)?,
        "duration" => c.duration = num(v)?,
        "max_tokens" => c.max_tokens = Some(num(v)?),
        "epoch_ticks" => c.epoch_ticks = num(v)?,
        "baseline" => c.baseline = v.parse().map_err(ApplyError::Value)?,
        "codec.scheme" => {
            c.codec = if v == "auto" {
                CodecChoice::Auto
            } else {
                CodecChoice::Fixed(v.parse().map_err(|e: crate::codec::CodecError| ApplyError::Value(e.to_string()))?)
            }
        }
        _ => return Err(ApplyError::Unknown),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        SimConfig::default().validate().unwrap();
        SimConfig::desk().validate().unwrap();
    }

    #[test]
    fn parses_values_and_comments() {
        let c = SimConfig::parse(
            "# desk run\nworkload = qa\nworkload.rate = 50 # per second\nserving.l1_capacity = 2M\n\
             predictor = markov\npredictor.order = 3\ntiming.bw_cxl = 32e9\ncodec.scheme = int8\nseed = 9\n",
        )
        .unwrap();
        assert_eq!(c.workload.name, "qa");
        assert_eq!(c.workload.rate, 50.0);
        assert_eq!(c.serving.l1_capacity, 2 << 20);
        assert_eq!(c.predictor, PredictorSpec::Markov { order: 3 });
        assert_eq!(c.timing.bw_cxl, 32e9);
        assert_eq!(c.codec, CodecChoice::Fixed(Scheme::Int8));
        assert_eq!(c.seed, 9);
    }

    #[test]
    fn oracle_accuracy_defaults_to_profile() {
        let c = SimConfig::parse("workload = qa\n").unwrap();
        assert_eq!(
            c.predictor,
            PredictorSpec::Oracle {
                accuracy: 0.965,
                rank_decay: 0.5
            }
        );
        assert!(!c.predictor_accuracy_set);
        let c = SimConfig::parse("workload = qa\npredictor.accuracy = 0.9\n").unwrap();
        assert!(c.predictor_accuracy_set);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(SimConfig::parse("bogus = 1\n"), Err(ConfigError::UnknownKey { line: 1, .. })));
        assert!(matches!(SimConfig::parse("seed = 1\nseed = 2\n"), Err(ConfigError::Duplicate { line: 2, .. })));
        assert!(matches!(SimConfig::parse("seed\n"), Err(ConfigError::Syntax { .. })));
        assert!(matches!(SimConfig::parse("seed = x\n"), Err(ConfigError::Value { .. })));
        assert!(matches!(SimConfig::parse("predictor = lstm\n"), Err(ConfigError::Value { .. })));
        assert!(matches!(SimConfig::parse("workload = poetry\n"), Err(ConfigError::Value { .. })));
    }

    #[test]
    fn validation_lists_every_field() {
        let err = SimConfig::parse("model.layers = 0\nthrottle.target = 2\nepoch_ticks = 0\n").unwrap_err();
        match err {
            ConfigError::Invalid(v) => {
                assert_eq!(v.len(), 3, "{v:?}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn capacity_infeasible_rejected() {
        let err = SimConfig::parse("serving.l3_capacity = 1M\nserving.l1_capacity = 512K\n").unwrap_err();
        assert!(err.to_string().contains("cannot hold one request"), "{err}");
    }

    #[test]
    fn text_round_trip() {
        let mut c = SimConfig::desk();
        c.codec = CodecChoice::Fixed(Scheme::Int8Delta);
        c.trace_file = Some("t.trace".into());
        let back = SimConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
        let d = SimConfig::default();
        assert_eq!(SimConfig::parse(&d.to_text()).unwrap(), SimConfig { predictor_accuracy_set: true, ..d });
    }
}
