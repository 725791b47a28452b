//! Run metrics and their CSV / JSON serializations.
//!
//! CSV layout: header `metric,value`, then one row per field of
//! [`SimMetrics`] in declaration order. Undefined values are empty in CSV
//! and `null` in JSON. Numbers are written in shortest round-trip form, so
//! both formats carry identical values.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

pub const CSV_HEADER: &str = "metric,value";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReportError {
    #[error("unknown report format `{0}` (expected csv or json)")]
    UnknownFormat(String),
    #[error("malformed report: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = ReportError;

    fn from_str(s: &str) -> Result<Self, ReportError> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            _ => Err(ReportError::UnknownFormat(s.to_string())),
        }
    }
}

impl fmt::Display for ReportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
        })
    }
}

/// Totals and rates of one run. Rates are `None` when their denominator is zero.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SimMetrics {
    pub hit_rate: Option<f64>,
    pub coverage: Option<f64>,
    pub precision: Option<f64>,
    pub latency_avg_ms: Option<f64>,
    pub latency_p50_ms: Option<f64>,
    pub latency_p95_ms: Option<f64>,
    pub latency_p99_ms: Option<f64>,
    pub ttft_ms: Option<f64>,
    pub throughput_tokens_per_s: Option<f64>,
    pub util_cxl: Option<f64>,
    pub util_fpga_hbm: Option<f64>,
    pub util_gpu_hbm: Option<f64>,
    pub effective_access_latency_ns: Option<f64>,
    pub tokens_committed: u64,
    pub sync_fallbacks: u64,
    pub requests_completed: u64,
    pub accesses: u64,
    pub prefetch_hits: u64,
    pub prefetches_launched: u64,
    pub sim_ticks: u64,
    pub gpu_busy_ticks: u64,
    pub stall_ticks: u64,
    pub compression_ratio: Option<f64>,
    pub tlb_hit_rate: Option<f64>,
    pub l1_hit_rate: Option<f64>,
    pub writebacks: u64,
    pub forced_writebacks: u64,
    pub promotions: u64,
    pub demotions: u64,
    pub queue_depth_mean: Option<f64>,
    pub queue_depth_max: Option<f64>,
    pub queue_depth_slope: Option<f64>,
    pub throttle_beta: f64,
    pub prefetch_depth: u64,
    pub unstable: bool,
}

/// One reported value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Value {
    Rate(Option<f64>),
    Count(u64),
    Flag(bool),
}

impl Value {
    /// Numeric view used for cross-format comparison; flags map to 0/1.
    pub fn as_f64(&self) -> Option<f64> {
        match *self {
            Value::Rate(r) => r,
            Value::Count(n) => Some(n as f64),
            Value::Flag(b) => Some(f64::from(u8::from(b))),
        }
    }

    fn text(&self) -> Option<String> {
        match *self {
            Value::Rate(r) => r.map(fmt_float),
            Value::Count(n) => Some(n.to_string()),
            Value::Flag(b) => Some(b.to_string()),
        }
    }
}

pub(crate) fn fmt_float(x: f64) -> String {
    if x.is_finite() {
        // serde_json's float formatting is the shortest round-trip form.
        serde_json::to_string(&x).expect("finite float")
    } else {
        "null".into()
    }
}

impl SimMetrics {
    /// Field names and values in report order.
    pub fn fields(&self) -> Vec<(&'static str, Value)> {
        use Value::{Count, Flag, Rate};
        vec![
            ("hit_rate", Rate(self.hit_rate)),
            ("coverage", Rate(self.coverage)),
            ("precision", Rate(self.precision)),
            ("latency_avg_ms", Rate(self.latency_avg_ms)),
            ("latency_p50_ms", Rate(self.latency_p50_ms)),
            ("latency_p95_ms", Rate(self.latency_p95_ms)),
            ("latency_p99_ms", Rate(self.latency_p99_ms)),
            ("ttft_ms", Rate(self.ttft_ms)),
            ("throughput_tokens_per_s", Rate(self.throughput_tokens_per_s)),
            ("util_cxl", Rate(self.util_cxl)),
            ("util_fpga_hbm", Rate(self.util_fpga_hbm)),
            ("util_gpu_hbm", Rate(self.util_gpu_hbm)),
            ("effective_access_latency_ns", Rate(self.effective_access_latency_ns)),
            ("tokens_committed", Count(self.tokens_committed)),
            ("sync_fallbacks", Count(self.sync_fallbacks)),
            ("requests_completed", Count(self.requests_completed)),
            ("accesses", Count(self.accesses)),
            ("prefetch_hits", Count(self.prefetch_hits)),
            ("prefetches_launched", Count(self.prefetches_launched)),
            ("sim_ticks", Count(self.sim_ticks)),
            ("gpu_busy_ticks", Count(self.gpu_busy_ticks)),
            ("stall_ticks", Count(self.stall_ticks)),
            ("compression_ratio", Rate(self.compression_ratio)),
            ("tlb_hit_rate", Rate(self.tlb_hit_rate)),
            ("l1_hit_rate", Rate(self.l1_hit_rate)),
            ("writebacks", Count(self.writebacks)),
            ("forced_writebacks", Count(self.forced_writebacks)),
            ("promotions", Count(self.promotions)),
            ("demotions", Count(self.demotions)),
            ("queue_depth_mean", Rate(self.queue_depth_mean)),
            ("queue_depth_max", Rate(self.queue_depth_max)),
            ("queue_depth_slope", Rate(self.queue_depth_slope)),
            ("throttle_beta", Rate(Some(self.throttle_beta))),
            ("prefetch_depth", Count(self.prefetch_depth)),
            ("unstable", Flag(self.unstable)),
        ]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for (k, v) in self.fields() {
            out.push_str(k);
            out.push(',');
            out.push_str(&v.text().unwrap_or_default());
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> String {
        let mut out = String::from("{\n");
        let fields = self.fields();
        for (i, (k, v)) in fields.iter().enumerate() {
            out.push_str("  \"");
            out.push_str(k);
            out.push_str("\": ");
            out.push_str(&v.text().unwrap_or_else(|| "null".into()));
            if i + 1 < fields.len() {
                out.push(',');
            }
            out.push('\n');
        }
        out.push_str("}\n");
        out
    }
}

pub fn report(metrics: &SimMetrics, format: ReportFormat) -> String {
    match format {
        ReportFormat::Csv => metrics.to_csv(),
        ReportFormat::Json => metrics.to_json(),
    }
}

/// Reads a report back into `name -> value`, flags as 0/1 and nulls as `None`.
pub fn parse_report(text: &str, format: ReportFormat) -> Result<BTreeMap<String, Option<f64>>, ReportError> {
    let bad = |m: String| ReportError::Malformed(m);
    let mut out = BTreeMap::new();
    match format {
        ReportFormat::Csv => {
            let mut lines = text.lines();
            if lines.next() != Some(CSV_HEADER) {
                return Err(bad("missing header".into()));
            }
            for line in lines {
                let (k, v) = line.split_once(',').ok_or_else(|| bad(format!("row `{line}`")))?;
                let val = match v {
                    "" => None,
                    "true" => Some(1.0),
                    "false" => Some(0.0),
                    _ => Some(v.parse::<f64>().map_err(|e| bad(format!("{k}: {e}")))?),
                };
                out.insert(k.to_string(), val);
            }
        }
        ReportFormat::Json => {
            let v: serde_json::Value = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
            let obj = v.as_object().ok_or_else(|| bad("not an object".into()))?;
            for (k, v) in obj {
                let val = match v {
                    serde_json::Value::Null => None,
                    serde_json::Value::Bool(b) => Some(f64::from(u8::from(*b))),
                    serde_json::Value::Number(n) => n.as_f64(),
                    other => return Err(bad(format!("{k}: unexpected {other}"))),
                };
                out.insert(k.clone(), val);
            }
        }
    }
    Ok(out)
}

/// Nearest-rank percentile of sorted data.
pub fn percentile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = (q * sorted.len() as f64).ceil().max(1.0) as usize;
    Some(sorted[rank.min(sorted.len()) - 1])
}

/// Least-squares slope of `y` against `x`.
pub fn slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for &(x, y) in points {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
    }
    (sxx > 0.0).then(|| sxy / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> SimMetrics {
        SimMetrics {
            hit_rate: Some(0.947),
            coverage: Some(0.95),
            precision: Some(0.2371),
            latency_avg_ms: Some(0.021_553_125),
            tokens_committed: 50_000,
            throttle_beta: 1.0,
            prefetch_depth: 4,
            unstable: true,
            ..SimMetrics::default()
        }
    }

    #[test]
    fn empty_run_has_null_rates() {
        let m = SimMetrics::default();
        let csv = m.to_csv();
        assert!(csv.starts_with("metric,value\nhit_rate,\n"), "{csv}");
        assert!(m.to_json().contains("\"hit_rate\": null"));
        assert!(m.to_json().contains("\"tokens_committed\": 0"));
    }

    #[test]
    fn formats_agree_and_round_trip() {
        let m = sample();
        let a = parse_report(&m.to_csv(), ReportFormat::Csv).unwrap();
        let b = parse_report(&m.to_json(), ReportFormat::Json).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), m.fields().len());
        for (k, v) in m.fields() {
            assert_eq!(a[k], v.as_f64(), "{k}");
        }
        assert_eq!(m.to_json(), sample().to_json());
    }

    #[test]
    fn unknown_format_rejected() {
        assert!("xml".parse::<ReportFormat>().is_err());
        assert_eq!("csv".parse::<ReportFormat>().unwrap(), ReportFormat::Csv);
    }

    #[test]
    fn percentiles_and_slope() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 0.5), Some(50.0));
        assert_eq!(percentile(&v, 0.99), Some(99.0));
        assert_eq!(percentile(&v, 1.0), Some(100.0));
        assert_eq!(percentile(&[], 0.5), None);
        let pts: Vec<(f64, f64)> = (0..10).map(|i| (f64::from(i), 3.0 * f64::from(i) + 1.0)).collect();
        assert!((slope(&pts).unwrap() - 3.0).abs() < 1e-12);
        assert_eq!(slope(&[(1.0, 1.0)]), None);
    }
}
