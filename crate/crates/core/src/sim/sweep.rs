//! Parameter sweeps: prefetch depth and engine count.

use std::collections::VecDeque;

use rand_distr::{Distribution, Exp};
use serde::Serialize;

use super::report::{fmt_float, percentile, ReportFormat};
use super::{run, SimError};
use crate::config::SimConfig;
use crate::seed::rng_for;
use crate::timing::{aggregate_throughput, Arbiter, Contention, EngineState, LatencyParams, B_HBM_GBPS, THETA_SINGLE_GBPS};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepKRow {
    pub k: u32,
    pub hit_rate: Option<f64>,
    pub coverage: Option<f64>,
    pub precision: Option<f64>,
    pub throughput_tokens_per_s: Option<f64>,
    pub latency_avg_ms: Option<f64>,
    pub effective_access_latency_ns: Option<f64>,
}

/// One run per depth, fixed (non-adaptive) depth each. Runs are independent
/// and execute on separate threads; rows come back in `ks` order.
pub fn sweep_k(cfg: &SimConfig, ks: &[u32]) -> Result<Vec<SweepKRow>, SimError> {
    let configs: Vec<SimConfig> = ks
        .iter()
        .map(|&k| {
            let mut c = cfg.clone();
            c.serving.prefetch_depth = k;
            c.adaptive_depth = false;
            c
        })
        .collect();
    let results: Vec<Result<_, SimError>> = std::thread::scope(|s| {
        let handles: Vec<_> = configs.iter().map(|c| s.spawn(move || run(c))).collect();
        handles.into_iter().map(|h| h.join().expect("sweep worker panicked")).collect()
    });
    ks.iter()
        .zip(results)
        .map(|(&k, m)| {
            let m = m?;
            Ok(SweepKRow {
                k,
                hit_rate: m.hit_rate,
                coverage: m.coverage,
                precision: m.precision,
                throughput_tokens_per_s: m.throughput_tokens_per_s,
                latency_avg_ms: m.latency_avg_ms,
                effective_access_latency_ns: m.effective_access_latency_ns,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EngineRow {
    pub engines: u32,
    pub throughput_gbps: f64,
    pub efficiency: f64,
    pub saturated: bool,
    pub avg_ns: f64,
    pub p99_ns: f64,
}

fn cell(x: Option<f64>) -> String {
    x.map(fmt_float).unwrap_or_default()
}

fn table<T: Serialize>(header: &str, rows: &[T], line: impl Fn(&T) -> Vec<String>, fmt: ReportFormat) -> String {
    match fmt {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(rows).expect("rows serialize");
            s.push('\n');
            s
        }
        ReportFormat::Csv => {
            let mut s = format!("{header}\n");
            for r in rows {
                s.push_str(&line(r).join(","));
                s.push('\n');
            }
            s
        }
    }
}

pub fn sweep_k_table(rows: &[SweepKRow], fmt: ReportFormat) -> String {
    let header = "k,hit_rate,coverage,precision,throughput_tokens_per_s,latency_avg_ms,effective_access_latency_ns";
    table(
        header,
        rows,
        |r| {
            vec![
                r.k.to_string(),
                cell(r.hit_rate),
                cell(r.coverage),
                cell(r.precision),
                cell(r.throughput_tokens_per_s),
                cell(r.latency_avg_ms),
                cell(r.effective_access_latency_ns),
            ]
        },
        fmt,
    )
}

pub fn engines_table(rows: &[EngineRow], fmt: ReportFormat) -> String {
    table(
        "engines,throughput_gbps,efficiency,saturated,avg_ns,p99_ns",
        rows,
        |r| {
            vec![
                r.engines.to_string(),
                fmt_float(r.throughput_gbps),
                fmt_float(r.efficiency),
                r.saturated.to_string(),
                fmt_float(r.avg_ns),
                fmt_float(r.p99_ns),
            ]
        },
        fmt,
    )
}

/// Entries served per engine count in the latency model.
const SCALE_REQUESTS: usize = 20_000;
/// Arbiter weight on queue depth versus inverse latency.
const ARBITER_ALPHA: f64 = 0.5;

/// Engine scaling: throughput from the contention model, latency from a
/// shared-HBM queue where `n` engines offer `Θ_agg(n)` and an arbiter picks
/// which engine's entry is served next.
pub fn sweep_engines(p: &LatencyParams, seed: u64, ns: &[u32]) -> Vec<EngineRow> {
    let contention = Contention::reference();
    ns.iter()
        .map(|&n| {
            let point = aggregate_throughput(n, THETA_SINGLE_GBPS, contention, B_HBM_GBPS);
            let (avg_ns, p99_ns) = queue_latency(p, seed, n, point.throughput);
            EngineRow {
                engines: n,
                throughput_gbps: point.throughput,
                efficiency: point.efficiency,
                saturated: point.saturated,
                avg_ns,
                p99_ns,
            }
        })
        .collect()
}

fn queue_latency(p: &LatencyParams, seed: u64, n: u32, theta_gbps: f64) -> (f64, f64) {
    let n = n.max(1) as usize;
    let entry = p.s_entry as f64;
    // Nanoseconds per entry on the shared HBM, and per-engine arrival rate per ns.
    let service = entry / B_HBM_GBPS;
    let rate = theta_gbps / entry / n as f64;
    let exp = Exp::new(rate).expect("positive rate");
    let mut rng = rng_for(seed, &[0x5CA1E, n as u64]);
    let mut next: Vec<f64> = (0..n).map(|_| exp.sample(&mut rng)).collect();
    let mut queues: Vec<VecDeque<f64>> = vec![VecDeque::new(); n];
    let mut states = EngineState::partitioned(n, 1 << 20);
    for s in &mut states {
        s.mean_latency = p.prefetch_hit_ns;
    }
    let mut served_per: Vec<u64> = vec![0; n];
    let mut arbiter = Arbiter::new(n);
    let mut free = 0.0f64;
    let mut lat = Vec::with_capacity(SCALE_REQUESTS);
    while lat.len() < SCALE_REQUESTS {
        if queues.iter().all(VecDeque::is_empty) {
            let t = next.iter().copied().fold(f64::INFINITY, f64::min);
            free = free.max(t);
        }
        for e in 0..n {
            while next[e] <= free {
                queues[e].push_back(next[e]);
                next[e] += exp.sample(&mut rng);
            }
        }
        for s in &mut states {
            s.queue_depth = queues[s.id].len() as f64;
        }
        // An idle winner forfeits the slot to the longest queue.
        let mut pick = arbiter.arbitrate(&mut states, ARBITER_ALPHA);
        if queues[pick].is_empty() {
            pick = (0..n).max_by_key(|&e| (queues[e].len(), std::cmp::Reverse(e))).expect("engines");
        }
        let arrived = queues[pick].pop_front().expect("eligible queue");
        let done = free + service;
        free = done;
        let l = p.prefetch_hit_ns + (done - arrived);
        let s = &mut states[pick];
        served_per[pick] += 1;
        s.mean_latency += (l - s.mean_latency) / served_per[pick] as f64;
        lat.push(l);
    }
    let avg = lat.iter().sum::<f64>() / lat.len() as f64;
    lat.sort_by(f64::total_cmp);
    (avg, percentile(&lat, 0.99).unwrap_or(avg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn engine_table_shape() {
        let rows = sweep_engines(&LatencyParams::default(), 0, &[1, 2, 3, 4]);
        let want = [412.0, 798.0, 1156.0, 1487.0];
        for (r, w) in rows.iter().zip(want) {
            assert!((r.throughput_gbps - w).abs() / w <= 0.05, "{r:?}");
            assert!(r.throughput_gbps <= 1600.0);
        }
        for w in rows.windows(2) {
            assert!(w[1].throughput_gbps > w[0].throughput_gbps);
            assert!(w[1].avg_ns > w[0].avg_ns, "{rows:?}");
            assert!(w[1].p99_ns >= w[0].p99_ns, "{rows:?}");
        }
        assert!((0.88..=0.93).contains(&rows[3].efficiency));
    }

    #[test]
    fn tables_have_one_line_per_row() {
        let rows = sweep_engines(&LatencyParams::default(), 0, &[1, 2]);
        let csv = engines_table(&rows, ReportFormat::Csv);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("engines,throughput_gbps,"));
        let json: serde_json::Value = serde_json::from_str(&engines_table(&rows, ReportFormat::Json)).unwrap();
        assert_eq!(json.as_array().unwrap().len(), 2);
        let k = [SweepKRow {
            k: 4,
            hit_rate: Some(0.5),
            coverage: None,
            precision: Some(0.25),
            throughput_tokens_per_s: Some(10.0),
            latency_avg_ms: Some(1.0),
            effective_access_latency_ns: Some(300.0),
        }];
        assert_eq!(sweep_k_table(&k, ReportFormat::Csv).lines().nth(1), Some("4,0.5,,0.25,10.0,1.0,300.0"));
    }

    #[test]
    fn latency_sim_is_deterministic() {
        let p = LatencyParams::default();
        assert_eq!(sweep_engines(&p, 3, &[2]), sweep_engines(&p, 3, &[2]));
    }
}
