//! Acceptance criteria, one PASS/FAIL line each. Runs without the libtest
//! harness so the lines print in order; exits nonzero if any criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use speckv_core::adapt::BanditState;
use speckv_core::codec::synth::{correlated_block, mixed_block, LayerCompressProfile};
use speckv_core::codec::{
    compress, decompress, delta_decode, delta_encode, dequantize, quantize, rle_decode, rle_encode, Scheme,
};
use speckv_core::config::SimConfig;
use speckv_core::memory::{Hierarchy, LruSet, MemoryConfig, Virt};
use speckv_core::model::kv_bytes_per_token_layer;
use speckv_core::sim::{run, run_detailed, sweep_engines, sweep_k};
use speckv_core::timing::{effective_access_latency, LatencyParams, B_HBM_GBPS};
use speckv_core::validate;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn timed(limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> Outcome {
    let t = Instant::now();
    let mut o = f();
    let el = t.elapsed();
    o.detail.push_str(&format!("; {:.1}s", el.as_secs_f64()));
    if let Some(limit) = limit {
        if el > limit {
            o.pass = false;
            o.detail.push_str(&format!(" exceeds {}s", limit.as_secs()));
        }
    }
    o
}

fn codec_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut bad = 0usize;
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let b = mixed_block(&mut rng, 64, 1024);
        let q = quantize(&b);
        let expect = dequantize(&q);
        let half = f64::from(q.scale) / 2.0;
        for (x, y) in b.values().iter().zip(expect.values()) {
            worst = worst.max((x - y).abs() - half);
        }
        for s in [Scheme::Int8, Scheme::Int8Delta, Scheme::Int8DeltaRle] {
            let cb = compress(&b, s);
            // Bypassed blocks are stored raw and decode to the input exactly.
            let want = if cb.scheme == Scheme::Raw { &b } else { &expect };
            match decompress(&cb) {
                Ok(d) if d.values() == want.values() => {}
                _ => bad += 1,
            }
        }
    }
    outcome(bad == 0 && worst <= 0.0, format!("{bad} mismatches, max excess error {worst:e}"))
}

fn lossless_stages() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut bad = 0usize;
    for i in 0..1_000_000u32 {
        let len = rng.random_range(0..48usize);
        let bytes: Vec<u8> = if i % 2 == 0 {
            (0..len).map(|_| rng.random()).collect()
        } else {
            (0..len).map(|_| if rng.random_bool(0.8) { 0 } else { rng.random() }).collect()
        };
        if rle_decode(&rle_encode(&bytes)).as_deref() != Ok(&bytes[..]) {
            bad += 1;
        }
        if !bytes.is_empty() {
            // Whole rows only, as the codec lays them out.
            let cols = rng.random_range(1..=bytes.len());
            let codes: Vec<i8> = bytes[..bytes.len() / cols * cols].iter().map(|&b| b as i8).collect();
            if delta_decode(&delta_encode(&codes, cols), cols).as_deref() != Ok(&codes[..]) {
                bad += 1;
            }
        }
    }
    outcome(bad == 0, format!("{bad} failures over 10^6 strings"))
}

fn compression_ratio() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let profile = LayerCompressProfile::default_for(80);
    let (mut full, mut n) = (0.0, 0.0);
    for layer in 0..80 {
        for _ in 0..16 {
            let b = correlated_block(&mut rng, 4, 512, profile.ratio(layer));
            full += compress(&b, Scheme::Int8DeltaRle).ratio();
            n += 1.0;
        }
    }
    let full = full / n;
    let (mut int8, mut m) = (0.0, 0.0);
    for _ in 0..2_000 {
        let b = mixed_block(&mut rng, 64, 1024);
        let cb = compress(&b, Scheme::Int8);
        if cb.scheme == Scheme::Int8 {
            int8 += cb.payload_ratio();
            m += 1.0;
        }
    }
    let int8 = int8 / m;
    let pass = (full - 3.2).abs() <= 0.15 * 3.2 && (int8 - 2.0).abs() <= 0.02 * 2.0;
    outcome(pass, format!("full pipeline {full:.3}, int8 {int8:.4}"))
}

fn oracle_suite() -> Outcome {
    let checks = validate::run_all();
    let failed: Vec<String> = checks.iter().filter(|c| !c.pass).map(|c| c.name.clone()).collect();
    outcome(failed.is_empty(), format!("{}/{} checks, failed {failed:?}", checks.len() - failed.len(), checks.len()))
}

fn desk_hit_rate() -> Outcome {
    let m = run(&SimConfig::desk()).expect("desk config runs");
    let h = m.hit_rate.unwrap_or(0.0);
    let want = effective_access_latency(h, 285.0, 1850.0);
    let got = m.effective_access_latency_ns.unwrap_or(f64::NAN);
    let rel = (got - want).abs() / want;
    let pass = (0.93..=0.97).contains(&h) && rel <= 0.02 && m.tokens_committed == 50_000;
    outcome(pass, format!("hit {h:.4}, latency {got:.2} ns vs {want:.2} ns ({:.2}%)", rel * 100.0))
}

fn ablation_shape() -> Outcome {
    let rows = sweep_k(&SimConfig::desk(), &[1, 2, 4, 8, 16]).expect("sweep runs");
    let hit: Vec<f64> = rows.iter().map(|r| r.hit_rate.unwrap_or(0.0)).collect();
    let prec: Vec<f64> = rows.iter().map(|r| r.precision.unwrap_or(0.0)).collect();
    let tp: Vec<f64> = rows.iter().map(|r| r.throughput_tokens_per_s.unwrap_or(0.0)).collect();
    let hit_up = hit.windows(2).all(|w| w[1] >= w[0]);
    let prec_down = prec.windows(2).all(|w| w[1] <= w[0]);
    let (g24, g48) = (tp[2] - tp[1], tp[3] - tp[2]);
    let pass = hit_up && prec_down && g48 < 2.0 * g24;
    let f = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(",");
    outcome(
        pass,
        format!("hit [{}], precision [{}], gain 2->4 {g24:.0}, 4->8 {g48:.0} tok/s", f(&hit), f(&prec)),
    )
}

fn engine_scaling() -> Outcome {
    let rows = sweep_engines(&LatencyParams::default(), 0, &[1, 2, 3, 4]);
    let want = [412.0, 798.0, 1156.0, 1487.0];
    let within = rows.iter().zip(want).all(|(r, w)| (r.throughput_gbps - w).abs() <= 0.05 * w);
    let capped = rows.iter().all(|r| r.throughput_gbps <= B_HBM_GBPS);
    let got: Vec<String> = rows.iter().map(|r| format!("{:.0}", r.throughput_gbps)).collect();
    outcome(within && capped, format!("GB/s [{}]", got.join(",")))
}

fn stability() -> Outcome {
    let mut bad = SimConfig::desk();
    bad.max_tokens = None;
    bad.duration = 0.05;
    bad.timing.bw_cxl = 2e9;
    bad.throttle.kappa = 0.0;
    let v = run(&bad).expect("violating config runs");

    // Same load with the link sized for a 20% margin against the nominal entry size.
    let kv = kv_bytes_per_token_layer(&bad.geometry) as f64;
    let entry = kv / v.compression_ratio.unwrap_or(1.0);
    let w = &bad.workload;
    let mean_out = f64::from(w.output_len.min + w.output_len.max) / 2.0;
    let lambda = w.rate * mean_out * bad.geometry.layers as f64;
    let k = f64::from(bad.serving.prefetch_depth);
    let mut good = SimConfig::desk();
    good.max_tokens = None;
    good.duration = 0.05;
    good.timing.bw_cxl = lambda * k * entry / (0.8 * 0.95);
    let g = run(&good).expect("margin config runs");

    let slope = v.queue_depth_slope.unwrap_or(0.0);
    let (mean, max) = (g.queue_depth_mean.unwrap_or(0.0), g.queue_depth_max.unwrap_or(f64::INFINITY));
    let pass = slope > 0.0 && v.unstable && !g.unstable && max < 4.0 * mean;
    outcome(
        pass,
        format!(
            "violating: slope {slope:.1}/s unstable={}; margin (bw {:.2e}): max {max:.2} / mean {mean:.2} = {:.2}",
            v.unstable,
            good.timing.bw_cxl,
            max / mean
        ),
    )
}

fn ucb_convergence() -> Outcome {
    let layouts: [&[f64]; 3] = [&[0.5, 0.6, 0.7, 0.8, 0.9], &[0.4, 0.5], &[0.2, 0.3, 0.6]];
    let mut parts = Vec::new();
    let mut pass = true;
    for means in layouts {
        let best = means.len() - 1;
        let fracs: Vec<f64> = (0..10u64)
            .map(|seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
                let mut b = BanditState::new((0..means.len() as u32).collect(), 1.0);
                for _ in 0..10_000 {
                    let arm = b.select();
                    b.record(arm, if rng.random_bool(means[arm]) { 1.0 } else { 0.0 });
                }
                b.fractions()[best]
            })
            .collect();
        let mean = fracs.iter().sum::<f64>() / fracs.len() as f64;
        let min = fracs.iter().copied().fold(1.0, f64::min);
        pass &= mean > 0.8;
        parts.push(format!("{} arms mean {mean:.3} (min {min:.3})", means.len()));
    }
    outcome(pass, parts.join(", "))
}

fn lru_tlb_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut mismatches = 0;
    for trial in 0..200usize {
        let cap = 1 + trial % 24;
        let universe = 2 + (trial as u32 % 9) * 6;
        let mut lru = LruSet::new(cap);
        let mut stack: Vec<u32> = Vec::new();
        for _ in 0..1000 {
            let r = rng.random_range(0..universe);
            let hit = lru.touch(r);
            if !hit {
                lru.insert(r);
            }
            let want = match stack.iter().position(|&x| x == r) {
                Some(i) => {
                    stack.remove(i);
                    true
                }
                None => {
                    if stack.len() == cap {
                        stack.pop();
                    }
                    false
                }
            };
            stack.insert(0, r);
            mismatches += usize::from(hit != want);
        }
    }
    let mut h = Hierarchy::new(MemoryConfig::default());
    h.allocate_range(1, 0, 0..10_000, None).expect("fits");
    for pos in 0..10_000 {
        h.translate(Virt { req: 1, layer: 0, pos }).expect("mapped");
    }
    let tlb = h.tlb().hit_rate();
    outcome(mismatches == 0 && tlb > 0.92, format!("{mismatches} LRU mismatches, TLB hit {tlb:.4}"))
}

fn determinism() -> Outcome {
    let mut same = true;
    let mut small = SimConfig::desk();
    small.max_tokens = Some(10_000);
    for cfg in [SimConfig::desk(), small] {
        let a = run_detailed(&cfg).expect("runs");
        let b = run_detailed(&cfg).expect("runs");
        same &= a.metrics.to_csv() == b.metrics.to_csv() && a.metrics.to_json() == b.metrics.to_json();
    }
    let p = LatencyParams::default();
    same &= sweep_engines(&p, 7, &[1, 2, 3, 4]) == sweep_engines(&p, 7, &[1, 2, 3, 4]);
    outcome(same, "csv and json reports compared".into())
}

/// Name, time budget in seconds, body.
type Criterion = (&'static str, Option<u64>, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: Vec<Criterion> = vec![
        ("codec round trip", Some(30), codec_round_trip),
        ("lossless sub-pipeline", Some(10), lossless_stages),
        ("compression ratio", None, compression_ratio),
        ("formula oracle suite", None, oracle_suite),
        ("desk prefetch hit rate", Some(60), desk_hit_rate),
        ("ablation shape", None, ablation_shape),
        ("engine scaling", None, engine_scaling),
        ("stability", None, stability),
        ("ucb convergence", None, ucb_convergence),
        ("lru/tlb oracles", None, lru_tlb_oracles),
        ("determinism", None, determinism),
    ];
    let mut failed = 0;
    for (i, (name, limit, f)) in criteria.into_iter().enumerate() {
        let o = timed(limit.map(Duration::from_secs), f);
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("{tag} criterion {:>2} {name}: {}", i + 1, o.detail);
        failed += usize::from(!o.pass);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
