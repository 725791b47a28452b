use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeSet, BinaryHeap, VecDeque};

use serde::Serialize;

use super::report::{percentile, slope, SimMetrics};
use super::SimError;
use crate::adapt::{selection_reward, SchemeCandidate, SchemeSelector, ThrottleState};
use crate::codec::synth::{correlated_block, LayerCompressProfile};
use crate::codec::{compress, decompress, reconstruction_quality, Scheme};
use crate::config::{Baseline, CodecChoice, SimConfig};
use crate::memory::{CompressedRef, Hierarchy, MemoryConfig, PageId, Virt};
use crate::model::{kv_bytes_per_token_layer, ModelGeometry};
use crate::prefetch::{
    on_token_commit, pipeline_layers, schedule_prefetch, CommitOutcome, DepthController, DmaController, Link,
    PredictContext, PredictorSpec, PrefetchTarget, TokenId, TokenPredictor, DEFAULT_VOCAB,
};
use crate::seed::{self, stream};
use crate::timing::{layer_time_secs, prefill_layer_time_secs, stability_check, LatencyParams, Stability};
use crate::workload::{read_trace, training_sequence, RequestTrace, TokenProcess, TraceGenerator};

/// Mean distance, in positions, of the sampled history read.
const HISTORY_MEAN_DISTANCE: f64 = 32.0;
/// Writebacks started per drain.
const WRITEBACK_BATCH: usize = 16;
/// Epochs per bandit decision and per selector update.
const BANDIT_EPOCHS: u64 = 64;
const SELECTOR_EPOCHS: u64 = 256;
/// Synthetic blocks measured per layer when choosing a codec.
const CODEC_SAMPLES: usize = 8;
/// Epochs averaged into one queue-depth point; a point spans a few decode
/// iterations so per-layer bursts do not register as growth.
pub const QUEUE_WINDOW_EPOCHS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    PrefillDone,
    Layer(u32),
    Commit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum EventKind {
    TokenStep(Phase),
    DmaComplete,
    Writeback { page: PageId, virt: Virt, version: u32 },
    EpochBoundary,
    RequestArrival(usize),
    RequestComplete(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Event {
    tick: u64,
    ordinal: u64,
    kind: EventKind,
}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.tick, self.ordinal).cmp(&(other.tick, other.ordinal))
    }
}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Per-request timeline. `completion - arrival = compute + stall + wait`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RequestRecord {
    pub id: u64,
    pub arrival_tick: u64,
    pub first_token_tick: Option<u64>,
    pub completion_tick: Option<u64>,
    pub input_len: u32,
    pub output_len: u32,
    pub committed: u32,
    pub compute_ticks: u64,
    pub stall_ticks: u64,
    pub wait_ticks: u64,
}

/// Metrics plus the detail used by invariant checks.
#[derive(Debug, Clone, PartialEq)]
pub struct SimRun {
    pub metrics: SimMetrics,
    pub requests: Vec<RequestRecord>,
    /// `(tick, mean DMA backlog + in flight)` over each epoch.
    pub queue_samples: Vec<(u64, f64)>,
    pub last_arrival_tick: u64,
    /// Codec chosen per layer.
    pub schemes: Vec<Scheme>,
}

struct Req {
    trace: RequestTrace,
    /// Decode step to run next.
    q: u32,
    committed: u32,
    last: u64,
    last_commit: u64,
    compute: u64,
    stall: u64,
    wait: u64,
    first_token: Option<u64>,
    done: Option<u64>,
    /// Candidates for token `q-1`, consumed by the current step.
    cur: Option<Vec<TokenId>>,
    /// Candidates for token `q`, predicted during the current step.
    next: Option<Vec<TokenId>>,
}

impl Req {
    fn new(trace: RequestTrace) -> Self {
        Self {
            last: trace.arrival_tick,
            trace,
            q: 0,
            committed: 0,
            last_commit: 0,
            compute: 0,
            stall: 0,
            wait: 0,
            first_token: None,
            done: None,
            cur: None,
            next: None,
        }
    }

    fn final_step(&self) -> u32 {
        self.trace.input_len + self.trace.output_len - 1
    }

    /// Pages per layer: every position except the last token's.
    fn positions(&self) -> u32 {
        self.trace.total_len() - 1
    }

    fn record(&self) -> RequestRecord {
        RequestRecord {
            id: self.trace.id,
            arrival_tick: self.trace.arrival_tick,
            first_token_tick: self.first_token,
            completion_tick: self.done,
            input_len: self.trace.input_len,
            output_len: self.trace.output_len,
            committed: self.committed,
            compute_ticks: self.compute,
            stall_ticks: self.stall,
            wait_ticks: self.wait,
        }
    }
}

#[derive(Default)]
struct Tally {
    tokens: u64,
    accesses: u64,
    hits: u64,
    covered: u64,
    sync: u64,
    latency_ns: f64,
    token_ticks: Vec<u64>,
    ttft_ticks: Vec<u64>,
    gpu_busy: u64,
    stall: u64,
    sync_bytes: u64,
    gpu_hbm_bytes: f64,
    completed: u64,
    end_tick: u64,
}

/// Counters at the previous epoch boundary.
#[derive(Default)]
struct EpochMarks {
    count: u64,
    busy: f64,
    l1_hits: u64,
    l1_misses: u64,
    window_hits: u64,
    window_accesses: u64,
    window_launched: u64,
    window_tokens: u64,
}

struct Engine<'a> {
    cfg: &'a SimConfig,
    p: LatencyParams,
    geom: ModelGeometry,
    layers: u32,
    tiered: bool,
    speculative: bool,
    now: u64,
    heap: BinaryHeap<Reverse<Event>>,
    ordinal: u64,
    hier: Hierarchy,
    dma: DmaController,
    down: Link,
    up: Link,
    predictor: Option<Box<dyn TokenPredictor>>,
    depth: DepthController,
    throttle: ThrottleState,
    selector: SchemeSelector,
    candidates: Vec<Vec<SchemeCandidate>>,
    schemes: Vec<Scheme>,
    bytes: Vec<u64>,
    reqs: Vec<Req>,
    next_arrival: usize,
    pending: VecDeque<usize>,
    batch: Vec<usize>,
    members: Vec<usize>,
    gpu_busy: bool,
    iter_start: u64,
    dma_ticks: BTreeSet<u64>,
    epoch_on: bool,
    marks: EpochMarks,
    /// Integral of DMA queue depth over ticks since the last epoch.
    q_area: f64,
    q_last: u64,
    q_epoch_start: u64,
    samples: Vec<(u64, f64)>,
    t: Tally,
}

fn cycles(secs: f64, f_clk: f64) -> u64 {
    (secs * f_clk).ceil() as u64
}

/// Measured ratio, quality and latency of every scheme per layer.
fn codec_candidates(cfg: &SimConfig) -> Vec<Vec<SchemeCandidate>> {
    let layers = cfg.geometry.layers as usize;
    let profile = LayerCompressProfile::default_for(layers);
    let p = &cfg.timing;
    (0..layers)
        .map(|l| {
            let mut rng = seed::rng_for(cfg.seed, &[stream::CODEC, l as u64]);
            let blocks: Vec<_> = (0..CODEC_SAMPLES)
                .map(|_| correlated_block(&mut rng, 4, 512, profile.ratio(l)))
                .collect();
            Scheme::ALL
                .iter()
                .map(|&scheme| {
                    let (mut orig, mut stored, mut quality) = (0usize, 0usize, 0.0);
                    for b in &blocks {
                        let cb = compress(b, scheme);
                        orig += cb.original_bytes();
                        stored += cb.stored_bytes();
                        let back = decompress(&cb).expect("own output decodes");
                        quality += reconstruction_quality(b, &back);
                    }
                    let crit = p.l_crit_decomp as f64;
                    let latency = match scheme {
                        Scheme::Raw => p.l_bypass as f64,
                        Scheme::Int8 => 0.6 * crit,
                        Scheme::Int8Delta => 0.8 * crit,
                        Scheme::Int8DeltaRle => crit,
                    };
                    SchemeCandidate {
                        scheme,
                        ratio: orig as f64 / stored as f64,
                        quality: quality / blocks.len() as f64,
                        latency,
                    }
                })
                .collect()
        })
        .collect()
}

/// Arrivals for the run, in arrival order.
fn build_trace(cfg: &SimConfig, process: &TokenProcess) -> Result<Vec<RequestTrace>, SimError> {
    if let Some(path) = &cfg.trace_file {
        let text = std::fs::read_to_string(path).map_err(|e| SimError::Trace {
            path: path.clone(),
            msg: e.to_string(),
        })?;
        return read_trace(&text).map_err(|e| SimError::Trace {
            path: path.clone(),
            msg: e.to_string(),
        });
    }
    let gen = TraceGenerator::new(cfg.workload.clone(), process.clone(), cfg.seed, cfg.timing.f_clk)?;
    let mut out = Vec::new();
    match cfg.max_tokens {
        Some(budget) => {
            let mut total = 0u64;
            for (_, mut r) in gen {
                let left = budget - total;
                if u64::from(r.output_len) >= left {
                    r.output_len = left as u32;
                    r.tokens.truncate((r.input_len + r.output_len) as usize);
                    out.push(r);
                    break;
                }
                total += u64::from(r.output_len);
                out.push(r);
            }
        }
        None => {
            out.extend(gen.take_while(|(t, _)| *t <= cfg.duration).map(|(_, r)| r));
        }
    }
    Ok(out)
}

impl<'a> Engine<'a> {
    fn new(cfg: &'a SimConfig, trace: Vec<RequestTrace>, process: &TokenProcess) -> Result<Self, SimError> {
        let p = cfg.timing.clone();
        let geom = cfg.geometry;
        let tiered = cfg.baseline != Baseline::GpuOnly;
        let speculative = cfg.baseline == Baseline::SpecKv;
        let mut mem: MemoryConfig = cfg.memory_config();
        if !tiered {
            mem.l3_capacity = mem.l1_capacity;
        }
        let candidates = codec_candidates(cfg);
        let selector = SchemeSelector::new(cfg.selector_weights, cfg.selector_q_min);
        let mut e = Engine {
            p,
            geom,
            layers: geom.layers as u32,
            tiered,
            speculative,
            now: 0,
            heap: BinaryHeap::new(),
            ordinal: 0,
            hier: Hierarchy::new(mem),
            dma: DmaController::new(cfg.timing.omega_max, cfg.timing.l_dma),
            down: Link::new(cfg.timing.bw_cxl / cfg.timing.f_clk),
            up: Link::new(cfg.timing.bw_cxl / cfg.timing.f_clk),
            predictor: None,
            depth: DepthController::new(cfg.serving.prefetch_depth, cfg.adaptive_depth, cfg.beta_ucb),
            throttle: cfg.throttle.clone(),
            selector,
            candidates,
            schemes: Vec::new(),
            bytes: Vec::new(),
            reqs: Vec::with_capacity(trace.len()),
            next_arrival: 0,
            pending: VecDeque::new(),
            batch: Vec::new(),
            members: Vec::new(),
            gpu_busy: false,
            iter_start: 0,
            dma_ticks: BTreeSet::new(),
            epoch_on: false,
            marks: EpochMarks::default(),
            q_area: 0.0,
            q_last: 0,
            q_epoch_start: 0,
            samples: Vec::new(),
            t: Tally::default(),
            cfg,
        };
        e.choose_codecs();
        if speculative {
            let training = match cfg.predictor {
                PredictorSpec::Markov { .. } => training_sequence(process),
                _ => Vec::new(),
            };
            e.predictor = Some(cfg.predictor.build(process.vocab, cfg.seed, &training));
        }
        let home = if tiered {
            cfg.serving.l3_capacity
        } else {
            cfg.serving.l1_capacity
        };
        let mut prev = 0;
        for r in &trace {
            let bad = |msg: String| SimError::Infeasible { id: r.id, msg };
            if r.input_len == 0 || r.output_len == 0 {
                return Err(bad("needs at least one input and one output token".into()));
            }
            if u64::from(r.total_len()) > geom.max_seq {
                return Err(bad(format!("{} tokens exceed model.max_seq {}", r.total_len(), geom.max_seq)));
            }
            if r.tokens.iter().any(|&t| t >= DEFAULT_VOCAB) {
                return Err(bad(format!("token ids must be below {DEFAULT_VOCAB}")));
            }
            if r.arrival_tick < prev {
                return Err(bad("arrivals out of order".into()));
            }
            prev = r.arrival_tick;
            let need: u64 = (0..e.layers).map(|l| e.stored_bytes(l)).sum::<u64>() * u64::from(r.total_len() - 1);
            if need > home {
                return Err(bad(format!("needs {need} B of pages, capacity is {home} B")));
            }
        }
        e.reqs = trace.into_iter().map(Req::new).collect();
        Ok(e)
    }

    fn choose_codecs(&mut self) {
        self.schemes = self
            .candidates
            .iter()
            .map(|c| match self.cfg.codec {
                CodecChoice::Fixed(s) => s,
                CodecChoice::Auto => self.selector.select(c).unwrap_or(Scheme::Raw),
            })
            .collect();
        let kv = kv_bytes_per_token_layer(&self.geom);
        self.bytes = self
            .schemes
            .iter()
            .zip(&self.candidates)
            .map(|(&s, cands)| {
                let ratio = cands.iter().find(|c| c.scheme == s).map_or(1.0, |c| c.ratio);
                if s == Scheme::Raw || !self.tiered {
                    kv
                } else {
                    (kv as f64 / ratio).ceil() as u64
                }
            })
            .collect();
    }

    fn compressed_ref(&self, layer: u32) -> Option<CompressedRef> {
        let s = self.schemes[layer as usize];
        (self.tiered && s != Scheme::Raw).then(|| CompressedRef {
            scheme: s,
            stored_bytes: self.bytes[layer as usize],
        })
    }

    fn stored_bytes(&self, layer: u32) -> u64 {
        self.compressed_ref(layer)
            .map_or(self.cfg.serving.page_size, |c| c.stored_bytes)
    }

    fn push(&mut self, tick: u64, kind: EventKind) {
        debug_assert!(tick >= self.now, "event scheduled in the past");
        let ev = Event {
            tick,
            ordinal: self.ordinal,
            kind,
        };
        self.ordinal += 1;
        self.heap.push(Reverse(ev));
    }

    fn run(&mut self) {
        self.schedule_next_arrival();
        while let Some(Reverse(ev)) = self.heap.pop() {
            self.now = ev.tick;
            match ev.kind {
                EventKind::RequestArrival(i) => self.on_arrival(i),
                EventKind::TokenStep(Phase::PrefillDone) => self.on_prefill_done(),
                EventKind::TokenStep(Phase::Layer(l)) => self.on_layer(l),
                EventKind::TokenStep(Phase::Commit) => self.on_commit(),
                EventKind::DmaComplete => {
                    self.dma_ticks.remove(&ev.tick);
                    self.advance_dma();
                }
                EventKind::Writeback { page, virt, version } => {
                    if self.hier.page(page).is_some_and(|p| p.virt == virt) {
                        self.hier.complete_writeback(page, version);
                    }
                    self.drain_writebacks();
                }
                EventKind::EpochBoundary => self.on_epoch(),
                EventKind::RequestComplete(i) => self.on_complete(i),
            }
            let more_now = self.heap.peek().is_some_and(|r| r.0.tick == self.now);
            if !self.gpu_busy && !more_now {
                self.try_start();
            }
        }
    }

    fn schedule_next_arrival(&mut self) {
        if let Some(r) = self.reqs.get(self.next_arrival) {
            let tick = r.trace.arrival_tick.max(self.now);
            let i = self.next_arrival;
            self.next_arrival += 1;
            self.push(tick, EventKind::RequestArrival(i));
        }
    }

    fn on_arrival(&mut self, i: usize) {
        self.reqs[i].last = self.now;
        self.pending.push_back(i);
        self.schedule_next_arrival();
        self.ensure_epoch();
    }

    fn busy(&self) -> bool {
        self.gpu_busy || !self.pending.is_empty() || !self.batch.is_empty() || !self.dma.is_drained()
    }

    fn ensure_epoch(&mut self) {
        if !self.epoch_on {
            self.epoch_on = true;
            self.note_queue();
            self.q_area = 0.0;
            self.q_epoch_start = self.now;
            let e = self.cfg.epoch_ticks;
            self.push((self.now / e + 1) * e, EventKind::EpochBoundary);
        }
    }

    fn allocate(&mut self, i: usize) -> bool {
        let id = self.reqs[i].trace.id;
        let n = self.reqs[i].positions();
        for l in 0..self.layers {
            let c = self.compressed_ref(l);
            if self.hier.allocate_range(id, l, 0..n, c).is_err() {
                self.hier.free_request(id);
                return false;
            }
        }
        true
    }

    fn try_start(&mut self) {
        let cap = self.cfg.serving.batch_size as usize;
        let mut admitted = Vec::new();
        while self.batch.len() < cap {
            let Some(&i) = self.pending.front() else { break };
            if !self.allocate(i) {
                break;
            }
            self.pending.pop_front();
            self.batch.push(i);
            admitted.push(i);
        }
        if !admitted.is_empty() {
            self.start_prefill(admitted);
        } else if !self.batch.is_empty() {
            self.start_decode();
        }
    }

    fn start_prefill(&mut self, members: Vec<usize>) {
        let s = self.now;
        let kv = kv_bytes_per_token_layer(&self.geom) as f64;
        let d = self.geom.hidden_dim as f64;
        let mut dur = 0;
        for &i in &members {
            let id = self.reqs[i].trace.id;
            let n = self.reqs[i].trace.input_len;
            let per_layer = cycles(prefill_layer_time_secs(&self.geom, n as usize, &self.p), self.p.f_clk);
            dur += per_layer * u64::from(self.layers);
            self.t.gpu_hbm_bytes += f64::from(self.layers) * (12.0 * d * d + f64::from(n) * kv);
            if self.tiered {
                for l in 0..self.layers {
                    for pos in 0..n {
                        self.write_kv(Virt { req: id, layer: l, pos }, s);
                    }
                }
            }
        }
        for &i in &members {
            let r = &mut self.reqs[i];
            r.wait += s - r.last;
            r.compute += dur;
        }
        self.members = members;
        self.gpu_busy = true;
        self.iter_start = s;
        self.push(s + dur, EventKind::TokenStep(Phase::PrefillDone));
    }

    fn on_prefill_done(&mut self) {
        let now = self.now;
        self.t.gpu_busy += now - self.iter_start;
        for m in std::mem::take(&mut self.members) {
            let r = &mut self.reqs[m];
            r.last = now;
            r.last_commit = now;
            r.first_token = Some(now);
            r.committed = 1;
            r.q = r.trace.input_len + 1;
            self.t.tokens += 1;
            self.t.ttft_ticks.push(now - r.trace.arrival_tick);
            if r.trace.output_len == 1 {
                self.finish(m);
            }
        }
        self.hier.set_token_clock(self.t.tokens);
        self.gpu_busy = false;
        self.drain_writebacks();
    }

    fn start_decode(&mut self) {
        let s = self.now;
        for &i in &self.batch {
            let r = &mut self.reqs[i];
            r.wait += s - r.last;
        }
        self.members = self.batch.clone();
        self.gpu_busy = true;
        self.iter_start = s;
        self.push(s, EventKind::TokenStep(Phase::Layer(0)));
    }

    fn write_kv(&mut self, v: Virt, tick: u64) {
        let Some(page) = self.hier.page_of(v) else { return };
        if let Ok(mv) = self.hier.write_new_kv(page, tick) {
            if mv.writeback_bytes > 0 {
                self.up.reserve(tick, mv.writeback_bytes);
            }
        }
    }

    /// Stall ticks for request `i`'s demand access at layer `l`.
    fn resolve(&mut self, i: usize, l: u32) -> u64 {
        let now = self.now;
        let r = &self.reqs[i];
        let pos = r.q - 1;
        let actual = r.trace.tokens[pos as usize];
        let first = r.q == r.trace.input_len + 1;
        if !self.tiered || first {
            return 0;
        }
        let id = r.trace.id;
        let covered = r.cur.as_ref().is_some_and(|c| c.contains(&actual));
        let Some(page) = self.hier.page_of(Virt { req: id, layer: l, pos }) else {
            return 0;
        };
        let outcome = if self.speculative {
            on_token_commit(&mut self.hier, page, actual)
        } else {
            CommitOutcome::Miss
        };
        let (stall, ns, hit) = match outcome {
            CommitOutcome::Local => return 0,
            CommitOutcome::Hit { ready_tick } => {
                let wait = ready_tick.saturating_sub(now);
                (wait, self.p.prefetch_hit_ns + self.p.cycles_to_ns(wait), true)
            }
            CommitOutcome::Miss => {
                let bytes = self.bytes[l as usize];
                let start = self.down.reserve(now, bytes);
                self.t.sync += 1;
                self.t.sync_bytes += bytes;
                let done = start + self.p.sync_miss_cycles();
                (done - now, self.p.sync_miss_ns + self.p.cycles_to_ns(start - now), false)
            }
        };
        self.t.accesses += 1;
        self.t.hits += u64::from(hit);
        self.t.covered += u64::from(covered);
        self.t.latency_ns += ns;
        if self.speculative {
            self.depth.record(id, hit);
        }
        stall
    }

    /// One recency-weighted read of older context; streamed, never stalls.
    fn history_read(&mut self, i: usize, l: u32) {
        let r = &self.reqs[i];
        if r.q < 2 {
            return;
        }
        let newest = r.q - 2;
        let h = seed::derive(self.cfg.seed, &[stream::HISTORY, r.trace.id, u64::from(l), u64::from(r.q)]);
        let u = (h >> 11) as f64 / (1u64 << 53) as f64;
        let dist = (-HISTORY_MEAN_DISTANCE * (1.0 - u).ln()).floor() as u32;
        let pos = newest - dist.min(newest);
        let v = Virt {
            req: r.trace.id,
            layer: l,
            pos,
        };
        let Some(page) = self.hier.page_of(v) else { return };
        if let Ok(tier) = self.hier.lookup(page, self.now) {
            if tier != crate::memory::Tier::L1 {
                let bytes = self.stored_bytes(l);
                self.down.reserve(self.now, bytes);
            }
        }
    }

    fn predict(&mut self, i: usize) {
        let r = &self.reqs[i];
        let q = r.q;
        if q >= r.final_step() {
            return;
        }
        let id = r.trace.id;
        let k = self.depth.depth_for(id);
        let keep = self.throttle.effective_depth(k) as usize;
        let hist_from = (q as usize).saturating_sub(self.cfg.serving.history_len);
        let ctx = PredictContext {
            req: id,
            pos: q,
            history: &r.trace.tokens[hist_from..q as usize],
            truth: r.trace.tokens[q as usize],
        };
        let Some(pred) = self.predictor.as_mut() else { return };
        let mut out = pred.predict(&ctx, k as usize).candidates;
        out.truncate(keep);
        self.reqs[i].next = Some(out);
    }

    fn issue_prefetches(&mut self, i: usize, l: u32) {
        let issue = self.now + self.p.l_pred + self.p.l_atu;
        let r = &self.reqs[i];
        let id = r.trace.id;
        let mut targets = Vec::with_capacity(2);
        for item in pipeline_layers(l, self.layers) {
            let (pos, tokens) = if item.next_token {
                (r.q, r.next.as_ref())
            } else {
                (r.q - 1, r.cur.as_ref())
            };
            if let Some(tokens) = tokens {
                targets.push(PrefetchTarget {
                    req: id,
                    layer: item.layer,
                    pos,
                    tokens: tokens.clone(),
                    bytes: self.bytes[item.layer as usize],
                });
            }
        }
        self.note_queue();
        for t in targets {
            schedule_prefetch(&t, issue, &mut self.hier, &mut self.dma, &mut self.down);
        }
    }

    fn on_layer(&mut self, l: u32) {
        let now = self.now;
        self.advance_dma();
        let members = std::mem::take(&mut self.members);
        let mut max_stall = 0;
        for &i in &members {
            max_stall = max_stall.max(self.resolve(i, l));
        }
        let contexts: Vec<usize> = members.iter().map(|&i| self.reqs[i].q as usize).collect();
        let compute = cycles(layer_time_secs(&self.geom, &contexts, &self.p), self.p.f_clk);
        let kv = kv_bytes_per_token_layer(&self.geom) as f64;
        let d = self.geom.hidden_dim as f64;
        self.t.gpu_hbm_bytes += 12.0 * d * d + contexts.iter().map(|&c| c as f64 * kv).sum::<f64>();
        self.t.stall += max_stall;
        for &i in &members {
            let r = &mut self.reqs[i];
            r.stall += max_stall;
            r.compute += compute;
        }
        if self.tiered {
            for &i in &members {
                let r = &self.reqs[i];
                let v = Virt {
                    req: r.trace.id,
                    layer: l,
                    pos: r.q - 1,
                };
                self.write_kv(v, now);
                self.history_read(i, l);
            }
        }
        if self.speculative {
            for &i in &members {
                if l == 0 {
                    self.predict(i);
                }
                self.issue_prefetches(i, l);
            }
        }
        self.members = members;
        self.drain_writebacks();
        self.sync_dma_events();
        let next = if l + 1 < self.layers {
            Phase::Layer(l + 1)
        } else {
            Phase::Commit
        };
        self.push(now + max_stall + compute, EventKind::TokenStep(next));
    }

    fn on_commit(&mut self) {
        let now = self.now;
        self.t.gpu_busy += now - self.iter_start;
        for m in std::mem::take(&mut self.members) {
            let r = &mut self.reqs[m];
            r.committed += 1;
            self.t.tokens += 1;
            self.t.token_ticks.push(now - r.last_commit);
            r.last_commit = now;
            r.last = now;
            r.cur = r.next.take();
            r.q += 1;
            if r.committed == r.trace.output_len {
                self.finish(m);
            }
        }
        self.hier.set_token_clock(self.t.tokens);
        self.gpu_busy = false;
        self.advance_dma();
        self.drain_writebacks();
    }

    fn finish(&mut self, i: usize) {
        self.reqs[i].done = Some(self.now);
        self.batch.retain(|&b| b != i);
        self.push(self.now, EventKind::RequestComplete(i));
    }

    fn on_complete(&mut self, i: usize) {
        let id = self.reqs[i].trace.id;
        self.note_queue();
        self.dma.release_request(id);
        self.hier.free_request(id);
        self.depth.forget(id);
        self.t.completed += 1;
        self.t.end_tick = self.t.end_tick.max(self.now);
        self.sync_dma_events();
    }

    /// Accumulates queue depth up to now; call before touching the DMA state.
    fn note_queue(&mut self) {
        let depth = (self.dma.queued() + self.dma.in_flight()) as f64;
        self.q_area += depth * (self.now - self.q_last) as f64;
        self.q_last = self.now;
    }

    fn advance_dma(&mut self) {
        self.note_queue();
        self.dma.advance(self.now, &mut self.down, &mut self.hier);
        self.sync_dma_events();
    }

    fn sync_dma_events(&mut self) {
        if let Some(t) = self.dma.next_completion() {
            let t = t.max(self.now);
            if self.dma_ticks.insert(t) {
                self.push(t, EventKind::DmaComplete);
            }
        }
    }

    fn drain_writebacks(&mut self) {
        if !self.tiered || self.dma.queued() > 0 || !self.up.is_idle_at(self.now) {
            return;
        }
        for (page, version, bytes) in self.hier.take_writebacks(WRITEBACK_BATCH) {
            let Some(virt) = self.hier.page(page).map(|p| p.virt) else { continue };
            let start = self.up.reserve(self.now, bytes);
            let end = start + self.up.transfer_cycles(bytes).ceil() as u64;
            self.push(end, EventKind::Writeback { page, virt, version });
        }
    }

    fn on_epoch(&mut self) {
        let e = self.cfg.epoch_ticks;
        let busy = self.down.busy_cycles();
        let u = ((busy - self.marks.busy) / e as f64).clamp(0.0, 1.0);
        self.marks.busy = busy;
        self.throttle.update(u);
        if self.tiered {
            let (h, m) = (self.hier.stats.l1_hits, self.hier.stats.l1_misses);
            let (dh, dm) = (h - self.marks.l1_hits, m - self.marks.l1_misses);
            self.marks.l1_hits = h;
            self.marks.l1_misses = m;
            let miss = (dh + dm > 0).then(|| dm as f64 / (dh + dm) as f64);
            let rep = self.hier.end_epoch(miss);
            if rep.movement.fill_bytes > 0 {
                self.down.reserve(self.now, rep.movement.fill_bytes);
            }
            if rep.movement.writeback_bytes > 0 {
                self.up.reserve(self.now, rep.movement.writeback_bytes);
            }
        }
        self.note_queue();
        let span = self.now - self.q_epoch_start;
        if span > 0 {
            self.samples.push((self.now, self.q_area / span as f64));
        }
        self.q_area = 0.0;
        self.q_epoch_start = self.now;
        self.marks.count += 1;
        if self.cfg.adaptive_depth && self.marks.count.is_multiple_of(BANDIT_EPOCHS) {
            let acc = self.t.accesses - self.marks.window_accesses;
            if acc > 0 {
                let hits = self.t.hits - self.marks.window_hits;
                let launched = self.dma.launched - self.marks.window_launched;
                let h = hits as f64 / acc as f64;
                let precision = if launched > 0 { (hits as f64 / launched as f64).min(1.0) } else { 1.0 };
                self.depth.adapt_depth(h * (0.5 + 0.5 * precision));
            }
            self.marks.window_hits = self.t.hits;
            self.marks.window_accesses = self.t.accesses;
            self.marks.window_launched = self.dma.launched;
        }
        if self.cfg.selector_learn && self.marks.count.is_multiple_of(SELECTOR_EPOCHS) {
            let tokens = self.t.tokens - self.marks.window_tokens;
            self.marks.window_tokens = self.t.tokens;
            let secs = (SELECTOR_EPOCHS * e) as f64 / self.p.f_clk;
            let q = self.mean_quality();
            let reward = selection_reward(tokens as f64 / secs / 1e6, q, self.cfg.selector_q_min, 1.0);
            self.selector.weight_update(reward);
            self.choose_codecs();
        }
        if self.busy() {
            self.push(self.now + e, EventKind::EpochBoundary);
        } else {
            self.epoch_on = false;
        }
    }

    fn mean_quality(&self) -> f64 {
        let q: f64 = self
            .schemes
            .iter()
            .zip(&self.candidates)
            .map(|(&s, c)| c.iter().find(|x| x.scheme == s).map_or(1.0, |x| x.quality))
            .sum();
        q / self.schemes.len().max(1) as f64
    }

    fn nominal_accuracy(&self, measured: Option<f64>) -> f64 {
        match self.cfg.predictor {
            PredictorSpec::Oracle { accuracy, .. } => accuracy,
            PredictorSpec::Replay { corruption } => 1.0 - corruption,
            PredictorSpec::Markov { .. } => measured.unwrap_or(0.0),
        }
    }

    fn finish_run(self) -> SimRun {
        let t = &self.t;
        let f = self.p.f_clk;
        let ratio = |a: u64, b: u64| (b > 0).then(|| a as f64 / b as f64);
        let end = t.end_tick;
        let secs = end as f64 / f;
        let span = (end > 0).then_some(secs);
        let util = |x: f64| span.map(|s| (x / s).clamp(0.0, 1.0));
        let mut lat: Vec<f64> = t.token_ticks.iter().map(|&x| x as f64 / f * 1e3).collect();
        lat.sort_by(f64::total_cmp);
        let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        let ttft: Vec<f64> = t.ttft_ticks.iter().map(|&x| x as f64 / f * 1e3).collect();
        let hit_rate = ratio(t.hits, t.accesses);
        let last_arrival = self.reqs.last().map_or(0, |r| r.trace.arrival_tick);
        let in_arrivals: Vec<(u64, f64)> = self
            .samples
            .iter()
            .copied()
            .filter(|&(tick, _)| tick <= last_arrival)
            .collect();
        let window: Vec<(f64, f64)> = in_arrivals
            .chunks_exact(QUEUE_WINDOW_EPOCHS)
            .map(|c| {
                let n = c.len() as f64;
                (c.iter().map(|x| x.0 as f64 / f).sum::<f64>() / n, c.iter().map(|x| x.1).sum::<f64>() / n)
            })
            .collect();
        let depths: Vec<f64> = window.iter().map(|&(_, d)| d).collect();
        let tiered = self.tiered;
        let mean_bytes = self.bytes.iter().sum::<u64>() as f64 / self.bytes.len().max(1) as f64;
        let unstable = self.speculative && {
            let w = &self.cfg.workload;
            let mean_out = if self.reqs.is_empty() {
                f64::from(w.output_len.min + w.output_len.max) / 2.0
            } else {
                self.reqs.iter().map(|r| f64::from(r.trace.output_len)).sum::<f64>() / self.reqs.len() as f64
            };
            let lambda = w.rate * mean_out * f64::from(self.layers);
            let h = self.nominal_accuracy(hit_rate);
            let k = f64::from(self.cfg.serving.prefetch_depth);
            stability_check(lambda, k, mean_bytes, self.p.bw_cxl, h) == Stability::Unstable
        };
        let tlb = self.hier.tlb();
        let st = &self.hier.stats;
        let metrics = SimMetrics {
            hit_rate,
            coverage: ratio(t.covered, t.accesses),
            precision: ratio(t.hits, self.dma.launched),
            latency_avg_ms: mean(&lat),
            latency_p50_ms: percentile(&lat, 0.50),
            latency_p95_ms: percentile(&lat, 0.95),
            latency_p99_ms: percentile(&lat, 0.99),
            ttft_ms: mean(&ttft),
            throughput_tokens_per_s: (t.gpu_busy > 0).then(|| t.tokens as f64 / (t.gpu_busy as f64 / f)),
            util_cxl: util(self.down.busy_cycles() / f),
            util_fpga_hbm: util((self.dma.launched_bytes + t.sync_bytes) as f64 / self.p.bw_hbm),
            util_gpu_hbm: util(t.gpu_hbm_bytes / self.p.bw_gpu_hbm),
            effective_access_latency_ns: (t.accesses > 0).then(|| t.latency_ns / t.accesses as f64),
            tokens_committed: t.tokens,
            sync_fallbacks: t.sync,
            requests_completed: t.completed,
            accesses: t.accesses,
            prefetch_hits: t.hits,
            prefetches_launched: self.dma.launched,
            sim_ticks: end,
            gpu_busy_ticks: t.gpu_busy,
            stall_ticks: t.stall,
            compression_ratio: tiered.then(|| {
                let kv = kv_bytes_per_token_layer(&self.geom) as f64;
                kv / mean_bytes
            }),
            tlb_hit_rate: ratio(tlb.hits, tlb.hits + tlb.misses),
            l1_hit_rate: ratio(st.l1_hits, st.l1_hits + st.l1_misses),
            writebacks: st.writebacks,
            forced_writebacks: st.forced_writebacks,
            promotions: st.promotions,
            demotions: st.demotions,
            queue_depth_mean: mean(&depths),
            queue_depth_max: depths.iter().copied().reduce(f64::max),
            queue_depth_slope: slope(&window),
            throttle_beta: self.throttle.beta,
            prefetch_depth: u64::from(self.depth.k),
            unstable,
        };
        SimRun {
            metrics,
            requests: self.reqs.iter().map(Req::record).collect(),
            queue_samples: self.samples,
            last_arrival_tick: last_arrival,
            schemes: self.schemes,
        }
    }
}

fn token_process(cfg: &SimConfig) -> TokenProcess {
    TokenProcess::calibrated(cfg.workload.accuracy, cfg.seed)
}

/// Runs `cfg` on an explicit trace.
pub fn run_trace(cfg: &SimConfig, trace: Vec<RequestTrace>) -> Result<SimRun, SimError> {
    cfg.validate()?;
    let process = token_process(cfg);
    let mut e = Engine::new(cfg, trace, &process)?;
    e.run();
    Ok(e.finish_run())
}

pub fn run_detailed(cfg: &SimConfig) -> Result<SimRun, SimError> {
    cfg.validate()?;
    let process = token_process(cfg);
    let trace = build_trace(cfg, &process)?;
    let mut e = Engine::new(cfg, trace, &process)?;
    e.run();
    Ok(e.finish_run())
}

/// The request trace `run` would simulate for `cfg`.
pub fn trace_for(cfg: &SimConfig) -> Result<Vec<RequestTrace>, SimError> {
    cfg.validate()?;
    build_trace(cfg, &token_process(cfg))
}

/// Deterministic for a given config, seed included.
pub fn run(cfg: &SimConfig) -> Result<SimMetrics, SimError> {
    run_detailed(cfg).map(|r| r.metrics)
}
