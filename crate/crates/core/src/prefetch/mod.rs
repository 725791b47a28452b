//! Speculative prefetch: predictors, the DMA window over the CXL link,
//! scheduling, access resolution and depth control.

mod predictor;

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};

use serde::Serialize;

pub use predictor::{
    MarkovOrderN, OracleNoisy, PredictContext, PredictorOutput, PredictorSpec, Replay, TokenId, TokenPredictor,
    DEFAULT_VOCAB, HISTORY_LEN, ORACLE_REFERENCE_DEPTH,
};

use crate::adapt::BanditState;
use crate::memory::{Hierarchy, MemError, PageId, SpecKey, Tier, Virt};

/// One direction of the CXL link, modeled as a serial resource.
#[derive(Debug, Clone)]
pub struct Link {
    bytes_per_cycle: f64,
    free_at: f64,
    pub bytes: u64,
    pub transfers: u64,
    busy: f64,
}

impl Link {
    pub fn new(bytes_per_cycle: f64) -> Self {
        assert!(bytes_per_cycle > 0.0, "link bandwidth must be positive");
        Self {
            bytes_per_cycle,
            free_at: 0.0,
            bytes: 0,
            transfers: 0,
            busy: 0.0,
        }
    }

    pub fn bytes_per_cycle(&self) -> f64 {
        self.bytes_per_cycle
    }

    pub fn transfer_cycles(&self, bytes: u64) -> f64 {
        bytes as f64 / self.bytes_per_cycle
    }

    /// Earliest tick a new transfer could start.
    pub fn free_tick(&self) -> u64 {
        self.free_at.ceil() as u64
    }

    pub fn is_idle_at(&self, tick: u64) -> bool {
        self.free_at <= tick as f64
    }

    /// Books `bytes` no earlier than `ready`; returns the start tick.
    pub fn reserve(&mut self, ready: u64, bytes: u64) -> u64 {
        let start = self.free_at.max(ready as f64).ceil();
        let xfer = self.transfer_cycles(bytes);
        self.free_at = start + xfer;
        self.bytes += bytes;
        self.transfers += 1;
        self.busy += xfer;
        start as u64
    }

    /// Total booked transfer time in cycles.
    pub fn busy_cycles(&self) -> f64 {
        self.busy
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestState {
    Queued,
    InFlight,
    Ready,
    Invalidated,
    Consumed,
}

/// One speculative fetch of a page variant.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrefetchRequest {
    pub virt: Virt,
    pub page: PageId,
    pub token: TokenId,
    /// Tick the transfer starts on the link.
    pub issue_tick: u64,
    pub complete_tick: u64,
    pub state: RequestState,
    pub dma_slot: Option<usize>,
    /// Page version the copy reflects.
    pub version: u32,
    pub bytes: u64,
    /// Tick the request was handed to the controller.
    pub submit_tick: u64,
}

impl PrefetchRequest {
    pub fn key(&self) -> SpecKey {
        SpecKey {
            page: self.page,
            token: self.token,
        }
    }
}

/// Bounded window of outstanding DMAs over the downstream link, with a FIFO
/// backlog behind it. Queued requests are never cancelled.
///
/// A launched transfer starts at `max(now, link free)` and completes
/// `L_DMA` cycles later; the link spaces starts by transfer time.
#[derive(Debug, Clone)]
pub struct DmaController {
    omega: usize,
    l_dma: u64,
    slots: Vec<Option<PrefetchRequest>>,
    /// Slots whose request was released while on the wire.
    orphaned: Vec<bool>,
    backlog: VecDeque<PrefetchRequest>,
    scheduled: HashSet<SpecKey>,
    peak_in_flight: usize,
    pub launched: u64,
    pub launched_bytes: u64,
    pub completed: u64,
}

impl DmaController {
    pub fn new(omega: usize, l_dma: u64) -> Self {
        assert!(omega > 0, "window must be nonzero");
        Self {
            omega,
            l_dma,
            slots: vec![None; omega],
            orphaned: vec![false; omega],
            backlog: VecDeque::new(),
            scheduled: HashSet::new(),
            peak_in_flight: 0,
            launched: 0,
            launched_bytes: 0,
            completed: 0,
        }
    }

    pub fn omega(&self) -> usize {
        self.omega
    }

    pub fn in_flight(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }

    pub fn queued(&self) -> usize {
        self.backlog.len()
    }

    pub fn peak_in_flight(&self) -> usize {
        self.peak_in_flight
    }

    pub fn is_drained(&self) -> bool {
        self.backlog.is_empty() && self.in_flight() == 0
    }

    /// True while a request for `key` is queued or outstanding.
    pub fn is_scheduled(&self, key: &SpecKey) -> bool {
        self.scheduled.contains(key)
    }

    pub fn in_flight_requests(&self) -> impl Iterator<Item = &PrefetchRequest> {
        self.slots.iter().flatten()
    }

    pub fn queued_requests(&self) -> impl Iterator<Item = &PrefetchRequest> {
        self.backlog.iter()
    }

    /// Queues a request; returns false for a duplicate.
    pub fn submit(&mut self, mut req: PrefetchRequest, now: u64, link: &mut Link, hier: &mut Hierarchy) -> bool {
        if !self.scheduled.insert(req.key()) {
            return false;
        }
        req.state = RequestState::Queued;
        req.submit_tick = now;
        self.backlog.push_back(req);
        self.fill(now, link, hier);
        true
    }

    fn fill(&mut self, now: u64, link: &mut Link, hier: &mut Hierarchy) {
        while !self.backlog.is_empty() {
            let Some(slot) = self.slots.iter().position(Option::is_none) else { break };
            let mut req = self.backlog.pop_front().expect("nonempty");
            // A write after submission means the copy is taken from the new
            // data; a write after launch is caught by the version check.
            if let Some(p) = hier.page(req.page) {
                req.version = p.version;
            }
            req.issue_tick = link.reserve(now, req.bytes);
            req.complete_tick = req.issue_tick + self.l_dma;
            req.state = RequestState::InFlight;
            req.dma_slot = Some(slot);
            hier.l2.insert(req.key(), req.issue_tick, req.complete_tick, req.version);
            self.launched += 1;
            self.launched_bytes += req.bytes;
            self.orphaned[slot] = false;
            self.slots[slot] = Some(req);
        }
        self.peak_in_flight = self.peak_in_flight.max(self.in_flight());
    }

    /// Forgets every request of `req` after its pages are freed. Queued
    /// ones are dropped; transfers on the wire finish without effect, since
    /// the page ids may be reused. Returns how many were dropped from the backlog.
    pub fn release_request(&mut self, req: u64) -> usize {
        let before = self.backlog.len();
        let scheduled = &mut self.scheduled;
        self.backlog.retain(|r| {
            let keep = r.virt.req != req;
            if !keep {
                scheduled.remove(&r.key());
            }
            keep
        });
        for (slot, r) in self.slots.iter().enumerate() {
            if let Some(r) = r.as_ref().filter(|r| r.virt.req == req) {
                self.scheduled.remove(&r.key());
                self.orphaned[slot] = true;
            }
        }
        before - self.backlog.len()
    }

    /// Earliest outstanding completion.
    pub fn next_completion(&self) -> Option<u64> {
        self.slots.iter().flatten().map(|r| r.complete_tick).min()
    }

    /// Retires every transfer finished by `now`, refilling the window from
    /// the backlog at each completion tick.
    pub fn advance(&mut self, now: u64, link: &mut Link, hier: &mut Hierarchy) -> Vec<PrefetchRequest> {
        let mut done = Vec::new();
        loop {
            let next = self
                .slots
                .iter()
                .enumerate()
                .filter_map(|(i, s)| s.as_ref().map(|r| (r.complete_tick, r.issue_tick, i)))
                .min();
            let Some((t, _, slot)) = next else { break };
            if t > now {
                break;
            }
            let mut req = self.slots[slot].take().expect("occupied");
            req.state = RequestState::Ready;
            if !std::mem::take(&mut self.orphaned[slot]) {
                hier.l2.mark_ready(&req.key());
                self.scheduled.remove(&req.key());
            }
            self.completed += 1;
            done.push(req);
            self.fill(t, link, hier);
        }
        self.fill(now, link, hier);
        done
    }
}

/// What one scheduling pass did.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ScheduleOutcome {
    pub submitted: u32,
    pub skipped_resident: u32,
    pub skipped_duplicate: u32,
    pub faults: u32,
    /// Translation cycles spent.
    pub atu_cycles: u64,
}

/// One layer's worth of planned prefetches for a request.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefetchTarget {
    pub req: u64,
    pub layer: u32,
    pub pos: u32,
    /// Candidates in confidence order.
    pub tokens: Vec<TokenId>,
    pub bytes: u64,
}

/// Translates each target, skips anything already in L1 or staged in L2,
/// and submits the rest in confidence order.
pub fn schedule_prefetch(
    target: &PrefetchTarget,
    now: u64,
    hier: &mut Hierarchy,
    dma: &mut DmaController,
    link: &mut Link,
) -> ScheduleOutcome {
    let mut out = ScheduleOutcome::default();
    let v = Virt {
        req: target.req,
        layer: target.layer,
        pos: target.pos,
    };
    let (page, lat) = match hier.translate(v) {
        Ok(x) => x,
        Err(MemError::TranslationFault(_)) | Err(_) => {
            out.faults += target.tokens.len() as u32;
            return out;
        }
    };
    out.atu_cycles += lat;
    let in_l1 = hier.page(page).is_some_and(|p| p.tier == Tier::L1);
    let version = hier.page(page).map_or(0, |p| p.version);
    for &token in &target.tokens {
        let key = SpecKey { page, token };
        if in_l1 {
            out.skipped_resident += 1;
            continue;
        }
        if hier.l2.get(&key).is_some_and(|e| e.version == version && hier.l2.is_live(&key)) {
            out.skipped_resident += 1;
            continue;
        }
        let req = PrefetchRequest {
            virt: v,
            page,
            token,
            issue_tick: 0,
            complete_tick: 0,
            state: RequestState::Queued,
            dma_slot: None,
            version,
            bytes: target.bytes,
            submit_tick: now,
        };
        if dma.submit(req, now, link, hier) {
            out.submitted += 1;
        } else {
            out.skipped_duplicate += 1;
        }
    }
    out
}

/// Where a demanded entry came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CommitOutcome {
    /// Served by L1 without touching the prefetch path.
    Local,
    /// A matching speculative copy; usable from `ready_tick`.
    Hit { ready_tick: u64 },
    /// No usable copy; a synchronous fetch is needed.
    Miss,
}

/// Resolves the demanded entry `(page, actual)`. A copy counts only if it
/// is launched and was taken from the page's current version, so stale
/// data is never served.
pub fn on_token_commit(hier: &mut Hierarchy, page: PageId, actual: TokenId) -> CommitOutcome {
    let key = SpecKey { page, token: actual };
    let version = match hier.page(page) {
        Some(p) if p.tier == Tier::L1 => return CommitOutcome::Local,
        Some(p) => p.version,
        None => return CommitOutcome::Miss,
    };
    match hier.l2.get(&key) {
        Some(e) if hier.l2.is_live(&key) && e.version == version => {
            let ready_tick = e.ready_tick;
            hier.l2.consume(&key);
            CommitOutcome::Hit { ready_tick }
        }
        _ => CommitOutcome::Miss,
    }
}

/// A layer to prefetch and whether it belongs to the following token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlanItem {
    pub layer: u32,
    pub next_token: bool,
}

/// Layers staged while layer `l` (0-based) computes: `l+1` and `l+2`. Past
/// the last layer the plan wraps to layer 0 of the next token and stops.
pub fn pipeline_layers(l: u32, layers: u32) -> Vec<PlanItem> {
    assert!(l < layers, "layer {l} out of range for {layers} layers");
    let mut plan = Vec::with_capacity(2);
    for j in [l + 1, l + 2] {
        if j < layers {
            plan.push(PlanItem {
                layer: j,
                next_token: false,
            });
        } else {
            plan.push(PlanItem {
                layer: 0,
                next_token: true,
            });
            break;
        }
    }
    plan
}

/// Hit tracking for one request.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct AccuracyTracker {
    pub hits: u64,
    pub total: u64,
}

impl AccuracyTracker {
    pub fn record(&mut self, hit: bool) {
        self.total += 1;
        self.hits += u64::from(hit);
    }

    pub fn accuracy(&self) -> Option<f64> {
        (self.total > 0).then(|| self.hits as f64 / self.total as f64)
    }
}

/// Chooses the prefetch depth. Fixed unless adaptive, in which case a UCB
/// bandit over `{1,2,4,8,16}` picks the global depth each epoch and
/// requests whose own accuracy is poor get half of it.
#[derive(Debug, Clone, Serialize)]
pub struct DepthController {
    pub k: u32,
    pub k_min: u32,
    pub k_max: u32,
    pub adaptive: bool,
    pub bandit: BanditState,
    current_arm: Option<usize>,
    trackers: BTreeMap<u64, AccuracyTracker>,
    /// Below this accuracy a request's depth is halved.
    pub low_accuracy: f64,
    pub min_samples: u64,
}

impl DepthController {
    pub fn fixed(k: u32) -> Self {
        Self::new(k, false, 1.0)
    }

    pub fn new(k: u32, adaptive: bool, beta_ucb: f64) -> Self {
        let k = k.clamp(1, 16);
        Self {
            k,
            k_min: 1,
            k_max: 16,
            adaptive,
            bandit: BanditState::depth_arms(beta_ucb),
            current_arm: None,
            trackers: BTreeMap::new(),
            low_accuracy: 0.5,
            min_samples: 32,
        }
    }

    pub fn record(&mut self, req: u64, hit: bool) {
        self.trackers.entry(req).or_default().record(hit);
    }

    pub fn forget(&mut self, req: u64) {
        self.trackers.remove(&req);
    }

    pub fn tracker(&self, req: u64) -> Option<&AccuracyTracker> {
        self.trackers.get(&req)
    }

    /// Depth for one request.
    pub fn depth_for(&self, req: u64) -> u32 {
        if !self.adaptive {
            return self.k;
        }
        let poor = self
            .trackers
            .get(&req)
            .filter(|t| t.total >= self.min_samples)
            .and_then(AccuracyTracker::accuracy)
            .is_some_and(|a| a < self.low_accuracy);
        let k = if poor { self.k.div_ceil(2) } else { self.k };
        k.clamp(self.k_min, self.k_max)
    }

    /// Credits `reward` to the depth used since the last call and picks the
    /// next one.
    pub fn adapt_depth(&mut self, reward: f64) -> u32 {
        if !self.adaptive {
            return self.k;
        }
        if let Some(arm) = self.current_arm {
            self.bandit.record(arm, reward);
        }
        let arm = self.bandit.select();
        self.current_arm = Some(arm);
        self.k = self.bandit.arms[arm].clamp(self.k_min, self.k_max);
        self.k
    }
}

/// Per-request accuracy summaries, keyed for reporting.
pub fn accuracy_summary(dc: &DepthController) -> HashMap<u64, f64> {
    dc.trackers.iter().filter_map(|(&r, t)| t.accuracy().map(|a| (r, a))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::MemoryConfig;

    fn hier() -> Hierarchy {
        Hierarchy::new(MemoryConfig {
            l1_capacity: 64 * 4096,
            l2_capacity: 256 * 4096,
            l3_capacity: 1 << 30,
            ..MemoryConfig::default()
        })
    }

    fn target(req: u64, layer: u32, pos: u32, tokens: Vec<TokenId>) -> PrefetchTarget {
        PrefetchTarget {
            req,
            layer,
            pos,
            tokens,
            bytes: 1280,
        }
    }

    #[test]
    fn four_candidates_complete_after_dma_latency() {
        let mut h = hier();
        h.allocate(1, 0, 5, None).unwrap();
        let mut dma = DmaController::new(16, 12);
        let mut link = Link::new(51.2);
        let out = schedule_prefetch(&target(1, 0, 5, vec![1, 2, 3, 4]), 100, &mut h, &mut dma, &mut link);
        assert_eq!(out.submitted, 4);
        assert_eq!(dma.in_flight(), 4);
        let reqs: Vec<_> = dma.in_flight_requests().cloned().collect();
        for r in &reqs {
            assert_eq!(r.complete_tick, r.issue_tick + 12);
            assert!(r.issue_tick >= 100);
        }
        // Starts are spaced by the transfer time (1280 B at 51.2 B/cycle = 25 cycles).
        let mut starts: Vec<u64> = reqs.iter().map(|r| r.issue_tick).collect();
        starts.sort_unstable();
        assert_eq!(starts, vec![100, 125, 150, 175]);
    }

    #[test]
    fn window_caps_outstanding_requests() {
        let mut h = hier();
        for pos in 0..5 {
            h.allocate(1, 0, pos, None).unwrap();
        }
        let mut dma = DmaController::new(16, 12);
        let mut link = Link::new(51.2);
        for pos in 0..5 {
            schedule_prefetch(&target(1, 0, pos, vec![1, 2, 3, 4]), 0, &mut h, &mut dma, &mut link);
        }
        assert_eq!(dma.in_flight(), 16);
        assert_eq!(dma.queued(), 4);
        let mut retired = 0;
        let mut t = 0;
        while !dma.is_drained() {
            t = dma.next_completion().unwrap();
            retired += dma.advance(t, &mut link, &mut h).len();
            assert!(dma.in_flight() <= 16);
        }
        assert_eq!(retired, 20);
        assert_eq!(dma.peak_in_flight(), 16);
        assert!(t > 0);
    }

    #[test]
    fn released_request_leaves_no_trace() {
        let mut h = hier();
        for pos in 0..5 {
            h.allocate(1, 0, pos, None).unwrap();
        }
        h.allocate(2, 0, 0, None).unwrap();
        let mut dma = DmaController::new(16, 12);
        let mut link = Link::new(51.2);
        for pos in 0..5 {
            schedule_prefetch(&target(1, 0, pos, vec![1, 2, 3, 4]), 0, &mut h, &mut dma, &mut link);
        }
        schedule_prefetch(&target(2, 0, 0, vec![1]), 0, &mut h, &mut dma, &mut link);
        assert_eq!((dma.in_flight(), dma.queued()), (16, 5));
        assert_eq!(dma.release_request(1), 4);
        assert_eq!(dma.queued(), 1);
        let orphan = dma.in_flight_requests().next().unwrap().key();
        assert!(!dma.is_scheduled(&orphan));
        while !dma.is_drained() {
            let t = dma.next_completion().unwrap();
            dma.advance(t, &mut link, &mut h);
        }
        assert_eq!(dma.completed, 17);
        // Only the surviving request's copy became ready.
        let id2 = h.page_of(Virt { req: 2, layer: 0, pos: 0 }).unwrap();
        assert!(matches!(on_token_commit(&mut h, id2, 1), CommitOutcome::Hit { .. }));
    }

    #[test]
    fn resident_targets_issue_nothing() {
        let mut h = hier();
        let id = h.allocate(2, 1, 0, None).unwrap();
        h.write_new_kv(id, 0).unwrap();
        let mut dma = DmaController::new(16, 12);
        let mut link = Link::new(51.2);
        let out = schedule_prefetch(&target(2, 1, 0, vec![5, 6, 7, 8]), 0, &mut h, &mut dma, &mut link);
        assert_eq!(out.submitted, 0);
        assert_eq!(out.skipped_resident, 4);
        assert_eq!(link.transfers, 0);
    }

    #[test]
    fn unallocated_targets_count_faults() {
        let mut h = hier();
        let mut dma = DmaController::new(16, 12);
        let mut link = Link::new(51.2);
        let out = schedule_prefetch(&target(9, 0, 0, vec![1, 2]), 0, &mut h, &mut dma, &mut link);
        assert_eq!(out.faults, 2);
        assert_eq!(out.submitted, 0);
    }

    #[test]
    fn hit_miss_and_stale_copy() {
        let mut h = hier();
        let id = h.allocate(1, 0, 3, None).unwrap();
        let mut dma = DmaController::new(16, 12);
        let mut link = Link::new(51.2);
        schedule_prefetch(&target(1, 0, 3, vec![7, 8]), 0, &mut h, &mut dma, &mut link);
        dma.advance(1000, &mut link, &mut h);
        assert_eq!(on_token_commit(&mut h, id, 9), CommitOutcome::Miss);
        assert!(matches!(on_token_commit(&mut h, id, 7), CommitOutcome::Hit { .. }));
        // Consumed copies are not served twice.
        assert_eq!(on_token_commit(&mut h, id, 7), CommitOutcome::Miss);

        // A write after the prefetch makes the other copy stale.
        let other = h.allocate(1, 0, 4, None).unwrap();
        schedule_prefetch(&target(1, 0, 4, vec![1]), 1000, &mut h, &mut dma, &mut link);
        h.write_new_kv(other, 1001).unwrap();
        // Force the page out of L1 so the prefetch path is consulted.
        for pos in 100..200 {
            let p = h.allocate(1, 1, pos, None).unwrap();
            h.write_new_kv(p, 1002).unwrap();
        }
        assert_ne!(h.page(other).unwrap().tier, Tier::L1);
        assert_eq!(on_token_commit(&mut h, other, 1), CommitOutcome::Miss);
    }

    #[test]
    fn pipeline_plans() {
        let l = 8;
        let p = pipeline_layers(0, l);
        assert_eq!(p.iter().map(|x| x.layer).collect::<Vec<_>>(), vec![1, 2]);
        assert!(p.iter().all(|x| !x.next_token));
        let p = pipeline_layers(6, l);
        assert_eq!(
            p,
            vec![
                PlanItem {
                    layer: 7,
                    next_token: false
                },
                PlanItem {
                    layer: 0,
                    next_token: true
                }
            ]
        );
        assert_eq!(
            pipeline_layers(7, l),
            vec![PlanItem {
                layer: 0,
                next_token: true
            }]
        );
        assert_eq!(pipeline_layers(0, 1).len(), 1);
    }

    #[test]
    fn depth_controller_bounds() {
        let mut d = DepthController::new(4, true, 1.0);
        for i in 0..200 {
            let k = d.adapt_depth((i % 7) as f64);
            assert!((1..=16).contains(&k));
        }
        let fixed = DepthController::fixed(64);
        assert_eq!(fixed.k, 16);
    }

    #[test]
    fn first_adapt_explores_unpulled_arm() {
        let mut d = DepthController::new(4, true, 1.0);
        let first = d.adapt_depth(0.0);
        let second = d.adapt_depth(5.0);
        assert_ne!(first, second);
    }

    #[test]
    fn poor_requests_get_half_depth() {
        let mut d = DepthController::new(8, true, 1.0);
        d.k = 8;
        for _ in 0..40 {
            d.record(3, false);
            d.record(4, true);
        }
        assert_eq!(d.depth_for(3), 4);
        assert_eq!(d.depth_for(4), 8);
        assert_eq!(accuracy_summary(&d)[&4], 1.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn window_never_exceeds_omega(batches in prop::collection::vec((0u32..32, 1usize..9, 0u64..200), 1..40)) {
                let mut h = hier();
                for pos in 0..32 {
                    h.allocate(1, 0, pos, None).unwrap();
                }
                let mut dma = DmaController::new(16, 12);
                let mut link = Link::new(20.0);
                let mut now = 0;
                for (pos, k, dt) in batches {
                    now += dt;
                    dma.advance(now, &mut link, &mut h);
                    let tokens = (0..k as u32).map(|t| t + pos * 16).collect();
                    schedule_prefetch(&target(1, 0, pos, tokens), now, &mut h, &mut dma, &mut link);
                    prop_assert!(dma.in_flight() <= 16);
                }
                while let Some(t) = dma.next_completion() {
                    dma.advance(t, &mut link, &mut h);
                    prop_assert!(dma.in_flight() <= 16);
                }
                prop_assert!(dma.is_drained());
            }
        }
    }
}
