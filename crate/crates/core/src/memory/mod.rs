//! Three-tier KV page store: GPU-local L1 (LRU), speculative L2 staging
//! buffer and far-memory L3, fronted by an address translation unit.
//!
//! Pages carry a two-state coherence flag (Clean/Dirty). Speculative copies
//! in L2 are separate read-only entries keyed by page and candidate token;
//! a write to the page invalidates them lazily.

mod l2;
mod lru;
mod tlb;

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::Scheme;

pub use l2::{PrefetchState, SpecBuffer, SpecEntry, SpecKey};
pub use lru::LruSet;
pub use tlb::{Tlb, TlbConfig};

pub type PageId = u64;

/// Virtual KV address: request, layer and token position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Virt {
    pub req: u64,
    pub layer: u32,
    pub pos: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Tier {
    L1,
    L2,
    L3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PageState {
    Clean,
    Dirty,
    /// Only ever carried by L2 copies.
    SpeculativeReadOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CompressedRef {
    pub scheme: Scheme,
    pub stored_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KvPage {
    pub id: PageId,
    pub virt: Virt,
    /// Half-open token range held by the page.
    pub token_range: (u32, u32),
    pub tier: Tier,
    pub state: PageState,
    access_count: u32,
    count_window: u64,
    pub last_access_tick: u64,
    pub last_access_token: u64,
    /// Incremented by every write; speculative copies remember it.
    pub version: u32,
    pub compressed: Option<CompressedRef>,
}

impl KvPage {
    pub fn stored_bytes(&self, page_size: u64) -> u64 {
        self.compressed.map_or(page_size, |c| c.stored_bytes)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MemError {
    #[error("L3 capacity exhausted: need {need} bytes, {free} free")]
    CapacityExhausted { need: u64, free: u64 },
    #[error("translation fault for request {} layer {} position {}", .0.req, .0.layer, .0.pos)]
    TranslationFault(Virt),
    #[error("unknown page {0}")]
    UnknownPage(PageId),
    #[error("triple already allocated: request {} layer {} position {}", .0.req, .0.layer, .0.pos)]
    Duplicate(Virt),
}

/// Hot/cold thresholds and the rule that retunes them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MigrationPolicy {
    /// Promote when the access count exceeds this.
    pub t_h: f64,
    /// Demote when the access count falls below this.
    pub t_c: f64,
    /// Multiplicative step applied to `t_h` each epoch.
    pub step: f64,
    pub miss_target: f64,
    /// Tokens after which an untouched page counts as cold; access counts
    /// also halve once per window.
    pub hot_window: u64,
    pub t_h_max: f64,
}

impl Default for MigrationPolicy {
    fn default() -> Self {
        Self {
            t_h: 4.0,
            t_c: 1.0,
            step: 0.1,
            miss_target: 0.06,
            hot_window: 256,
            t_h_max: 64.0,
        }
    }
}

impl MigrationPolicy {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.t_c >= 0.0 && self.t_h > self.t_c) {
            return Err(format!("need T_h > T_c >= 0 (got {} and {})", self.t_h, self.t_c));
        }
        if !(self.step > 0.0 && self.step < 1.0) {
            return Err(format!("step must lie in (0, 1) (got {})", self.step));
        }
        if !(0.0..=1.0).contains(&self.miss_target) {
            return Err(format!("miss target must lie in [0, 1] (got {})", self.miss_target));
        }
        if self.hot_window == 0 {
            return Err("hot window must be positive".into());
        }
        if self.t_h_max < self.t_h {
            return Err("t_h_max must be at least t_h".into());
        }
        Ok(())
    }

    /// Lowers `t_h` when the miss rate is above target, raises it otherwise.
    pub fn adjust(&mut self, l1_miss_rate: f64) {
        let floor = self.t_c + 1.0;
        if l1_miss_rate > self.miss_target {
            self.t_h = (self.t_h * (1.0 - self.step)).max(floor);
        } else if l1_miss_rate < self.miss_target {
            self.t_h = (self.t_h * (1.0 + self.step)).min(self.t_h_max);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryConfig {
    pub page_size: u64,
    pub l1_capacity: u64,
    pub l2_capacity: u64,
    pub l3_capacity: u64,
    pub tlb: TlbConfig,
    pub tlb_hit_latency: u64,
    pub walk_latency: u64,
    pub migration: MigrationPolicy,
    /// L1 tail pages examined for cold demotion each epoch.
    pub demote_scan: usize,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            page_size: 4096,
            l1_capacity: 4 << 20,
            l2_capacity: 16 << 20,
            l3_capacity: 1 << 30,
            tlb: TlbConfig::default(),
            tlb_hit_latency: 1,
            walk_latency: 15,
            migration: MigrationPolicy::default(),
            demote_scan: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct MemStats {
    pub l1_hits: u64,
    pub l1_misses: u64,
    pub promotions: u64,
    pub demotions: u64,
    pub evictions: u64,
    pub writebacks: u64,
    pub forced_writebacks: u64,
    pub coalesced_writes: u64,
    pub invalidated_copies: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MigrationAction {
    Promoted,
    Demoted,
    Stay,
}

/// Side effects of moving pages out of L1.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Movement {
    /// Bytes written back to L3 because a dirty page left L1.
    pub writeback_bytes: u64,
    /// Bytes read from L3 to fill L1.
    pub fill_bytes: u64,
    pub evicted: Vec<PageId>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PageDumpEntry {
    pub virt: Virt,
    pub page_id: PageId,
    pub tier: Tier,
    pub state: PageState,
    pub access_count: u32,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpochReport {
    pub promoted: u32,
    pub demoted: u32,
    pub movement: Movement,
}

/// The page store.
#[derive(Debug, Clone)]
pub struct Hierarchy {
    cfg: MemoryConfig,
    pages: Vec<Option<KvPage>>,
    free_ids: Vec<PageId>,
    table: HashMap<Virt, PageId>,
    req_pages: HashMap<u64, Vec<PageId>>,
    tlb: Tlb,
    l1: LruSet<PageId>,
    pub l2: SpecBuffer,
    allocated_bytes: u64,
    pending_wb: BTreeSet<PageId>,
    touched: BTreeSet<PageId>,
    token_clock: u64,
    pub stats: MemStats,
}

impl Hierarchy {
    pub fn new(cfg: MemoryConfig) -> Self {
        let l1_pages = (cfg.l1_capacity / cfg.page_size) as usize;
        let l2_entries = (cfg.l2_capacity / cfg.page_size) as usize;
        Self {
            tlb: Tlb::new(cfg.tlb),
            l1: LruSet::new(l1_pages),
            l2: SpecBuffer::new(l2_entries),
            cfg,
            pages: Vec::new(),
            free_ids: Vec::new(),
            table: HashMap::new(),
            req_pages: HashMap::new(),
            allocated_bytes: 0,
            pending_wb: BTreeSet::new(),
            touched: BTreeSet::new(),
            token_clock: 0,
            stats: MemStats::default(),
        }
    }

    pub fn config(&self) -> &MemoryConfig {
        &self.cfg
    }

    pub fn policy(&self) -> &MigrationPolicy {
        &self.cfg.migration
    }

    pub fn tlb(&self) -> &Tlb {
        &self.tlb
    }

    pub fn l3_free(&self) -> u64 {
        self.cfg.l3_capacity.saturating_sub(self.allocated_bytes)
    }

    pub fn allocated_bytes(&self) -> u64 {
        self.allocated_bytes
    }

    pub fn l1_occupancy(&self) -> u64 {
        self.l1.len() as u64 * self.cfg.page_size
    }

    pub fn l2_occupancy(&self) -> u64 {
        self.l2.len() as u64 * self.cfg.page_size
    }

    /// Bytes of pages currently resident in L3.
    pub fn l3_occupancy(&self) -> u64 {
        self.pages
            .iter()
            .flatten()
            .filter(|p| p.tier == Tier::L3)
            .map(|p| p.stored_bytes(self.cfg.page_size))
            .sum()
    }

    pub fn page_count(&self) -> usize {
        self.table.len()
    }

    pub fn page(&self, id: PageId) -> Option<&KvPage> {
        self.pages.get(id as usize).and_then(Option::as_ref)
    }

    fn page_mut(&mut self, id: PageId) -> Result<&mut KvPage, MemError> {
        self.pages
            .get_mut(id as usize)
            .and_then(Option::as_mut)
            .ok_or(MemError::UnknownPage(id))
    }

    pub fn page_of(&self, v: Virt) -> Option<PageId> {
        self.table.get(&v).copied()
    }

    /// Current global token count, used for hotness and count decay.
    pub fn set_token_clock(&mut self, tokens: u64) {
        self.token_clock = tokens;
    }

    pub fn token_clock(&self) -> u64 {
        self.token_clock
    }

    fn window(&self) -> u64 {
        self.token_clock / self.cfg.migration.hot_window
    }

    /// Access count with the per-window halving applied.
    pub fn access_count(&self, id: PageId) -> u32 {
        self.page(id).map_or(0, |p| decayed(p, self.window()))
    }

    /// Registers a new L3 page for one token position.
    pub fn allocate(&mut self, req: u64, layer: u32, pos: u32, compressed: Option<CompressedRef>) -> Result<PageId, MemError> {
        let virt = Virt { req, layer, pos };
        if self.table.contains_key(&virt) {
            return Err(MemError::Duplicate(virt));
        }
        let need = compressed.map_or(self.cfg.page_size, |c| c.stored_bytes);
        if need > self.l3_free() {
            return Err(MemError::CapacityExhausted {
                need,
                free: self.l3_free(),
            });
        }
        let id = self.free_ids.pop().unwrap_or(self.pages.len() as PageId);
        let page = KvPage {
            id,
            virt,
            token_range: (pos, pos + 1),
            tier: Tier::L3,
            state: PageState::Clean,
            access_count: 0,
            count_window: self.window(),
            last_access_tick: 0,
            last_access_token: self.token_clock,
            version: 0,
            compressed,
        };
        if id as usize == self.pages.len() {
            self.pages.push(Some(page));
        } else {
            self.pages[id as usize] = Some(page);
        }
        self.table.insert(virt, id);
        self.req_pages.entry(req).or_default().push(id);
        self.allocated_bytes += need;
        Ok(id)
    }

    /// Allocates one page per position of `positions` for `layer`.
    pub fn allocate_range(
        &mut self,
        req: u64,
        layer: u32,
        positions: std::ops::Range<u32>,
        compressed: Option<CompressedRef>,
    ) -> Result<Vec<PageId>, MemError> {
        positions.map(|pos| self.allocate(req, layer, pos, compressed)).collect()
    }

    /// Releases every page of a request. Pending writebacks are dropped.
    pub fn free_request(&mut self, req: u64) {
        let Some(ids) = self.req_pages.remove(&req) else {
            return;
        };
        for id in ids {
            if let Some(page) = self.pages[id as usize].take() {
                self.allocated_bytes -= page.stored_bytes(self.cfg.page_size);
                self.table.remove(&page.virt);
                self.l1.remove(&id);
                self.pending_wb.remove(&id);
                self.touched.remove(&id);
                self.l2.drop_page(id);
                self.free_ids.push(id);
            }
        }
        self.tlb.flush_request(req);
    }

    /// Virtual to physical translation through the TLB.
    pub fn translate(&mut self, v: Virt) -> Result<(PageId, u64), MemError> {
        let id = self.page_of(v).ok_or(MemError::TranslationFault(v))?;
        let hit = self.tlb.access(v);
        let latency = if hit {
            self.cfg.tlb_hit_latency
        } else {
            self.cfg.tlb_hit_latency + self.cfg.walk_latency
        };
        Ok((id, latency))
    }

    fn note_access(&mut self, id: PageId, tick: u64) -> Result<(), MemError> {
        let window = self.window();
        let clock = self.token_clock;
        let p = self.page_mut(id)?;
        p.access_count = decayed(p, window).saturating_add(1);
        p.count_window = window;
        p.last_access_tick = tick;
        p.last_access_token = clock;
        self.touched.insert(id);
        Ok(())
    }

    /// Residency probe. L1 hits refresh recency; every probe counts as an
    /// access for migration.
    pub fn lookup(&mut self, id: PageId, tick: u64) -> Result<Tier, MemError> {
        self.note_access(id, tick)?;
        let tier = self.page(id).map(|p| p.tier).ok_or(MemError::UnknownPage(id))?;
        if tier == Tier::L1 {
            self.l1.touch(id);
            self.stats.l1_hits += 1;
        } else {
            self.stats.l1_misses += 1;
        }
        Ok(tier)
    }

    /// GPU write of freshly computed KV: the page lands in L1 Dirty, every
    /// speculative copy is invalidated and a writeback is queued (coalesced).
    pub fn write_new_kv(&mut self, id: PageId, tick: u64) -> Result<Movement, MemError> {
        self.note_access(id, tick)?;
        let mut mv = Movement::default();
        let tier = self.page(id).ok_or(MemError::UnknownPage(id))?.tier;
        if tier != Tier::L1 {
            self.place_in_l1(id, &mut mv)?;
        } else {
            self.l1.touch(id);
        }
        let p = self.page_mut(id)?;
        p.version = p.version.wrapping_add(1);
        p.state = PageState::Dirty;
        self.stats.invalidated_copies += u64::from(self.l2.invalidate_page(id));
        if !self.pending_wb.insert(id) {
            self.stats.coalesced_writes += 1;
        }
        Ok(mv)
    }

    fn place_in_l1(&mut self, id: PageId, mv: &mut Movement) -> Result<(), MemError> {
        if self.l1.capacity() == 0 {
            return Ok(());
        }
        if let Some(victim) = self.l1.insert(id) {
            self.stats.evictions += 1;
            mv.evicted.push(victim);
            self.move_to_l3(victim, mv)?;
        }
        self.page_mut(id)?.tier = Tier::L1;
        Ok(())
    }

    fn move_to_l3(&mut self, id: PageId, mv: &mut Movement) -> Result<(), MemError> {
        self.l1.remove(&id);
        let page_size = self.cfg.page_size;
        let p = self.page_mut(id)?;
        let bytes = p.stored_bytes(page_size);
        let was_dirty = p.state == PageState::Dirty;
        p.tier = Tier::L3;
        p.state = PageState::Clean;
        if was_dirty {
            self.pending_wb.remove(&id);
            self.stats.forced_writebacks += 1;
            mv.writeback_bytes += bytes;
        }
        Ok(())
    }

    pub fn pending_writebacks(&self) -> usize {
        self.pending_wb.len()
    }

    /// Removes up to `max` queued writebacks, lowest page id first.
    pub fn take_writebacks(&mut self, max: usize) -> Vec<(PageId, u32, u64)> {
        let mut out = Vec::new();
        while out.len() < max {
            let Some(id) = self.pending_wb.pop_first() else { break };
            if let Some(p) = self.page(id) {
                out.push((id, p.version, p.stored_bytes(self.cfg.page_size)));
            }
        }
        out
    }

    /// Finishes a writeback taken at `version`. A newer write keeps the page Dirty.
    pub fn complete_writeback(&mut self, id: PageId, version: u32) {
        let requeued = self.pending_wb.contains(&id);
        if let Ok(p) = self.page_mut(id) {
            if p.version == version && p.state == PageState::Dirty && !requeued {
                p.state = PageState::Clean;
                self.stats.writebacks += 1;
            }
        }
    }

    /// Applies the thresholds to one page.
    pub fn migrate(&mut self, id: PageId) -> Result<(MigrationAction, Movement), MemError> {
        let count = f64::from(self.access_count(id));
        let tier = self.page(id).ok_or(MemError::UnknownPage(id))?.tier;
        let policy = &self.cfg.migration;
        let mut mv = Movement::default();
        if tier == Tier::L3 && count > policy.t_h {
            mv.fill_bytes += self.page(id).map_or(0, |p| p.stored_bytes(self.cfg.page_size));
            self.place_in_l1(id, &mut mv)?;
            self.stats.promotions += 1;
            Ok((MigrationAction::Promoted, mv))
        } else if tier == Tier::L1 && count < policy.t_c {
            self.move_to_l3(id, &mut mv)?;
            self.stats.demotions += 1;
            Ok((MigrationAction::Demoted, mv))
        } else {
            Ok((MigrationAction::Stay, mv))
        }
    }

    fn is_cold(&self, id: PageId) -> bool {
        self.page(id)
            .is_some_and(|p| self.token_clock.saturating_sub(p.last_access_token) > self.cfg.migration.hot_window)
    }

    /// Epoch boundary: retune `T_h` from the epoch's L1 miss rate, then run
    /// migration over pages touched this epoch and the cold tail of L1.
    pub fn end_epoch(&mut self, l1_miss_rate: Option<f64>) -> EpochReport {
        if let Some(m) = l1_miss_rate {
            self.cfg.migration.adjust(m);
        }
        let mut report = EpochReport::default();
        let touched = std::mem::take(&mut self.touched);
        for id in touched {
            if let Ok((action, mv)) = self.migrate(id) {
                report.absorb(action, mv);
            }
        }
        for id in self.l1.oldest(self.cfg.demote_scan) {
            if self.is_cold(id) {
                let mut mv = Movement::default();
                if self.move_to_l3(id, &mut mv).is_ok() {
                    self.stats.demotions += 1;
                    report.absorb(MigrationAction::Demoted, mv);
                }
            } else if let Ok((action, mv)) = self.migrate(id) {
                report.absorb(action, mv);
            }
        }
        report
    }

    /// Page table as `{virt, page_id, tier, state, access_count}` records in page-id order.
    pub fn dump(&self) -> Vec<PageDumpEntry> {
        let window = self.window();
        self.pages
            .iter()
            .flatten()
            .map(|p| PageDumpEntry {
                virt: p.virt,
                page_id: p.id,
                tier: p.tier,
                state: p.state,
                access_count: decayed(p, window),
            })
            .collect()
    }

    pub fn dump_json(&self) -> String {
        serde_json::to_string_pretty(&self.dump()).expect("page dump serializes")
    }

    /// Structural invariants; returns the first violation found.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut l1_pages = 0usize;
        let mut seen = std::collections::HashSet::new();
        for p in self.pages.iter().flatten() {
            if self.table.get(&p.virt) != Some(&p.id) {
                return Err(format!("page {} missing from page table", p.id));
            }
            if !seen.insert(p.id) {
                return Err(format!("page {} mapped twice", p.id));
            }
            match p.tier {
                Tier::L1 => {
                    l1_pages += 1;
                    if !self.l1.contains(&p.id) {
                        return Err(format!("page {} tagged L1 but not in LRU", p.id));
                    }
                }
                Tier::L3 if p.state == PageState::Dirty => {
                    return Err(format!("dirty page {} outside L1", p.id));
                }
                Tier::L2 => return Err(format!("page {} resident in L2", p.id)),
                _ => {}
            }
            if p.state == PageState::SpeculativeReadOnly {
                return Err(format!("page {} carries a speculative state", p.id));
            }
        }
        if l1_pages != self.l1.len() {
            return Err("LRU holds pages not tagged L1".into());
        }
        if self.table.len() != seen.len() {
            return Err("page table has dangling entries".into());
        }
        if self.l1_occupancy() > self.cfg.l1_capacity {
            return Err("L1 over capacity".into());
        }
        if self.l2_occupancy() > self.cfg.l2_capacity.max(self.cfg.page_size * 2) {
            return Err("L2 over capacity".into());
        }
        if self.allocated_bytes > self.cfg.l3_capacity {
            return Err("L3 over capacity".into());
        }
        let span = self.tlb.config().span;
        for t in self.tlb.tags() {
            let backed = self
                .table
                .keys()
                .any(|v| tlb::Tlb::tag_matches(t, *v, span));
            if !backed {
                return Err("TLB entry without a page-table mapping".into());
            }
        }
        Ok(())
    }
}

impl EpochReport {
    fn absorb(&mut self, action: MigrationAction, mv: Movement) {
        match action {
            MigrationAction::Promoted => self.promoted += 1,
            MigrationAction::Demoted => self.demoted += 1,
            MigrationAction::Stay => {}
        }
        self.movement.writeback_bytes += mv.writeback_bytes;
        self.movement.fill_bytes += mv.fill_bytes;
        self.movement.evicted.extend(mv.evicted);
    }
}

fn decayed(p: &KvPage, window: u64) -> u32 {
    let shift = window.saturating_sub(p.count_window);
    if shift >= 32 {
        0
    } else {
        p.access_count >> shift
    }
}
