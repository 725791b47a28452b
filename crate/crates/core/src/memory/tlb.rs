use serde::{Deserialize, Serialize};

use super::Virt;

/// TLB geometry. One entry covers `span` consecutive positions of one
/// (request, layer) stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TlbConfig {
    pub entries: usize,
    pub ways: usize,
    pub span: u32,
}

impl Default for TlbConfig {
    fn default() -> Self {
        Self {
            entries: 64,
            ways: 4,
            span: 16,
        }
    }
}

impl TlbConfig {
    pub fn sets(&self) -> usize {
        (self.entries / self.ways).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub(crate) struct Tag {
    req: u64,
    layer: u32,
    block: u32,
}

/// Set-associative TLB with LRU replacement inside each set.
#[derive(Debug, Clone)]
pub struct Tlb {
    cfg: TlbConfig,
    sets: Vec<Vec<(Tag, u64)>>,
    clock: u64,
    pub hits: u64,
    pub misses: u64,
}

impl Tlb {
    pub fn new(cfg: TlbConfig) -> Self {
        Self {
            cfg,
            sets: vec![Vec::with_capacity(cfg.ways); cfg.sets()],
            clock: 0,
            hits: 0,
            misses: 0,
        }
    }

    pub fn config(&self) -> TlbConfig {
        self.cfg
    }

    pub(crate) fn tag(&self, v: Virt) -> Tag {
        Tag {
            req: v.req,
            layer: v.layer,
            block: v.pos / self.cfg.span.max(1),
        }
    }

    fn set_index(&self, t: Tag) -> usize {
        // Consecutive blocks of one stream land in consecutive sets.
        let h = t
            .req
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(u64::from(t.layer).wrapping_mul(0xC2B2_AE3D_27D4_EB4F))
            .rotate_left(17)
            .wrapping_add(u64::from(t.block));
        (h % self.sets.len() as u64) as usize
    }

    /// Looks up and fills on miss. Returns true on hit.
    pub fn access(&mut self, v: Virt) -> bool {
        self.clock += 1;
        let tag = self.tag(v);
        let idx = self.set_index(tag);
        let ways = self.cfg.ways;
        let clock = self.clock;
        let set = &mut self.sets[idx];
        if let Some(e) = set.iter_mut().find(|e| e.0 == tag) {
            e.1 = clock;
            self.hits += 1;
            return true;
        }
        self.misses += 1;
        if set.len() < ways {
            set.push((tag, clock));
        } else if let Some(victim) = set.iter_mut().min_by_key(|e| e.1) {
            *victim = (tag, clock);
        }
        false
    }

    /// Drops every entry of a request (its pages were freed).
    pub fn flush_request(&mut self, req: u64) {
        for set in &mut self.sets {
            set.retain(|e| e.0.req != req);
        }
    }

    pub(crate) fn tags(&self) -> impl Iterator<Item = Tag> + '_ {
        self.sets.iter().flatten().map(|e| e.0)
    }

    pub(crate) fn tag_matches(t: Tag, v: Virt, span: u32) -> bool {
        t.req == v.req && t.layer == v.layer && t.block == v.pos / span.max(1)
    }

    pub fn hit_rate(&self) -> f64 {
        let n = self.hits + self.misses;
        if n == 0 {
            0.0
        } else {
            self.hits as f64 / n as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(req: u64, layer: u32, pos: u32) -> Virt {
        Virt { req, layer, pos }
    }

    #[test]
    fn second_touch_hits() {
        let mut t = Tlb::new(TlbConfig::default());
        assert!(!t.access(v(1, 0, 0)));
        assert!(t.access(v(1, 0, 0)));
        assert!(t.access(v(1, 0, 5)));
        assert!(!t.access(v(1, 0, 16)));
    }

    #[test]
    fn sequential_stream_hit_rate() {
        let mut t = Tlb::new(TlbConfig::default());
        for pos in 0..10_000 {
            t.access(v(3, 2, pos));
        }
        assert!(t.hit_rate() > 0.92, "{}", t.hit_rate());
        assert!((t.hit_rate() - 0.9375).abs() < 1e-3);
    }

    #[test]
    fn set_holds_at_most_ways() {
        let cfg = TlbConfig {
            entries: 4,
            ways: 4,
            span: 1,
        };
        let mut t = Tlb::new(cfg);
        for pos in 0..5 {
            t.access(v(0, 0, pos));
        }
        // pos 0 was the LRU way.
        assert!(!t.access(v(0, 0, 0)));
        assert!(t.access(v(0, 0, 4)));
        assert_eq!(t.tags().count(), 4);
    }
}
