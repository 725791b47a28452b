use std::collections::HashMap;

use serde::Serialize;

use super::PageId;

/// Lifecycle of a speculative copy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PrefetchState {
    InFlight,
    Ready,
    Invalidated,
    Consumed,
}

/// A speculative copy is identified by its page and the candidate token it
/// was fetched for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct SpecKey {
    pub page: PageId,
    pub token: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpecEntry {
    pub key: SpecKey,
    pub state: PrefetchState,
    pub issue_tick: u64,
    pub ready_tick: u64,
    /// Page write version the copy was taken from.
    pub version: u32,
    half: u8,
    seq: u64,
}

/// Double-buffered staging area for prefetched copies.
///
/// New copies fill one half. When it is full the halves swap and the older
/// half is discarded wholesale, which is also how invalidated copies leave.
#[derive(Debug, Clone)]
pub struct SpecBuffer {
    half_capacity: usize,
    /// Insertion log per half; stale `(key, seq)` pairs are skipped on swap.
    halves: [Vec<(SpecKey, u64)>; 2],
    live: [usize; 2],
    fill: usize,
    seq: u64,
    entries: HashMap<SpecKey, SpecEntry>,
    by_page: HashMap<PageId, Vec<u32>>,
    pub swaps: u64,
    pub discarded_unused: u64,
}

impl SpecBuffer {
    /// `capacity` in entries; each half holds `capacity / 2` (at least one).
    pub fn new(capacity: usize) -> Self {
        Self {
            half_capacity: (capacity / 2).max(1),
            halves: [Vec::new(), Vec::new()],
            live: [0, 0],
            fill: 0,
            seq: 0,
            entries: HashMap::new(),
            by_page: HashMap::new(),
            swaps: 0,
            discarded_unused: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.half_capacity * 2
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &SpecKey) -> Option<&SpecEntry> {
        self.entries.get(key)
    }

    /// Copy present and not yet invalidated or consumed.
    pub fn is_live(&self, key: &SpecKey) -> bool {
        self.get(key)
            .is_some_and(|e| matches!(e.state, PrefetchState::InFlight | PrefetchState::Ready))
    }

    /// Places a new in-flight copy, swapping halves first if needed.
    pub fn insert(&mut self, key: SpecKey, issue_tick: u64, ready_tick: u64, version: u32) {
        if self.entries.contains_key(&key) {
            self.remove(&key);
        }
        if self.live[self.fill] >= self.half_capacity {
            self.swap();
        }
        self.seq += 1;
        self.halves[self.fill].push((key, self.seq));
        self.live[self.fill] += 1;
        self.entries.insert(
            key,
            SpecEntry {
                key,
                state: PrefetchState::InFlight,
                issue_tick,
                ready_tick,
                version,
                half: self.fill as u8,
                seq: self.seq,
            },
        );
        self.by_page.entry(key.page).or_default().push(key.token);
    }

    fn swap(&mut self) {
        let old = 1 - self.fill;
        for (key, seq) in std::mem::take(&mut self.halves[old]) {
            if self.entries.get(&key).is_some_and(|e| e.seq == seq) {
                let e = self.entries.remove(&key).expect("present");
                if matches!(e.state, PrefetchState::InFlight | PrefetchState::Ready) {
                    self.discarded_unused += 1;
                }
                self.unlink(key);
            }
        }
        self.live[old] = 0;
        self.fill = old;
        self.swaps += 1;
    }

    fn unlink(&mut self, key: SpecKey) {
        if let Some(tokens) = self.by_page.get_mut(&key.page) {
            tokens.retain(|&t| t != key.token);
            if tokens.is_empty() {
                self.by_page.remove(&key.page);
            }
        }
    }

    fn remove(&mut self, key: &SpecKey) {
        if let Some(e) = self.entries.remove(key) {
            self.live[usize::from(e.half)] -= 1;
            self.unlink(*key);
        }
    }

    pub fn mark_ready(&mut self, key: &SpecKey) -> bool {
        match self.entries.get_mut(key) {
            Some(e) if e.state == PrefetchState::InFlight => {
                e.state = PrefetchState::Ready;
                true
            }
            _ => false,
        }
    }

    pub fn consume(&mut self, key: &SpecKey) -> Option<SpecEntry> {
        let e = self.entries.get_mut(key)?;
        e.state = PrefetchState::Consumed;
        Some(e.clone())
    }

    /// Marks every live copy of `page` invalid. They are dropped lazily.
    pub fn invalidate_page(&mut self, page: PageId) -> u32 {
        let Some(tokens) = self.by_page.get(&page) else {
            return 0;
        };
        let mut n = 0;
        for &token in tokens {
            if let Some(e) = self.entries.get_mut(&SpecKey { page, token }) {
                if matches!(e.state, PrefetchState::InFlight | PrefetchState::Ready) {
                    e.state = PrefetchState::Invalidated;
                    n += 1;
                }
            }
        }
        n
    }

    /// Drops every copy of `page` immediately (the page was freed).
    pub fn drop_page(&mut self, page: PageId) {
        if let Some(tokens) = self.by_page.remove(&page) {
            for token in tokens {
                let key = SpecKey { page, token };
                if let Some(e) = self.entries.remove(&key) {
                    self.live[usize::from(e.half)] -= 1;
                }
            }
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = &SpecEntry> {
        self.entries.values()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k(page: PageId, token: u32) -> SpecKey {
        SpecKey { page, token }
    }

    #[test]
    fn lifecycle() {
        let mut b = SpecBuffer::new(8);
        b.insert(k(1, 7), 0, 12, 0);
        assert!(b.is_live(&k(1, 7)));
        assert!(b.mark_ready(&k(1, 7)));
        assert_eq!(b.get(&k(1, 7)).unwrap().state, PrefetchState::Ready);
        b.consume(&k(1, 7));
        assert!(!b.is_live(&k(1, 7)));
    }

    #[test]
    fn invalidation_is_lazy() {
        let mut b = SpecBuffer::new(8);
        b.insert(k(1, 7), 0, 12, 0);
        b.insert(k(1, 8), 0, 12, 0);
        assert_eq!(b.invalidate_page(1), 2);
        assert_eq!(b.len(), 2);
        assert_eq!(b.get(&k(1, 8)).unwrap().state, PrefetchState::Invalidated);
    }

    #[test]
    fn halves_swap_and_discard_oldest() {
        let mut b = SpecBuffer::new(4);
        for t in 0..4 {
            b.insert(k(t, 0), 0, 1, 0);
        }
        assert_eq!(b.len(), 4);
        // Half 0 = {0,1}, half 1 = {2,3}; the fifth insert empties half 0.
        b.insert(k(4, 0), 0, 1, 0);
        assert_eq!(b.swaps, 2);
        assert!(b.get(&k(0, 0)).is_none() && b.get(&k(1, 0)).is_none());
        assert!(b.get(&k(2, 0)).is_some() && b.get(&k(4, 0)).is_some());
        assert!(b.len() <= b.capacity());
    }

    #[test]
    fn drop_page_removes_all_copies() {
        let mut b = SpecBuffer::new(8);
        b.insert(k(5, 1), 0, 1, 0);
        b.insert(k(5, 2), 0, 1, 0);
        b.insert(k(6, 1), 0, 1, 0);
        b.drop_page(5);
        assert_eq!(b.len(), 1);
        assert!(b.get(&k(5, 1)).is_none());
    }
}
