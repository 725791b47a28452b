use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;

/// Fully associative LRU set with a fixed entry capacity.
#[derive(Debug, Clone)]
pub struct LruSet<K> {
    capacity: usize,
    clock: u64,
    stamp: HashMap<K, u64>,
    order: BTreeMap<u64, K>,
}

impl<K: Copy + Eq + Hash> LruSet<K> {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            clock: 0,
            stamp: HashMap::new(),
            order: BTreeMap::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.stamp.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stamp.is_empty()
    }

    pub fn contains(&self, k: &K) -> bool {
        self.stamp.contains_key(k)
    }

    /// Marks `k` most recently used. Returns false if absent.
    pub fn touch(&mut self, k: K) -> bool {
        let Some(old) = self.stamp.get(&k).copied() else {
            return false;
        };
        self.order.remove(&old);
        self.clock += 1;
        self.order.insert(self.clock, k);
        self.stamp.insert(k, self.clock);
        true
    }

    /// Inserts or refreshes `k`; returns the evicted victim if the set was full.
    pub fn insert(&mut self, k: K) -> Option<K> {
        if self.touch(k) {
            return None;
        }
        let victim = if self.capacity > 0 && self.stamp.len() >= self.capacity {
            self.pop_lru()
        } else {
            None
        };
        if self.capacity == 0 {
            return Some(k);
        }
        self.clock += 1;
        self.order.insert(self.clock, k);
        self.stamp.insert(k, self.clock);
        victim
    }

    pub fn remove(&mut self, k: &K) -> bool {
        match self.stamp.remove(k) {
            Some(s) => {
                self.order.remove(&s);
                true
            }
            None => false,
        }
    }

    pub fn pop_lru(&mut self) -> Option<K> {
        let (_, k) = self.order.pop_first()?;
        self.stamp.remove(&k);
        Some(k)
    }

    /// Least recently used entries, oldest first.
    pub fn oldest(&self, n: usize) -> Vec<K> {
        self.order.values().take(n).copied().collect()
    }
}
