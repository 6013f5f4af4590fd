use serde::{Deserialize, Serialize};

/// Sentinel for "never requested again".
pub const NEVER: usize = usize::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    Lru,
    Lfu,
    Fifo,
    Belady,
}

impl std::str::FromStr for Policy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "lru" => Ok(Policy::Lru),
            "lfu" => Ok(Policy::Lfu),
            "fifo" => Ok(Policy::Fifo),
            "belady" | "min" => Ok(Policy::Belady),
            other => Err(format!("unknown policy {other:?}")),
        }
    }
}

impl std::fmt::Display for Policy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Policy::Lru => "lru",
            Policy::Lfu => "lfu",
            Policy::Fifo => "fifo",
            Policy::Belady => "belady",
        })
    }
}

/// Resident set and replacement metadata of one layer's expert cache.
///
/// Metadata arrays are indexed by expert id. `last_use`, `admitted` and
/// `next_use` are only meaningful for resident experts; `freq` counts
/// requests since the last reset, resident or not.
#[derive(Debug, Clone)]
pub struct LayerCache {
    capacity: usize,
    policy: Policy,
    resident: Vec<usize>,
    in_cache: Vec<bool>,
    last_use: Vec<u64>,
    admitted: Vec<u64>,
    freq: Vec<u64>,
    next_use: Vec<usize>,
    clock: u64,
    evictions: u64,
}

impl LayerCache {
    pub fn new(n_experts: usize, capacity: usize, policy: Policy) -> Self {
        Self {
            capacity,
            policy,
            resident: Vec::with_capacity(capacity),
            in_cache: vec![false; n_experts],
            last_use: vec![0; n_experts],
            admitted: vec![0; n_experts],
            freq: vec![0; n_experts],
            next_use: vec![NEVER; n_experts],
            clock: 0,
            evictions: 0,
        }
    }

    pub fn reset(&mut self) {
        for &e in &self.resident {
            self.in_cache[e] = false;
        }
        self.resident.clear();
        self.freq.iter_mut().for_each(|f| *f = 0);
    }

    pub fn contains(&self, e: usize) -> bool {
        self.in_cache[e]
    }

    pub fn len(&self) -> usize {
        self.resident.len()
    }

    pub fn is_empty(&self) -> bool {
        self.resident.is_empty()
    }

    pub fn evictions(&self) -> u64 {
        self.evictions
    }

    /// Resident experts in ascending id order.
    pub fn resident_sorted(&self) -> Vec<usize> {
        let mut r = self.resident.clone();
        r.sort_unstable();
        r
    }

    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    /// Replacement victim among residents not in `protected`.
    fn victim(&self, protected: &[usize]) -> Option<usize> {
        let candidates = self.resident.iter().copied().filter(|e| !protected.contains(e));
        match self.policy {
            Policy::Lru => candidates.min_by_key(|&e| self.last_use[e]),
            Policy::Fifo => candidates.min_by_key(|&e| self.admitted[e]),
            Policy::Lfu => candidates.min_by_key(|&e| (self.freq[e], self.last_use[e], e)),
            Policy::Belady => {
                candidates.min_by_key(|&e| (std::cmp::Reverse(self.next_use[e]), e))
            }
        }
    }

    pub fn evict(&mut self, e: usize) {
        if let Some(pos) = self.resident.iter().position(|&x| x == e) {
            self.resident.swap_remove(pos);
            self.in_cache[e] = false;
            self.evictions += 1;
        }
    }

    fn admit(&mut self, e: usize, now: u64, next_use: usize) {
        self.resident.push(e);
        self.in_cache[e] = true;
        self.last_use[e] = now;
        self.admitted[e] = now;
        self.next_use[e] = next_use;
    }

    /// Serve one step's deduplicated request `unique` (order-preserving).
    /// Hits must be counted by the caller beforehand. Requested experts are
    /// never evicted within the step; when capacity runs out with only
    /// requested experts resident, the remaining misses are used and dropped.
    /// `next_uses[i]` is the next request step of `unique[i]` (Belady only).
    pub fn serve(&mut self, unique: &[usize], next_uses: Option<&[usize]>) {
        for (i, &e) in unique.iter().enumerate() {
            let now = self.tick();
            let nu = next_uses.map_or(NEVER, |n| n[i]);
            self.freq[e] += 1;
            if self.in_cache[e] {
                self.last_use[e] = now;
                self.next_use[e] = nu;
                continue;
            }
            if self.resident.len() >= self.capacity {
                match self.victim(unique) {
                    Some(v) => self.evict(v),
                    None => continue,
                }
            }
            self.admit(e, now, nu);
        }
    }

    /// Insert an expert that was not requested (prefetch), evicting by policy
    /// among all residents if full.
    pub fn insert_unrequested(&mut self, e: usize, next_use: usize) {
        if self.in_cache[e] || self.capacity == 0 {
            return;
        }
        let now = self.tick();
        if self.resident.len() >= self.capacity {
            if let Some(v) = self.victim(&[]) {
                self.evict(v);
            }
        }
        self.admit(e, now, next_use);
    }
}
