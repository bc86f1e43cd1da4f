//! Paged KVCache model: prefix-chained block keys, capacity-bounded pools with
//! pluggable eviction, hit accounting and block popularity statistics.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::trace::RequestRecord;

/// A block of KVCache identified by its prefix-chained hash.
///
/// Two equal keys denote the same block tokens *and* the same preceding
/// tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BlockKey(pub u64);

impl From<u64> for BlockKey {
    fn from(v: u64) -> Self {
        BlockKey(v)
    }
}

pub fn keys_of(ids: &[u64]) -> Vec<BlockKey> {
    ids.iter().copied().map(BlockKey).collect()
}

/// Chains token blocks into prefix hashes.
pub struct ChainHasher;

impl ChainHasher {
    /// Hash of `tokens` concatenated with the key of the previous block.
    pub fn chain(prev: Option<BlockKey>, tokens: &[u32]) -> BlockKey {
        let mut h = Sha256::new();
        match prev {
            Some(BlockKey(p)) => {
                h.update([1u8]);
                h.update(p.to_le_bytes());
            }
            None => h.update([0u8]),
        }
        for t in tokens {
            h.update(t.to_le_bytes());
        }
        let digest = h.finalize();
        let mut word = [0u8; 8];
        word.copy_from_slice(&digest[..8]);
        BlockKey(u64::from_le_bytes(word))
    }

    /// Splits `tokens` into `block_size` blocks (last one may be partial) and
    /// returns one chained key per block.
    pub fn prefix_hash(tokens: &[u32], block_size: usize) -> Vec<BlockKey> {
        assert!(block_size > 0, "block_size must be positive");
        let mut prev = None;
        tokens
            .chunks(block_size)
            .map(|chunk| {
                let k = Self::chain(prev, chunk);
                prev = Some(k);
                k
            })
            .collect()
    }
}

/// Anything that can answer "is this block resident?".
pub trait BlockIndex {
    fn contains_block(&self, key: BlockKey) -> bool;
}

impl BlockIndex for HashSet<BlockKey> {
    fn contains_block(&self, key: BlockKey) -> bool {
        self.contains(&key)
    }
}

impl BlockIndex for BTreeSet<BlockKey> {
    fn contains_block(&self, key: BlockKey) -> bool {
        self.contains(&key)
    }
}

/// Length of the longest resident prefix of `blocks`, in blocks.
pub fn match_prefix<I: BlockIndex + ?Sized>(index: &I, blocks: &[BlockKey]) -> usize {
    blocks.iter().take_while(|&&b| index.contains_block(b)).count()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvictionPolicy {
    Lru,
    Lfu,
    /// Evicts blocks that sit later in their requests first.
    LengthAware,
}

impl EvictionPolicy {
    pub const ALL: [EvictionPolicy; 3] = [EvictionPolicy::Lru, EvictionPolicy::Lfu, EvictionPolicy::LengthAware];

    pub fn name(self) -> &'static str {
        match self {
            EvictionPolicy::Lru => "LRUCache",
            EvictionPolicy::Lfu => "LFUCache",
            EvictionPolicy::LengthAware => "LengthAwareCache",
        }
    }
}

impl fmt::Display for EvictionPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EvictionPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "lru" | "lrucache" => Ok(EvictionPolicy::Lru),
            "lfu" | "lfucache" => Ok(EvictionPolicy::Lfu),
            "lengthaware" | "lengthawarecache" => Ok(EvictionPolicy::LengthAware),
            _ => Err(Error::validation("policy", format!("unknown eviction policy `{s}`"))),
        }
    }
}

/// Block capacity of a pool; `None` is unbounded.
pub type Capacity = Option<usize>;

pub fn capacity_label(c: Capacity) -> String {
    c.map_or_else(|| "Inf".to_string(), |n| n.to_string())
}

pub fn parse_capacity(s: &str) -> Result<Capacity> {
    let t = s.trim();
    if t.eq_ignore_ascii_case("inf") || t.eq_ignore_ascii_case("unbounded") {
        return Ok(None);
    }
    match t.replace('_', "").parse::<usize>() {
        Ok(0) => Err(Error::validation("capacity", "must be >= 1")),
        Ok(n) => Ok(Some(n)),
        Err(_) => Err(Error::validation("capacity", format!("not a block count: `{s}`"))),
    }
}

#[derive(Debug, Clone, Copy)]
struct BlockMeta {
    last_use: u64,
    uses: u64,
    position: u32,
}

type Rank = (u64, u64, u64, BlockKey);

/// Result of presenting one request's blocks to a pool.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AdmitOutcome {
    pub hits: u64,
    pub misses: u64,
    pub evicted: Vec<BlockKey>,
    /// The request had more blocks than the pool holds; only a prefix was kept.
    pub truncated: bool,
}

/// A capacity-bounded set of resident blocks with an eviction policy.
#[derive(Debug, Clone)]
pub struct CachePool {
    capacity: Capacity,
    policy: EvictionPolicy,
    resident: HashMap<BlockKey, BlockMeta>,
    // evictable blocks, cheapest victim first
    order: BTreeSet<Rank>,
    hits: u64,
    misses: u64,
}

impl CachePool {
    pub fn new(capacity: Capacity, policy: EvictionPolicy) -> Self {
        assert!(capacity != Some(0), "cache capacity must be >= 1 block");
        Self {
            capacity,
            policy,
            resident: HashMap::new(),
            order: BTreeSet::new(),
            hits: 0,
            misses: 0,
        }
    }

    pub fn unbounded(policy: EvictionPolicy) -> Self {
        Self::new(None, policy)
    }

    pub fn capacity(&self) -> Capacity {
        self.capacity
    }

    pub fn policy(&self) -> EvictionPolicy {
        self.policy
    }

    pub fn len(&self) -> usize {
        self.resident.len()
    }

    pub fn is_empty(&self) -> bool {
        self.resident.is_empty()
    }

    pub fn contains(&self, key: BlockKey) -> bool {
        self.resident.contains_key(&key)
    }

    pub fn hits(&self) -> u64 {
        self.hits
    }

    pub fn misses(&self) -> u64 {
        self.misses
    }

    pub fn hit_ratio(&self) -> f64 {
        let total = self.hits + self.misses;
        if total == 0 {
            0.0
        } else {
            self.hits as f64 / total as f64
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = BlockKey> + '_ {
        self.resident.keys().copied()
    }

    fn rank(&self, key: BlockKey, m: &BlockMeta) -> Rank {
        let late = (u32::MAX - m.position) as u64;
        match self.policy {
            // same-clock ties: later positions go first so the prefix survives
            EvictionPolicy::Lru => (m.last_use, late, 0, key),
            EvictionPolicy::Lfu => (m.uses, m.last_use, late, key),
            EvictionPolicy::LengthAware => (late, m.uses, m.last_use, key),
        }
    }

    /// Presents a request's blocks (positions `0..`) at `clock`.
    pub fn admit_and_touch(&mut self, blocks: &[BlockKey], clock: u64) -> AdmitOutcome {
        self.admit_at(blocks, 0, clock)
    }

    /// Like [`admit_and_touch`](Self::admit_and_touch) for a block range whose
    /// first element sits at `first_position` within its request.
    ///
    /// Every reference counts one hit or miss. Hit blocks are touched, missing
    /// blocks are inserted, and victims are never drawn from the blocks being
    /// admitted. A request longer than the capacity keeps only its first
    /// `capacity` blocks.
    pub fn admit_at(&mut self, blocks: &[BlockKey], first_position: u32, clock: u64) -> AdmitOutcome {
        let limit = self.capacity.map_or(blocks.len(), |c| c.min(blocks.len()));
        let mut out = AdmitOutcome {
            truncated: limit < blocks.len(),
            ..Default::default()
        };
        let mut pinned: Vec<BlockKey> = Vec::with_capacity(limit);
        let mut pinned_set: HashSet<BlockKey> = HashSet::with_capacity(limit);

        for (i, &key) in blocks.iter().enumerate() {
            let position = first_position.saturating_add(i as u32);
            if let Some(meta) = self.resident.get(&key).copied() {
                out.hits += 1;
                if !pinned_set.contains(&key) {
                    let old = self.rank(key, &meta);
                    self.order.remove(&old);
                }
                let meta = BlockMeta {
                    last_use: clock,
                    uses: meta.uses + 1,
                    position,
                };
                self.resident.insert(key, meta);
                if pinned_set.contains(&key) {
                    continue;
                }
                if i < limit {
                    pinned_set.insert(key);
                    pinned.push(key);
                } else {
                    let r = self.rank(key, &meta);
                    self.order.insert(r);
                }
            } else {
                out.misses += 1;
                if i >= limit {
                    continue;
                }
                if let Some(cap) = self.capacity {
                    while self.resident.len() >= cap {
                        let Some(victim) = self.order.pop_first() else {
                            break;
                        };
                        self.resident.remove(&victim.3);
                        out.evicted.push(victim.3);
                    }
                }
                self.resident.insert(
                    key,
                    BlockMeta {
                        last_use: clock,
                        uses: 1,
                        position,
                    },
                );
                pinned_set.insert(key);
                pinned.push(key);
            }
        }
        for key in pinned {
            let meta = self.resident[&key];
            let r = self.rank(key, &meta);
            self.order.insert(r);
        }
        self.hits += out.hits;
        self.misses += out.misses;
        debug_assert!(self.capacity.is_none_or(|c| self.resident.len() <= c));
        out
    }

    /// Inserts replicated blocks without counting them as request references.
    pub fn insert_replica(&mut self, blocks: &[BlockKey], first_position: u32, clock: u64) -> Vec<BlockKey> {
        let (h, m) = (self.hits, self.misses);
        let out = self.admit_at(blocks, first_position, clock);
        self.hits = h;
        self.misses = m;
        out.evicted
    }
}

impl BlockIndex for CachePool {
    fn contains_block(&self, key: BlockKey) -> bool {
        self.contains(key)
    }
}

/// Replays `trace` through one global pool per capacity and reports the
/// block-level hit ratio of each.
pub fn policy_sweep(
    trace: &[RequestRecord],
    policy: EvictionPolicy,
    capacities: &[Capacity],
) -> Result<Vec<(Capacity, f64)>> {
    if capacities.is_empty() {
        return Err(Error::validation("capacities", "at least one capacity required"));
    }
    if capacities.contains(&Some(0)) {
        return Err(Error::validation("capacities", "capacity must be >= 1"));
    }
    Ok(capacities
        .iter()
        .map(|&cap| (cap, replay_hit_ratio(trace, policy, cap)))
        .collect())
}

pub fn replay_hit_ratio(trace: &[RequestRecord], policy: EvictionPolicy, capacity: Capacity) -> f64 {
    let mut pool = CachePool::new(capacity, policy);
    let mut keys = Vec::new();
    for (clock, r) in trace.iter().enumerate() {
        keys.clear();
        keys.extend(r.hash_ids.iter().map(|&h| BlockKey(h)));
        pool.admit_and_touch(&keys, clock as u64);
    }
    pool.hit_ratio()
}

/// Per distinct block, the number of requests that reference it after the
/// first; returned as an empirical CDF `(hit_count, fraction of blocks with
/// at most that many hits)`.
pub fn popularity_cdf(trace: &[RequestRecord]) -> Vec<(u64, f64)> {
    let mut refs: HashMap<u64, u64> = HashMap::new();
    for r in trace {
        let mut seen = HashSet::with_capacity(r.hash_ids.len());
        for &id in &r.hash_ids {
            if seen.insert(id) {
                *refs.entry(id).or_default() += 1;
            }
        }
    }
    let mut hits: Vec<u64> = refs.into_values().map(|n| n - 1).collect();
    hits.sort_unstable();
    let total = hits.len() as f64;
    let mut cdf: Vec<(u64, f64)> = Vec::new();
    for (i, h) in hits.iter().enumerate() {
        let frac = (i + 1) as f64 / total;
        match cdf.last_mut() {
            Some(last) if last.0 == *h => last.1 = frac,
            _ => cdf.push((*h, frac)),
        }
    }
    cdf
}

/// Fraction of distinct blocks never hit, read off a popularity CDF.
pub fn unused_block_fraction(cdf: &[(u64, f64)]) -> f64 {
    match cdf.first() {
        Some(&(0, f)) => f,
        _ => 0.0,
    }
}
