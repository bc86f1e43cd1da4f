//! Global scheduling of requests onto prefill/decoding instance pairs.
//!
//! The KVCache-centric policy evaluates every prefill instance twice over:
//! reuse only its local prefix ("cache-aware"), or pull the best remote prefix
//! first ("cache-aware and -balancing"). The remote branch is taken when the
//! best prefix in the cluster is more than `kvcache_balancing_threshold` times
//! the local one. Choosing a remote-branch instance replicates the hot prefix
//! onto it.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kvcache::{match_prefix, BlockKey, CachePool, Capacity, EvictionPolicy};
use crate::perf_model::{
    commit_transfer, decode_iteration_time, estimate_queue_time, estimate_transfer_time, prefill_duration,
    transfer_payload_time, PerfModelParams,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SloConfig {
    /// TTFT bound, ms.
    pub l_ttft: f64,
    /// TBT bound, ms per token.
    pub l_tbt: f64,
    pub ttft_multiplier: f64,
    pub tbt_multiplier: f64,
}

impl SloConfig {
    pub const TTFT_MULTIPLIER: f64 = 10.0;
    pub const TBT_MULTIPLIER: f64 = 5.0;

    /// Bounds as multiples of an uncontended request of `reference_input`
    /// tokens: TTFT covers the prefill plus the first decode iteration, TBT one
    /// single-request iteration.
    pub fn from_reference(perf: &PerfModelParams, reference_input: u64, ttft_multiplier: f64, tbt_multiplier: f64) -> Self {
        let tbt = decode_iteration_time(1, reference_input, perf).expect("batch of one");
        let ttft = prefill_duration(reference_input, 0, perf).expect("no prefix") + tbt;
        Self {
            l_ttft: ttft * ttft_multiplier,
            l_tbt: tbt * tbt_multiplier,
            ttft_multiplier,
            tbt_multiplier,
        }
    }

    /// 10x TTFT and 5x TBT over an uncontended reference request.
    pub fn paper_slo(perf: &PerfModelParams, reference_input: u64) -> Self {
        Self::from_reference(perf, reference_input, Self::TTFT_MULTIPLIER, Self::TBT_MULTIPLIER)
    }

    pub fn fixed(l_ttft: f64, l_tbt: f64) -> Self {
        Self {
            l_ttft,
            l_tbt,
            ttft_multiplier: 1.0,
            tbt_multiplier: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("l_ttft", self.l_ttft),
            ("l_tbt", self.l_tbt),
            ("ttft_multiplier", self.ttft_multiplier),
            ("tbt_multiplier", self.tbt_multiplier),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::validation(field, format!("must be > 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConductorConfig {
    pub kvcache_balancing_threshold: f64,
    pub block_size: u32,
}

impl Default for ConductorConfig {
    fn default() -> Self {
        Self {
            kvcache_balancing_threshold: 2.0,
            block_size: crate::trace::TRACE_BLOCK_SIZE,
        }
    }
}

impl ConductorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kvcache_balancing_threshold.is_finite() && self.kvcache_balancing_threshold > 1.0) {
            return Err(Error::validation(
                "kvcache_balancing_threshold",
                format!("must be > 1, got {}", self.kvcache_balancing_threshold),
            ));
        }
        if self.block_size == 0 {
            return Err(Error::validation("block_size", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerChoice {
    Random,
    LoadBalance,
    CacheAware,
    KvcacheCentric,
}

impl SchedulerChoice {
    pub const ALL: [SchedulerChoice; 4] = [
        SchedulerChoice::Random,
        SchedulerChoice::LoadBalance,
        SchedulerChoice::CacheAware,
        SchedulerChoice::KvcacheCentric,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SchedulerChoice::Random => "random",
            SchedulerChoice::LoadBalance => "load_balance",
            SchedulerChoice::CacheAware => "cache_aware",
            SchedulerChoice::KvcacheCentric => "kvcache_centric",
        }
    }
}

impl fmt::Display for SchedulerChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SchedulerChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s.replace('-', "_"))
            .ok_or_else(|| Error::validation("scheduler", format!("unknown scheduler `{s}`")))
    }
}

/// Which SLO checks the conductor enforces when it decides.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SloGate {
    Both,
    TtftOnly,
    Off,
}

// ---------------------------------------------------------------------------
// Instance state
// ---------------------------------------------------------------------------

/// Prefill work waiting on an instance.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefillJob {
    pub request: usize,
    pub input_len: u32,
    /// Reused prefix in blocks.
    pub prefix_blocks: usize,
    pub duration: f64,
    /// Earliest start (a pending replica must land first).
    pub ready_at: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunningPrefill {
    pub job: PrefillJob,
    pub started: f64,
    pub ends_at: f64,
}

#[derive(Debug, Clone)]
pub struct PrefillInstance {
    pub id: usize,
    pub cache: CachePool,
    pub queue: VecDeque<PrefillJob>,
    pub running: Option<RunningPrefill>,
    /// Outbound KVCache link is reserved until this time.
    pub sender_busy_until: f64,
}

impl PrefillInstance {
    pub fn new(id: usize, capacity: Capacity, policy: EvictionPolicy) -> Self {
        Self {
            id,
            cache: CachePool::new(capacity, policy),
            queue: VecDeque::new(),
            running: None,
            sender_busy_until: 0.0,
        }
    }

    /// Remaining prefill time of the in-flight job followed by every queued job.
    pub fn remaining_work(&self, now: f64) -> Vec<f64> {
        self.running
            .iter()
            .map(|r| (r.ends_at - now).max(0.0))
            .chain(self.queue.iter().map(|j| j.duration))
            .collect()
    }

    pub fn queue_time(&self, now: f64) -> f64 {
        estimate_queue_time(&self.remaining_work(now))
    }

    pub fn is_idle(&self) -> bool {
        self.running.is_none() && self.queue.is_empty()
    }
}

/// One request resident in a decoding batch.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeSlot {
    pub request: usize,
    pub remaining: u32,
    pub kv_tokens: u64,
    pub joined_at: f64,
}

#[derive(Debug, Clone)]
pub struct DecodeInstance {
    pub id: usize,
    pub batch: Vec<DecodeSlot>,
    /// Arrived KVCache waiting for the next iteration boundary.
    pub pending: VecDeque<DecodeSlot>,
    /// Requests whose KVCache is streaming to this instance.
    pub inbound: usize,
    pub inbound_kv: u64,
    /// Optional VRAM bound on resident KV tokens.
    pub kv_capacity: Option<u64>,
    /// End of the iteration in progress.
    pub iteration_end: Option<f64>,
}

impl DecodeInstance {
    pub fn new(id: usize, kv_capacity: Option<u64>) -> Self {
        Self {
            id,
            batch: Vec::new(),
            pending: VecDeque::new(),
            inbound: 0,
            inbound_kv: 0,
            kv_capacity,
            iteration_end: None,
        }
    }

    pub fn resident_kv(&self) -> u64 {
        self.batch.iter().map(|s| s.kv_tokens).sum()
    }

    /// Batch size and KV tokens including everything already committed here.
    pub fn committed_load(&self) -> (usize, u64) {
        let b = self.batch.len() + self.pending.len() + self.inbound;
        let k = self.resident_kv() + self.pending.iter().map(|s| s.kv_tokens).sum::<u64>() + self.inbound_kv;
        (b, k)
    }

    /// Iteration time of the batch as it stands, if any.
    pub fn current_iteration_time(&self, perf: &PerfModelParams) -> Option<f64> {
        if self.batch.is_empty() {
            None
        } else {
            decode_iteration_time(self.batch.len(), self.resident_kv(), perf).ok()
        }
    }
}

// ---------------------------------------------------------------------------
// Decisions
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    TtftSlo,
    TbtSlo,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RejectReason::TtftSlo => "TTFT_SLO",
            RejectReason::TbtSlo => "TBT_SLO",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Accept {
        prefill: usize,
        decode: usize,
        /// Hot-spot replication source.
        migrate_from: Option<usize>,
    },
    Reject(RejectReason),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchedulingDecision {
    pub outcome: Outcome,
    /// Chosen (or, when rejected, best) instances.
    pub prefill: usize,
    pub decode: usize,
    pub estimated_ttft: f64,
    pub estimated_tbt: f64,
    /// Prefix the prefill will reuse, in blocks.
    pub prefix_blocks: usize,
    pub local_prefix_blocks: usize,
    pub best_prefix_blocks: usize,
    pub best_instance: usize,
}

impl SchedulingDecision {
    pub fn is_accepted(&self) -> bool {
        matches!(self.outcome, Outcome::Accept { .. })
    }

    pub fn migrate_from(&self) -> Option<usize> {
        match self.outcome {
            Outcome::Accept { migrate_from, .. } => migrate_from,
            Outcome::Reject(_) => None,
        }
    }
}

/// What the conductor needs to know about a request.
#[derive(Debug, Clone, Copy)]
pub struct ScheduleInput<'a> {
    pub input_len: u32,
    pub blocks: &'a [BlockKey],
}

/// Longest prefix match across the pool; ties go to the lowest instance id.
pub fn find_best_prefix_match(pool: &[PrefillInstance], blocks: &[BlockKey]) -> Result<(usize, usize)> {
    if pool.is_empty() {
        return Err(Error::validation("prefill_pool", "empty"));
    }
    let mut best = (0, pool[0].id);
    for inst in pool {
        let m = match_prefix(&inst.cache, blocks);
        if m > best.0 {
            best = (m, inst.id);
        }
    }
    Ok(best)
}

/// Least predicted TBT after adding a request with `kv_tokens` of KVCache.
pub fn select_decoding_instance(pool: &[DecodeInstance], kv_tokens: u64, perf: &PerfModelParams) -> Result<(usize, f64)> {
    if pool.is_empty() {
        return Err(Error::validation("decode_pool", "empty"));
    }
    let mut best: Option<(usize, f64)> = None;
    for inst in pool {
        let (b, k) = inst.committed_load();
        let tbt = decode_iteration_time(b + 1, k + kv_tokens, perf)?;
        if best.is_none_or(|(_, t)| tbt < t) {
            best = Some((inst.id, tbt));
        }
    }
    Ok(best.expect("non-empty pool"))
}

pub(crate) fn prefix_tokens(blocks: usize, block_size: u32, input_len: u32) -> u64 {
    (blocks as u64 * block_size as u64).min(input_len as u64)
}

/// Whether an instance with `local` matched blocks takes the remote branch.
/// A zero local prefix counts as an infinite ratio; equality stays local.
pub fn prefers_remote(best: usize, local: usize, threshold: f64) -> bool {
    best > 0 && (local == 0 || best as f64 / local as f64 > threshold)
}

/// Estimated TTFT of one prefill instance under the branch rules.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrefillCandidate {
    pub instance: usize,
    pub local_prefix_blocks: usize,
    pub remote: bool,
    pub ttft: f64,
}

#[allow(clippy::too_many_arguments)]
fn candidate(
    inst: &PrefillInstance,
    req: ScheduleInput<'_>,
    best: (usize, usize),
    best_sender_busy: f64,
    allow_remote: bool,
    cfg: &ConductorConfig,
    perf: &PerfModelParams,
    now: f64,
) -> Result<PrefillCandidate> {
    let local = match_prefix(&inst.cache, req.blocks);
    let queue = inst.queue_time(now);
    let l = req.input_len as u64;
    let local_tokens = prefix_tokens(local, cfg.block_size, req.input_len);
    let remote = allow_remote && prefers_remote(best.0, local, cfg.kvcache_balancing_threshold);
    let ttft = if remote {
        let best_tokens = prefix_tokens(best.0, cfg.block_size, req.input_len);
        let transfer = estimate_transfer_time(best_tokens - local_tokens, perf, best_sender_busy, now);
        transfer + queue + prefill_duration(l, best_tokens, perf)?
    } else {
        queue + prefill_duration(l, local_tokens, perf)?
    };
    Ok(PrefillCandidate {
        instance: inst.id,
        local_prefix_blocks: local,
        remote,
        ttft,
    })
}

/// KVCache-centric scheduling with both SLO checks enforced.
pub fn schedule(
    req: ScheduleInput<'_>,
    prefill_pool: &[PrefillInstance],
    decode_pool: &[DecodeInstance],
    slo: &SloConfig,
    cfg: &ConductorConfig,
    perf: &PerfModelParams,
    now: f64,
) -> Result<SchedulingDecision> {
    // the centric policy never draws from the RNG
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    schedule_with(
        SchedulerChoice::KvcacheCentric,
        SloGate::Both,
        req,
        prefill_pool,
        decode_pool,
        slo,
        cfg,
        perf,
        now,
        &mut rng,
    )
}

/// Schedules `req` under any of the prefill selection policies.
#[allow(clippy::too_many_arguments)]
pub fn schedule_with<R: Rng + ?Sized>(
    choice: SchedulerChoice,
    gate: SloGate,
    req: ScheduleInput<'_>,
    prefill_pool: &[PrefillInstance],
    decode_pool: &[DecodeInstance],
    slo: &SloConfig,
    cfg: &ConductorConfig,
    perf: &PerfModelParams,
    now: f64,
    rng: &mut R,
) -> Result<SchedulingDecision> {
    let best = find_best_prefix_match(prefill_pool, req.blocks)?;
    let best_sender_busy = prefill_pool
        .iter()
        .find(|i| i.id == best.1)
        .map_or(0.0, |i| i.sender_busy_until);
    let allow_remote = choice == SchedulerChoice::KvcacheCentric;
    let candidates = prefill_pool
        .iter()
        .map(|inst| candidate(inst, req, best, best_sender_busy, allow_remote, cfg, perf, now))
        .collect::<Result<Vec<_>>>()?;

    let chosen = match choice {
        SchedulerChoice::Random => candidates[rng.random_range(0..candidates.len())],
        SchedulerChoice::LoadBalance => {
            let mut pick = 0;
            let mut least = f64::INFINITY;
            for (i, inst) in prefill_pool.iter().enumerate() {
                let q = inst.queue_time(now);
                if q < least {
                    least = q;
                    pick = i;
                }
            }
            candidates[pick]
        }
        SchedulerChoice::CacheAware | SchedulerChoice::KvcacheCentric => {
            let mut pick: Option<PrefillCandidate> = None;
            for c in &candidates {
                if pick.is_none_or(|p| p.ttft > c.ttft) {
                    pick = Some(*c);
                }
            }
            pick.expect("non-empty pool")
        }
    };

    let (decode, tbt) = select_decoding_instance(decode_pool, req.input_len as u64, perf)?;
    let rejection = match gate {
        SloGate::Off => None,
        _ if chosen.ttft > slo.l_ttft => Some(RejectReason::TtftSlo),
        SloGate::Both if tbt > slo.l_tbt => Some(RejectReason::TbtSlo),
        _ => None,
    };
    let migrate_from = chosen.remote.then_some(best.1);
    let outcome = match rejection {
        Some(reason) => Outcome::Reject(reason),
        None => Outcome::Accept {
            prefill: chosen.instance,
            decode,
            migrate_from,
        },
    };
    Ok(SchedulingDecision {
        outcome,
        prefill: chosen.instance,
        decode,
        estimated_ttft: chosen.ttft,
        estimated_tbt: tbt,
        prefix_blocks: if chosen.remote { best.0 } else { chosen.local_prefix_blocks },
        local_prefix_blocks: chosen.local_prefix_blocks,
        best_prefix_blocks: best.0,
        best_instance: best.1,
    })
}

// ---------------------------------------------------------------------------
// Hot-spot replication
// ---------------------------------------------------------------------------

/// A committed replication of a prefix range from one prefill instance to another.
#[derive(Debug, Clone, PartialEq)]
pub struct MigrationPlan {
    pub source: usize,
    pub dest: usize,
    pub blocks: Vec<BlockKey>,
    pub first_position: u32,
    pub completes_at: f64,
}

/// Reserves the source's link for copying `blocks` (sitting at
/// `first_position..` within the request) and returns the plan, or `None`
/// when there is nothing to copy.
///
/// Fails when the source has already evicted one of the blocks; the caller
/// then falls back to the local prefix.
pub fn plan_migration(
    source: &mut PrefillInstance,
    dest: usize,
    blocks: &[BlockKey],
    first_position: u32,
    tokens: u64,
    perf: &PerfModelParams,
    now: f64,
) -> Result<Option<MigrationPlan>> {
    if blocks.is_empty() {
        return Ok(None);
    }
    if let Some(missing) = blocks.iter().find(|b| !source.cache.contains(**b)) {
        return Err(Error::MigrationAborted {
            source_id: source.id,
            block: missing.0,
        });
    }
    let payload = transfer_payload_time(tokens, perf);
    let completes_at = commit_transfer(&mut source.sender_busy_until, now, payload);
    Ok(Some(MigrationPlan {
        source: source.id,
        dest,
        blocks: blocks.to_vec(),
        first_position,
        completes_at,
    }))
}

/// Lands a replica in the destination cache; returns the blocks it evicted.
/// The source keeps its copy.
pub fn apply_migration(dest: &mut PrefillInstance, plan: &MigrationPlan, clock: u64) -> Vec<BlockKey> {
    debug_assert_eq!(dest.id, plan.dest);
    dest.cache.insert_replica(&plan.blocks, plan.first_position, clock)
}
