//! Reference implementations used as test oracles. Deliberately naive: linear
//! scans over plain vectors, no shared code with the library's data structures.

#![allow(dead_code)]

use std::collections::{HashMap, HashSet};

use kvsched::conductor::{ConductorConfig, PrefillInstance, PrefillJob, RunningPrefill};
use kvsched::kvcache::{BlockKey, Capacity, CachePool, EvictionPolicy};
use kvsched::perf_model::{estimate_transfer_time, prefill_duration, PerfModelParams};
use kvsched::trace::RequestRecord;
use rand::Rng;

#[derive(Debug, Clone, Copy)]
struct Entry {
    key: u64,
    last_use: u64,
    uses: u64,
    position: u32,
}

/// Which of two resident blocks goes first under `policy`.
fn evict_before(policy: EvictionPolicy, a: &Entry, b: &Entry) -> bool {
    // later positions are evicted first among otherwise equal blocks
    let key_a = match policy {
        EvictionPolicy::Lru => (a.last_use, u64::MAX - a.position as u64, 0, a.key),
        EvictionPolicy::Lfu => (a.uses, a.last_use, u64::MAX - a.position as u64, a.key),
        EvictionPolicy::LengthAware => (u64::MAX - a.position as u64, a.uses, a.last_use, a.key),
    };
    let key_b = match policy {
        EvictionPolicy::Lru => (b.last_use, u64::MAX - b.position as u64, 0, b.key),
        EvictionPolicy::Lfu => (b.uses, b.last_use, u64::MAX - b.position as u64, b.key),
        EvictionPolicy::LengthAware => (u64::MAX - b.position as u64, b.uses, b.last_use, b.key),
    };
    key_a < key_b
}

pub struct NaiveCache {
    capacity: Capacity,
    policy: EvictionPolicy,
    entries: Vec<Entry>,
    pub hits: u64,
    pub misses: u64,
}

impl NaiveCache {
    pub fn new(capacity: Capacity, policy: EvictionPolicy) -> Self {
        Self {
            capacity,
            policy,
            entries: Vec::new(),
            hits: 0,
            misses: 0,
        }
    }

    pub fn contains(&self, key: u64) -> bool {
        self.entries.iter().any(|e| e.key == key)
    }

    pub fn keys(&self) -> Vec<u64> {
        let mut k: Vec<u64> = self.entries.iter().map(|e| e.key).collect();
        k.sort_unstable();
        k
    }

    /// One request's blocks at `clock`. Blocks already handled in this call are
    /// never evicted; only the first `capacity` blocks of an oversized request
    /// are inserted.
    pub fn admit(&mut self, blocks: &[u64], clock: u64) {
        let limit = self.capacity.map_or(blocks.len(), |c| c.min(blocks.len()));
        let mut protected: Vec<u64> = Vec::new();
        for (i, &key) in blocks.iter().enumerate() {
            let position = i as u32;
            if let Some(e) = self.entries.iter_mut().find(|e| e.key == key) {
                self.hits += 1;
                e.last_use = clock;
                e.uses += 1;
                e.position = position;
                if i < limit {
                    protected.push(key);
                }
                continue;
            }
            self.misses += 1;
            if i >= limit {
                continue;
            }
            if let Some(cap) = self.capacity {
                while self.entries.len() >= cap {
                    let mut victim: Option<usize> = None;
                    for (j, e) in self.entries.iter().enumerate() {
                        if protected.contains(&e.key) {
                            continue;
                        }
                        if victim.is_none_or(|v| evict_before(self.policy, e, &self.entries[v])) {
                            victim = Some(j);
                        }
                    }
                    match victim {
                        Some(j) => {
                            self.entries.remove(j);
                        }
                        None => break,
                    }
                }
            }
            self.entries.push(Entry {
                key,
                last_use: clock,
                uses: 1,
                position,
            });
            protected.push(key);
        }
    }

    pub fn hit_ratio(&self) -> f64 {
        let total = self.hits + self.misses;
        if total == 0 {
            0.0
        } else {
            self.hits as f64 / total as f64
        }
    }
}

pub fn naive_hit_ratio(trace: &[RequestRecord], policy: EvictionPolicy, capacity: Capacity) -> f64 {
    let mut c = NaiveCache::new(capacity, policy);
    for (clock, r) in trace.iter().enumerate() {
        c.admit(&r.hash_ids, clock as u64);
    }
    c.hit_ratio()
}

/// `(hit_count, fraction of distinct blocks with at most that many hits)`,
/// where a block's hit count is the number of requests referencing it after
/// the first.
pub fn naive_popularity_cdf(trace: &[RequestRecord]) -> Vec<(u64, f64)> {
    let mut refs: HashMap<u64, u64> = HashMap::new();
    for r in trace {
        let distinct: HashSet<u64> = r.hash_ids.iter().copied().collect();
        for id in distinct {
            *refs.entry(id).or_insert(0) += 1;
        }
    }
    let total = refs.len() as f64;
    let mut levels: Vec<u64> = refs.values().map(|n| n - 1).collect();
    levels.sort_unstable();
    levels.dedup();
    levels
        .into_iter()
        .map(|h| {
            let at_most = refs.values().filter(|&&n| n - 1 <= h).count();
            (h, at_most as f64 / total)
        })
        .collect()
}

/// Chosen prefill instance for a request by evaluating every instance under
/// the local/remote branch rules and taking the lowest estimated TTFT (ties
/// to the lowest id).
pub struct Enumerated {
    pub instance: usize,
    pub ttft: f64,
    pub remote: bool,
    pub best_prefix: usize,
    pub best_instance: usize,
}

pub fn enumerate_prefill_choice(
    pool: &[PrefillInstance],
    blocks: &[BlockKey],
    input_len: u32,
    cfg: &ConductorConfig,
    perf: &PerfModelParams,
    now: f64,
) -> Enumerated {
    let local: Vec<usize> = pool
        .iter()
        .map(|inst| {
            let resident: HashSet<BlockKey> = inst.cache.keys().collect();
            let mut n = 0;
            while n < blocks.len() && resident.contains(&blocks[n]) {
                n += 1;
            }
            n
        })
        .collect();
    let best_prefix = *local.iter().max().expect("non-empty pool");
    let best_idx = local.iter().position(|&l| l == best_prefix).unwrap();
    let tokens = |b: usize| ((b as u64) * cfg.block_size as u64).min(input_len as u64);
    let mut out: Option<Enumerated> = None;
    for (i, inst) in pool.iter().enumerate() {
        let mut queue = 0.0;
        if let Some(r) = &inst.running {
            queue += (r.ends_at - now).max(0.0);
        }
        for j in &inst.queue {
            queue += j.duration;
        }
        let l = local[i];
        let remote = best_prefix > 0 && (l == 0 || best_prefix as f64 / l as f64 > cfg.kvcache_balancing_threshold);
        let ttft = if remote {
            let t = estimate_transfer_time(
                tokens(best_prefix) - tokens(l),
                perf,
                pool[best_idx].sender_busy_until,
                now,
            );
            t + queue + prefill_duration(input_len as u64, tokens(best_prefix), perf).unwrap()
        } else {
            queue + prefill_duration(input_len as u64, tokens(l), perf).unwrap()
        };
        if out.as_ref().is_none_or(|o| ttft < o.ttft) {
            out = Some(Enumerated {
                instance: inst.id,
                ttft,
                remote,
                best_prefix,
                best_instance: pool[best_idx].id,
            });
        }
    }
    out.unwrap()
}

/// A random prefill pool whose caches hold prefixes (and stray pieces) of
/// `chain`, with random queues, in-flight jobs and busy links.
pub fn random_prefill_pool<R: Rng>(rng: &mut R, n: usize, chain: &[BlockKey], now: f64) -> Vec<PrefillInstance> {
    (0..n)
        .map(|id| {
            let capacity = if rng.random_bool(0.3) { Some(rng.random_range(1..64)) } else { None };
            let mut inst = PrefillInstance::new(id, capacity, EvictionPolicy::ALL[rng.random_range(0..3)]);
            let len = rng.random_range(0..=chain.len());
            if len > 0 {
                inst.cache.admit_and_touch(&chain[..len], 1);
            }
            if rng.random_bool(0.3) {
                let from = rng.random_range(0..chain.len());
                let to = rng.random_range(from..chain.len());
                inst.cache.admit_and_touch(&chain[from..=to], 2);
            }
            if rng.random_bool(0.2) {
                let noise: Vec<BlockKey> = (0..rng.random_range(1..8)).map(|_| BlockKey(rng.random())).collect();
                inst.cache.admit_and_touch(&noise, 3);
            }
            if rng.random_bool(0.6) {
                let started = now - rng.random_range(0.0..500.0);
                let duration = rng.random_range(1.0..2000.0);
                inst.running = Some(RunningPrefill {
                    job: job(duration),
                    started,
                    ends_at: started + duration,
                });
            }
            for _ in 0..rng.random_range(0..6) {
                inst.queue.push_back(job(rng.random_range(1.0..3000.0)));
            }
            if rng.random_bool(0.4) {
                inst.sender_busy_until = now + rng.random_range(-100.0..1000.0);
            }
            inst
        })
        .collect()
}

fn job(duration: f64) -> PrefillJob {
    PrefillJob {
        request: 0,
        input_len: 1,
        prefix_blocks: 0,
        duration,
        ready_at: 0.0,
    }
}

pub fn check_pool_matches_naive(pool: &CachePool, naive: &NaiveCache) -> bool {
    let mut k: Vec<u64> = pool.keys().map(|b| b.0).collect();
    k.sort_unstable();
    k == naive.keys() && pool.hits() == naive.hits && pool.misses() == naive.misses
}

/// A random point in the model's parameter and input space.
#[derive(Debug, Clone)]
pub struct PerfSample {
    pub params: PerfModelParams,
    pub input_len: u64,
    pub prefixes: (u64, u64),
    pub transfers: (u64, u64),
    pub busy_offset: f64,
    pub stages: u32,
    pub compute: f64,
}

pub fn random_perf_sample<R: Rng>(rng: &mut R) -> PerfSample {
    let mut log_uniform = |lo: f64, hi: f64| (rng.random_range(lo.ln()..hi.ln())).exp();
    let params = PerfModelParams {
        alpha_mlp: log_uniform(1e-4, 1.0),
        beta_attn: log_uniform(1e-9, 1e-4),
        gamma_decode: log_uniform(0.1, 100.0),
        delta_decode: log_uniform(1e-3, 50.0),
        epsilon_decode: log_uniform(1e-4, 1.0),
        kv_bytes_per_token: log_uniform(1e3, 1e6),
        link_bandwidth: log_uniform(1e5, 1e9),
        load_bandwidth: log_uniform(1e5, 1e9),
        prefill_chunk: rng.random_range(1..=16_384),
        cpp_group_size: 1,
    };
    let input_len = rng.random_range(1..=200_000u64);
    let mut a = rng.random_range(0..=input_len);
    let mut b = rng.random_range(0..=input_len);
    if a > b {
        std::mem::swap(&mut a, &mut b);
    }
    let mut t1 = rng.random_range(0..=300_000u64);
    let mut t2 = rng.random_range(0..=300_000u64);
    if t1 > t2 {
        std::mem::swap(&mut t1, &mut t2);
    }
    PerfSample {
        params,
        input_len,
        prefixes: (a, b),
        transfers: (t1, t2),
        busy_offset: rng.random_range(-1e4..1e4),
        stages: rng.random_range(1..=16),
        compute: rng.random_range(0.0..1e6),
    }
}

/// Every monotonicity, sign and reduction property the model must satisfy at
/// `s`; returns a description of each violation.
pub fn perf_violations(s: &PerfSample) -> Vec<String> {
    use kvsched::perf_model::*;
    let p = &s.params;
    let mut bad = Vec::new();
    let mut check = |ok: bool, what: String| {
        if !ok {
            bad.push(what);
        }
    };
    let l = s.input_len;
    let (p_lo, p_hi) = s.prefixes;
    let t_lo = estimate_prefill_time(l, p_lo, p).unwrap();
    let t_hi = estimate_prefill_time(l, p_hi, p).unwrap();
    check(t_hi <= t_lo, format!("prefill time rises with prefix: {t_lo} -> {t_hi}"));
    check(t_lo >= 0.0 && t_hi >= 0.0, "negative prefill time".into());

    let now = 1e6;
    let (x_lo, x_hi) = s.transfers;
    let busy = now + s.busy_offset;
    let a = estimate_transfer_time(x_lo, p, busy, now);
    let b = estimate_transfer_time(x_hi, p, busy, now);
    check(a <= b, format!("transfer time falls with length: {a} -> {b}"));
    check(a >= 0.0, "negative transfer time".into());

    let uncached = l - p_lo;
    let serial_params = PerfModelParams { cpp_group_size: 1, ..*p };
    let piped_params = PerfModelParams { cpp_group_size: s.stages, ..*p };
    let serial = cpp_prefill_latency(uncached, p_lo, &serial_params);
    let piped = cpp_prefill_latency(uncached, p_lo, &piped_params);
    check(piped <= serial, format!("{} stages slower than one: {piped} > {serial}", s.stages));
    check(piped >= 0.0, "negative pipelined latency".into());
    let chunks = chunk_times(uncached, p_lo, p);
    check(chunks.iter().all(|&c| c >= 0.0), "negative chunk time".into());
    let chunk_sum: f64 = chunks.iter().sum();
    check(serial == chunk_sum, format!("one-stage pipeline {serial} != chunk sum {chunk_sum}"));

    check(layerwise_effective_prefill(s.compute, 0.0) == s.compute, "layerwise with no load changes compute".into());
    let load = cache_load_time(p_lo, p);
    check(load >= 0.0, "negative load time".into());
    let lw = layerwise_effective_prefill(s.compute, load);
    check(lw >= s.compute && lw >= load, "layerwise below one of its parts".into());

    let d = prefill_duration(l, p_lo, &piped_params).unwrap();
    check(d >= 0.0 && d.is_finite(), format!("bad prefill duration {d}"));
    let b1 = decode_iteration_time(1, l, p).unwrap();
    let b2 = decode_iteration_time(2, l, p).unwrap();
    check(b1 > 0.0 && b1 <= b2, format!("decode iteration not monotone in batch: {b1} {b2}"));
    bad
}

pub mod sim {
    use std::collections::HashMap;

    use kvsched::conductor::{ConductorConfig, SchedulerChoice, SloConfig};
    use kvsched::engine::{RequestStatus, Step};
    use kvsched::kvcache::EvictionPolicy;
    use kvsched::overload::{AdmissionPolicy, PredictionConfig};
    use kvsched::perf_model::PerfModelParams;
    use kvsched::trace::{generate_workload, LengthDist, RequestRecord, WorkloadSpec};
    use kvsched::{run, run_observed, ClusterConfig, SimConfig};
    use rand::Rng;

    /// A small random workload and cluster configuration.
    pub fn random_case<R: Rng>(rng: &mut R) -> (Vec<RequestRecord>, SimConfig) {
        let mut spec = WorkloadSpec::poisson(
            rng.random_range(0.5..20.0),
            0,
            0,
            rng.random_range(0.0..=1.0),
            rng.random_range(1..120),
            rng.random(),
        );
        let max_in = rng.random_range(1..20_000);
        spec.input_length = LengthDist::Uniform {
            min: rng.random_range(1..=max_in),
            max: max_in,
        };
        let max_out = rng.random_range(1..200);
        spec.output_length = LengthDist::Uniform { min: 1, max: max_out };
        spec.prefix_groups = rng.random_range(1..5);
        let trace = generate_workload(&spec).expect("valid workload");

        let mut cluster = ClusterConfig::new(rng.random_range(1..6), rng.random_range(1..5));
        if rng.random_bool(0.5) {
            cluster.cache_capacity = Some(rng.random_range(1..200));
        }
        cluster.eviction = EvictionPolicy::ALL[rng.random_range(0..3)];
        if rng.random_bool(0.3) {
            cluster.decode_kv_capacity = Some(rng.random_range(1_000..100_000));
        }
        let perf = PerfModelParams {
            alpha_mlp: rng.random_range(0.005..0.3),
            beta_attn: rng.random_range(0.0..1e-5),
            gamma_decode: rng.random_range(1.0..50.0),
            delta_decode: rng.random_range(0.0..20.0),
            link_bandwidth: rng.random_range(1e5..1e9),
            prefill_chunk: rng.random_range(256..8192),
            cpp_group_size: rng.random_range(1..4),
            ..PerfModelParams::dummy_70b()
        };
        let slo = if rng.random_bool(0.5) {
            SloConfig::paper_slo(&perf, rng.random_range(512..16_000))
        } else {
            SloConfig::fixed(rng.random_range(100.0..50_000.0), rng.random_range(10.0..500.0))
        };
        let mut cfg = SimConfig::new(cluster, perf, slo);
        cfg.scheduler = SchedulerChoice::ALL[rng.random_range(0..4)];
        cfg.admission = AdmissionPolicy::ALL[rng.random_range(0..4)];
        cfg.admission_threshold = rng.random_range(0.3..1.5);
        cfg.conductor = ConductorConfig {
            kvcache_balancing_threshold: rng.random_range(1.01..4.0),
            ..ConductorConfig::default()
        };
        cfg.prediction = PredictionConfig {
            t_d: rng.random_bool(0.5).then(|| rng.random_range(100.0..20_000.0)),
            horizon: rng.random_range(1.0..5_000.0),
            sample_period: rng.random_range(50.0..2_000.0),
        };
        cfg.seed = rng.random();
        (trace, cfg)
    }

    /// Runs the case twice and checks every engine invariant; returns one line
    /// per violation.
    pub fn engine_violations(trace: &[RequestRecord], cfg: &SimConfig) -> Vec<String> {
        let mut bad = Vec::new();
        let mut steps = Vec::new();
        let rep = match run_observed(trace, cfg, &mut |s| steps.push(s.clone())) {
            Ok(r) => r,
            Err(e) => return vec![format!("run failed: {e}")],
        };

        if rep.arrived != trace.len() {
            bad.push(format!("arrived {} != trace length {}", rep.arrived, trace.len()));
        }
        if rep.arrived != rep.completed + rep.rejected_at_admission + rep.rejected_at_decode {
            bad.push(format!(
                "conservation: {} != {} + {} + {}",
                rep.arrived, rep.completed, rep.rejected_at_admission, rep.rejected_at_decode
            ));
        }
        if rep.goodput > rep.completed {
            bad.push(format!("goodput {} > completed {}", rep.goodput, rep.completed));
        }

        let mut last = f64::NEG_INFINITY;
        for s in &steps {
            if let Step::Event { time, kind } = s {
                if *time < last {
                    bad.push(format!("clock went back from {last} to {time} at {kind}"));
                }
                last = *time;
            }
        }

        for (i, r) in rep.requests.iter().enumerate() {
            let le = |a: Option<f64>, b: Option<f64>| match (a, b) {
                (Some(a), Some(b)) => a <= b,
                _ => true,
            };
            let ok = le(Some(r.arrival), r.prefill_start)
                && le(r.prefill_start, r.prefill_done)
                && le(r.prefill_start, r.transfer_done)
                && le(r.prefill_done, r.transfer_done)
                && le(r.transfer_done, r.decode_join)
                && le(r.decode_join, r.completion)
                && (r.decode_join.is_none() || r.transfer_done.is_some())
                && (r.transfer_done.is_none() || r.prefill_start.is_some());
            if !ok {
                bad.push(format!("request {i}: stage times out of order: {r:?}"));
            }
            match r.status {
                RequestStatus::RejectedAtAdmission => {
                    if r.prefill_start.is_some() || r.wasted_tokens > 0 {
                        bad.push(format!("request {i}: rejected at admission after using prefill"));
                    }
                }
                RequestStatus::RejectedAtDecode => {
                    if r.prefill_done.is_none() || r.decode_join.is_some() {
                        bad.push(format!("request {i}: decode rejection without a finished prefill"));
                    }
                }
                RequestStatus::WithinSlo | RequestStatus::Violated => {
                    if r.completion.is_none() || r.tbt_count + 1 != r.output_length as usize {
                        bad.push(format!("request {i}: completed with {} gaps for {} tokens", r.tbt_count, r.output_length));
                    }
                }
            }
        }

        // batch membership only changes between iterations
        let mut per_instance: HashMap<usize, Vec<(f64, f64, Vec<usize>)>> = HashMap::new();
        for s in &steps {
            if let Step::Iteration { instance, start, end, batch } = s {
                per_instance.entry(*instance).or_default().push((*start, *end, batch.clone()));
            }
        }
        let mut iterations_of = vec![0usize; rep.requests.len()];
        for iters in per_instance.values() {
            for (k, (start, _end, batch)) in iters.iter().enumerate() {
                for &r in batch {
                    iterations_of[r] += 1;
                    let joined_now = rep.requests[r].decode_join == Some(*start);
                    let carried = k > 0 && iters[k - 1].2.contains(&r);
                    if !(joined_now || carried) {
                        bad.push(format!("request {r} appears mid-stream in an iteration at {start}"));
                    }
                }
                if k > 0 {
                    let (_, prev_end, prev) = &iters[k - 1];
                    if start < prev_end {
                        bad.push(format!("iterations overlap at {start}"));
                    }
                    for &r in prev {
                        if !batch.contains(&r) && rep.requests[r].completion != Some(*prev_end) {
                            bad.push(format!("request {r} left the batch without finishing"));
                        }
                    }
                }
            }
        }
        for (r, req) in rep.requests.iter().enumerate() {
            if req.status.is_completed() && iterations_of[r] != req.output_length as usize {
                bad.push(format!("request {r}: {} iterations for {} tokens", iterations_of[r], req.output_length));
            }
        }

        match run(trace, cfg) {
            Ok(again) => {
                if again.to_json() != rep.to_json() || again.requests_csv() != rep.requests_csv() {
                    bad.push("same inputs gave different reports".into());
                }
            }
            Err(e) => bad.push(format!("second run failed: {e}")),
        }
        bad
    }
}

pub mod workloads {
    use kvsched::conductor::{SchedulerChoice, SloConfig};
    use kvsched::overload::AdmissionPolicy;
    use kvsched::perf_model::PerfModelParams;
    use kvsched::trace::{generate_workload, rescale_replay, RequestRecord, WorkloadSpec};
    use kvsched::{ClusterConfig, SimConfig};

    /// Prefix-heavy traffic on 8P+8D with small per-instance caches, so that
    /// where a request lands decides how much of its prompt is reused.
    pub fn scheduler_case(seed: u64, n: usize, scheduler: SchedulerChoice) -> (Vec<RequestRecord>, SimConfig) {
        let mut spec = WorkloadSpec::poisson(10.0, 8192, 16, 0.75, n, seed);
        spec.prefix_groups = 32;
        let trace = generate_workload(&spec).unwrap();
        let mut cluster = ClusterConfig::new(8, 8);
        cluster.cache_capacity = Some(64);
        let mut cfg = SimConfig::new(cluster, PerfModelParams::dummy_70b(), SloConfig::fixed(1e9, 1e9));
        cfg.scheduler = scheduler;
        cfg.seed = seed;
        (trace, cfg)
    }

    /// Uniform 8k-token prompts at twice the rate a 4P+4D cluster can decode.
    pub fn overload_case(seed: u64, n: usize, admission: AdmissionPolicy) -> (Vec<RequestRecord>, SimConfig) {
        let perf = PerfModelParams {
            alpha_mlp: 0.2,
            delta_decode: 36.0,
            ..PerfModelParams::dummy_70b()
        };
        let trace = replay_at_2x(WorkloadSpec::poisson(1.5, 8192, 64, 0.0, n, seed));
        let mut cfg = SimConfig::new(ClusterConfig::new(4, 4), perf, SloConfig::paper_slo(&perf, 8192));
        cfg.admission = admission;
        cfg.admission_threshold = 0.9;
        cfg.prediction.horizon = 2000.0;
        cfg.seed = seed;
        (trace, cfg)
    }

    /// Prefill-heavy costs on a 32P+1D cluster: prefill capacity is plentiful
    /// and decode is the bottleneck, so the two stages alternate.
    pub fn antiphase_case(seed: u64, n: usize, admission: AdmissionPolicy) -> (Vec<RequestRecord>, SimConfig) {
        let perf = PerfModelParams {
            alpha_mlp: 1.0,
            delta_decode: 5.0,
            ..PerfModelParams::dummy_70b()
        };
        let trace = replay_at_2x(WorkloadSpec::poisson(1.5, 8192, 64, 0.0, n, seed));
        let mut cfg = SimConfig::new(ClusterConfig::new(32, 1), perf, SloConfig::paper_slo(&perf, 8192));
        cfg.admission = admission;
        cfg.admission_threshold = 0.9;
        cfg.prediction.horizon = 8000.0;
        cfg.seed = seed;
        (trace, cfg)
    }

    fn replay_at_2x(spec: WorkloadSpec) -> Vec<RequestRecord> {
        rescale_replay(&generate_workload(&spec).unwrap(), 2.0).unwrap()
    }

    /// The steady-state window of a run: after warm-up, before the drain.
    pub fn steady_window(trace: &[RequestRecord]) -> (f64, f64) {
        let last = trace.last().map_or(0, |r| r.timestamp) as f64;
        (0.2 * last, 0.9 * last)
    }
}

pub mod schedule_state {
    use super::random_prefill_pool;
    use kvsched::conductor::{ConductorConfig, DecodeInstance, DecodeSlot, PrefillInstance};
    use kvsched::kvcache::BlockKey;
    use kvsched::perf_model::PerfModelParams;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub const NOW: f64 = 10_000.0;

    pub struct State {
        pub prefill: Vec<PrefillInstance>,
        pub decode: Vec<DecodeInstance>,
        pub blocks: Vec<BlockKey>,
        pub input_len: u32,
        pub perf: PerfModelParams,
        pub cfg: ConductorConfig,
    }

    pub fn random_state(seed: u64) -> State {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let chain: Vec<BlockKey> = (0..rng.random_range(1..40u64)).map(|k| BlockKey(1000 + k)).collect();
        let n = rng.random_range(2..=16);
        let prefill = random_prefill_pool(&mut rng, n, &chain, NOW);
        let decode = random_decode_pool(&mut rng);
        let take = rng.random_range(1..=chain.len());
        let mut blocks = chain[..take].to_vec();
        for _ in 0..rng.random_range(0..5) {
            blocks.push(BlockKey(rng.random_range(5000..6000)));
        }
        let input_len = (blocks.len() as u32 - 1) * 512 + rng.random_range(1..=512);
        let perf = PerfModelParams {
            alpha_mlp: rng.random_range(0.01..0.2),
            beta_attn: rng.random_range(0.0..5e-6),
            link_bandwidth: rng.random_range(1e6..1e9),
            cpp_group_size: rng.random_range(1..4),
            ..PerfModelParams::dummy_70b()
        };
        let cfg = ConductorConfig {
            kvcache_balancing_threshold: rng.random_range(1.01..4.0),
            ..ConductorConfig::default()
        };
        State {
            prefill,
            decode,
            blocks,
            input_len,
            perf,
            cfg,
        }
    }

    pub fn random_decode_pool(rng: &mut ChaCha8Rng) -> Vec<DecodeInstance> {
        (0..rng.random_range(1..6))
            .map(|id| {
                let mut d = DecodeInstance::new(id, None);
                for r in 0..rng.random_range(0..12) {
                    d.batch.push(DecodeSlot {
                        request: r,
                        remaining: 10,
                        kv_tokens: rng.random_range(100..20_000),
                        joined_at: 0.0,
                    });
                }
                d
            })
            .collect()
    }
}
