//! Discrete-event simulation of a disaggregated prefill/decode cluster.
//!
//! Each request flows through admission, global scheduling, a FIFO prefill
//! queue, a KVCache stream to its decoding instance and continuous batching.
//! Time is virtual (ms) and events are ordered by (time, kind, sequence), so a
//! run is a pure function of its inputs.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;
use std::str::FromStr;

use log::{debug, info};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conductor::{
    apply_migration, plan_migration, prefix_tokens, schedule_with, select_decoding_instance, ConductorConfig,
    DecodeInstance, DecodeSlot, MigrationPlan, Outcome, PrefillInstance, PrefillJob, RunningPrefill, ScheduleInput,
    SchedulerChoice, SloConfig, SloGate,
};
use crate::error::{Error, Result};
use crate::kvcache::{keys_of, match_prefix, BlockKey, Capacity, EvictionPolicy};
use crate::metrics::{mean, percentile, record_ttft_tbt, SloClass};
use crate::overload::{
    default_t_d, measure_decode_load, measure_prefill_load, predict_decode_load, AdmissionPolicy, ClusterSnapshot,
    FluctuationStats, LoadSample, PredictionConfig,
};
use crate::perf_model::{decode_iteration_time, prefill_duration, transfer_payload_time, PerfModelParams};
use crate::trace::{trace_stats, RequestRecord};

/// Instance counts and per-instance capacities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub prefill_instances: usize,
    pub decode_instances: usize,
    /// KVCache pool size per prefill instance, in blocks. `None` is unbounded.
    #[serde(default)]
    pub cache_capacity: Capacity,
    #[serde(default = "default_policy")]
    pub eviction: EvictionPolicy,
    /// Resident KV tokens a decoding instance can hold. `None` is unbounded.
    #[serde(default)]
    pub decode_kv_capacity: Option<u64>,
}

fn default_policy() -> EvictionPolicy {
    EvictionPolicy::Lru
}

impl ClusterConfig {
    pub fn new(prefill: usize, decode: usize) -> Self {
        Self {
            prefill_instances: prefill,
            decode_instances: decode,
            cache_capacity: None,
            eviction: EvictionPolicy::Lru,
            decode_kv_capacity: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.prefill_instances == 0 {
            return Err(Error::validation("prefill_instances", "cluster needs at least one prefill instance"));
        }
        if self.decode_instances == 0 {
            return Err(Error::validation("decode_instances", "cluster needs at least one decoding instance"));
        }
        if self.cache_capacity == Some(0) {
            return Err(Error::validation("cache_capacity", "must be >= 1 block"));
        }
        Ok(())
    }

    /// `"3P+1D"` style label.
    pub fn shape(&self) -> String {
        format!("{}P+{}D", self.prefill_instances, self.decode_instances)
    }
}

impl FromStr for ClusterConfig {
    type Err = Error;

    /// Parses `"<n>P+<m>D"`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::validation("cluster", format!("expected `<n>P+<m>D`, got `{s}`"));
        let (p, d) = s.trim().split_once('+').ok_or_else(bad)?;
        let count = |part: &str, suffix: char| -> Result<usize> {
            part.trim()
                .strip_suffix(suffix)
                .or_else(|| part.trim().strip_suffix(suffix.to_ascii_lowercase()))
                .and_then(|n| n.parse().ok())
                .ok_or_else(bad)
        };
        let cfg = ClusterConfig::new(count(p, 'P')?, count(d, 'D')?);
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for ClusterConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.shape())
    }
}

/// Everything a run needs besides the trace.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub cluster: ClusterConfig,
    pub scheduler: SchedulerChoice,
    pub admission: AdmissionPolicy,
    /// Loads at or above this are overloaded.
    pub admission_threshold: f64,
    pub perf: PerfModelParams,
    pub slo: SloConfig,
    pub conductor: ConductorConfig,
    pub prediction: PredictionConfig,
    pub seed: u64,
}

impl SimConfig {
    pub fn new(cluster: ClusterConfig, perf: PerfModelParams, slo: SloConfig) -> Self {
        Self {
            cluster,
            scheduler: SchedulerChoice::KvcacheCentric,
            admission: AdmissionPolicy::None,
            admission_threshold: 1.0,
            perf,
            slo,
            conductor: ConductorConfig::default(),
            prediction: PredictionConfig::default(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.cluster.validate()?;
        self.perf.validate()?;
        self.slo.validate()?;
        self.conductor.validate()?;
        self.prediction.validate()?;
        if !(self.admission_threshold.is_finite() && self.admission_threshold > 0.0) {
            return Err(Error::validation(
                "admission_threshold",
                format!("must be > 0, got {}", self.admission_threshold),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestStatus {
    WithinSlo,
    Violated,
    RejectedAtAdmission,
    RejectedAtDecode,
}

impl RequestStatus {
    pub fn is_completed(self) -> bool {
        matches!(self, RequestStatus::WithinSlo | RequestStatus::Violated)
    }
}

/// Lifecycle of one request. Timestamps are absent for stages never reached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestSummary {
    pub request_id: u64,
    pub arrival: f64,
    pub input_length: u32,
    pub output_length: u32,
    pub status: RequestStatus,
    pub prefill_instance: Option<usize>,
    pub decode_instance: Option<usize>,
    pub block_count: usize,
    /// Prefix blocks reused by the prefill.
    pub reused_blocks: usize,
    pub migrated: bool,
    pub prefill_start: Option<f64>,
    pub prefill_done: Option<f64>,
    pub transfer_done: Option<f64>,
    pub decode_join: Option<f64>,
    pub completion: Option<f64>,
    pub ttft: Option<f64>,
    pub tbt_count: usize,
    pub tbt_mean: Option<f64>,
    pub tbt_max: Option<f64>,
    /// Prefill tokens computed for nothing (rejected after prefill).
    pub wasted_tokens: u64,
    /// Token gaps; kept in memory, exported separately.
    #[serde(skip)]
    pub tbts: Vec<f64>,
}

/// Outcome of a simulation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub cluster: String,
    pub scheduler: SchedulerChoice,
    pub admission: AdmissionPolicy,
    pub slo: SloConfig,
    pub t_d: f64,
    pub arrived: usize,
    pub accepted: usize,
    pub completed: usize,
    pub goodput: usize,
    pub violated: usize,
    pub rejected_at_admission: usize,
    pub rejected_at_decode: usize,
    pub wasted_prefill_tokens: u64,
    /// Tokens generated for requests that finished outside the SLO.
    pub violated_output_tokens: u64,
    pub mean_ttft: Option<f64>,
    pub p90_ttft: Option<f64>,
    pub p90_tbt: Option<f64>,
    pub normalized_p90_ttft: Option<f64>,
    pub normalized_p90_tbt: Option<f64>,
    pub slo_attainment: f64,
    pub reused_blocks: u64,
    pub total_blocks: u64,
    pub cache_hit_ratio: f64,
    pub migrations: usize,
    pub makespan: f64,
    pub events_processed: u64,
    pub load_series: Vec<LoadSample>,
    pub fluctuation: Option<FluctuationStats>,
    pub requests: Vec<RequestSummary>,
}

impl SimReport {
    pub fn ttfts(&self) -> Vec<f64> {
        self.requests.iter().filter_map(|r| r.ttft).collect()
    }

    pub fn tbts(&self) -> Vec<f64> {
        self.requests.iter().flat_map(|r| r.tbts.iter().copied()).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Per-request CSV, one row per request.
    pub fn requests_csv(&self) -> String {
        let mut out = String::from(
            "request_id,arrival,status,prefill_instance,decode_instance,reused_blocks,ttft,tbt_mean,tbt_max,completion,wasted_tokens\n",
        );
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.3}"));
        let opt_id = |v: Option<usize>| v.map_or(String::new(), |x| x.to_string());
        for r in &self.requests {
            let status = serde_json::to_value(r.status).expect("status serializes");
            out.push_str(&format!(
                "{},{:.3},{},{},{},{},{},{},{},{},{}\n",
                r.request_id,
                r.arrival,
                status.as_str().unwrap_or_default(),
                opt_id(r.prefill_instance),
                opt_id(r.decode_instance),
                r.reused_blocks,
                opt(r.ttft),
                opt(r.tbt_mean),
                opt(r.tbt_max),
                opt(r.completion),
                r.wasted_tokens,
            ));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Event queue
// ---------------------------------------------------------------------------

/// Event kinds in tie-break order: departures first, then joins, then samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum EventKind {
    /// End of a decode iteration on an instance.
    DecodeIteration { instance: usize },
    MigrationDone { plan: usize },
    PrefillDone { instance: usize },
    TransferDone { request: usize },
    Arrival { request: usize },
    LoadSample,
}

#[derive(Debug, Clone, Copy)]
struct Event {
    time: f64,
    kind: EventKind,
    seq: u64,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| rank(&other.kind).cmp(&rank(&self.kind)))
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

fn rank(kind: &EventKind) -> u8 {
    match kind {
        EventKind::DecodeIteration { .. } => 0,
        EventKind::MigrationDone { .. } => 1,
        EventKind::PrefillDone { .. } => 2,
        EventKind::TransferDone { .. } => 3,
        EventKind::Arrival { .. } => 4,
        EventKind::LoadSample => 5,
    }
}

// ---------------------------------------------------------------------------
// Simulation state
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct Req {
    record_id: u64,
    arrival: f64,
    input_len: u32,
    output_len: u32,
    blocks: Vec<BlockKey>,
    status: Option<RequestStatus>,
    prefill: Option<usize>,
    decode: Option<usize>,
    reused_blocks: usize,
    migrated: bool,
    prefill_start: Option<f64>,
    prefill_done: Option<f64>,
    transfer_done: Option<f64>,
    decode_join: Option<f64>,
    completion: Option<f64>,
    first_token: Option<f64>,
    last_token: Option<f64>,
    tbts: Vec<f64>,
    wasted: u64,
}

/// A step of a run, reported to an observer passed to [`run_observed`].
#[derive(Debug, Clone, PartialEq)]
pub enum Step {
    /// An event was popped from the queue.
    Event { time: f64, kind: &'static str },
    /// A decode iteration started with `batch` (request indices in trace order).
    Iteration {
        instance: usize,
        start: f64,
        end: f64,
        batch: Vec<usize>,
    },
}

impl EventKind {
    fn name(&self) -> &'static str {
        match self {
            EventKind::DecodeIteration { .. } => "decode_iteration",
            EventKind::MigrationDone { .. } => "migration_done",
            EventKind::PrefillDone { .. } => "prefill_done",
            EventKind::TransferDone { .. } => "transfer_done",
            EventKind::Arrival { .. } => "arrival",
            EventKind::LoadSample => "load_sample",
        }
    }
}

struct Sim<'a> {
    cfg: &'a SimConfig,
    observer: &'a mut dyn FnMut(&Step),
    t_d: f64,
    prefill: Vec<PrefillInstance>,
    decode: Vec<DecodeInstance>,
    reqs: Vec<Req>,
    plans: Vec<MigrationPlan>,
    heap: BinaryHeap<Event>,
    seq: u64,
    now: f64,
    cache_clock: u64,
    rng: ChaCha8Rng,
    outstanding: usize,
    samples: Vec<LoadSample>,
    events: u64,
}

/// Runs `trace` (sorted by timestamp) through a simulated cluster.
pub fn run(trace: &[RequestRecord], cfg: &SimConfig) -> Result<SimReport> {
    run_observed(trace, cfg, &mut |_| {})
}

/// [`run`], reporting every event and decode iteration to `observer`.
pub fn run_observed(trace: &[RequestRecord], cfg: &SimConfig, observer: &mut dyn FnMut(&Step)) -> Result<SimReport> {
    cfg.validate()?;
    if trace.windows(2).any(|w| w[0].timestamp > w[1].timestamp) {
        return Err(Error::validation("trace", "records must be sorted by timestamp"));
    }
    let stats = trace_stats(trace);
    let t_d = cfg
        .prediction
        .t_d
        .unwrap_or_else(|| default_t_d(stats.mean_output_length.max(1.0), &cfg.slo));
    if cfg.admission == AdmissionPolicy::Predictive {
        info!("prediction: t_d = {t_d:.1} ms, horizon = {} ms", cfg.prediction.horizon);
    }

    let mut sim = Sim {
        cfg,
        observer,
        t_d,
        prefill: (0..cfg.cluster.prefill_instances)
            .map(|i| PrefillInstance::new(i, cfg.cluster.cache_capacity, cfg.cluster.eviction))
            .collect(),
        decode: (0..cfg.cluster.decode_instances)
            .map(|i| DecodeInstance::new(i, cfg.cluster.decode_kv_capacity))
            .collect(),
        reqs: trace
            .iter()
            .map(|r| Req {
                record_id: r.request_id,
                arrival: r.timestamp as f64,
                input_len: r.input_length,
                output_len: r.output_length.max(1),
                blocks: keys_of(&r.hash_ids),
                status: None,
                prefill: None,
                decode: None,
                reused_blocks: 0,
                migrated: false,
                prefill_start: None,
                prefill_done: None,
                transfer_done: None,
                decode_join: None,
                completion: None,
                first_token: None,
                last_token: None,
                tbts: Vec::new(),
                wasted: 0,
            })
            .collect(),
        plans: Vec::new(),
        heap: BinaryHeap::new(),
        seq: 0,
        now: 0.0,
        cache_clock: 0,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        outstanding: trace.len(),
        samples: Vec::new(),
        events: 0,
    };
    for i in 0..trace.len() {
        let t = sim.reqs[i].arrival;
        sim.push(t, EventKind::Arrival { request: i });
    }
    if let Some(first) = trace.first() {
        sim.push(first.timestamp as f64, EventKind::LoadSample);
    }
    sim.event_loop()?;
    Ok(sim.report())
}

impl Sim<'_> {
    fn push(&mut self, time: f64, kind: EventKind) {
        self.seq += 1;
        self.heap.push(Event {
            time,
            kind,
            seq: self.seq,
        });
    }

    fn tick(&mut self) -> u64 {
        self.cache_clock += 1;
        self.cache_clock
    }

    fn event_loop(&mut self) -> Result<()> {
        while let Some(ev) = self.heap.pop() {
            debug_assert!(ev.time >= self.now, "clock went backwards");
            self.now = ev.time;
            self.events += 1;
            (self.observer)(&Step::Event {
                time: ev.time,
                kind: ev.kind.name(),
            });
            match ev.kind {
                EventKind::Arrival { request } => self.on_arrival(request)?,
                EventKind::PrefillDone { instance } => self.on_prefill_done(instance)?,
                EventKind::TransferDone { request } => self.on_transfer_done(request),
                EventKind::DecodeIteration { instance } => self.on_iteration_end(instance)?,
                EventKind::MigrationDone { plan } => self.on_migration_done(plan)?,
                EventKind::LoadSample => self.on_sample(),
            }
        }
        debug_assert_eq!(self.outstanding, 0);
        Ok(())
    }

    fn reject(&mut self, r: usize, status: RequestStatus) {
        self.reqs[r].status = Some(status);
        self.outstanding -= 1;
    }

    fn on_sample(&mut self) {
        self.samples.push(LoadSample {
            time: self.now,
            prefill_load: measure_prefill_load(&self.prefill, &self.cfg.slo, self.now),
            decode_load: measure_decode_load(&self.decode, &self.cfg.perf, &self.cfg.slo),
        });
        if self.outstanding > 0 {
            self.push(self.now + self.cfg.prediction.sample_period, EventKind::LoadSample);
        }
    }

    fn admission_passes(&self) -> bool {
        let cfg = self.cfg;
        let threshold = cfg.admission_threshold;
        let prefill_load = || measure_prefill_load(&self.prefill, &cfg.slo, self.now);
        match cfg.admission {
            AdmissionPolicy::None => true,
            AdmissionPolicy::Baseline => prefill_load() < threshold,
            AdmissionPolicy::Early => prefill_load().max(measure_decode_load(&self.decode, &cfg.perf, &cfg.slo)) < threshold,
            AdmissionPolicy::Predictive => {
                let snapshot = ClusterSnapshot::capture(&self.prefill, &self.decode, self.now);
                let predicted = predict_decode_load(&snapshot, self.t_d, cfg.prediction.horizon, &cfg.perf, &cfg.slo);
                prefill_load().max(predicted) < threshold
            }
        }
    }

    fn on_arrival(&mut self, r: usize) -> Result<()> {
        if !self.admission_passes() {
            self.reject(r, RequestStatus::RejectedAtAdmission);
            return Ok(());
        }
        let cfg = self.cfg;
        let gate = match cfg.admission {
            AdmissionPolicy::None => SloGate::Off,
            _ => SloGate::TtftOnly,
        };
        let decision = {
            let req = &self.reqs[r];
            schedule_with(
                cfg.scheduler,
                gate,
                ScheduleInput {
                    input_len: req.input_len,
                    blocks: &req.blocks,
                },
                &self.prefill,
                &self.decode,
                &cfg.slo,
                &cfg.conductor,
                &cfg.perf,
                self.now,
                &mut self.rng,
            )?
        };
        let Outcome::Accept {
            prefill: p,
            decode: d,
            migrate_from,
        } = decision.outcome
        else {
            self.reject(r, RequestStatus::RejectedAtAdmission);
            return Ok(());
        };

        let input_len = self.reqs[r].input_len;
        let bs = cfg.conductor.block_size;
        let mut ready_at = self.now;
        let mut prefix_blocks = decision.prefix_blocks;
        if let Some(src) = migrate_from {
            let local = decision.local_prefix_blocks;
            let best = decision.best_prefix_blocks;
            let tokens = prefix_tokens(best, bs, input_len) - prefix_tokens(local, bs, input_len);
            let blocks = self.reqs[r].blocks[local..best].to_vec();
            match plan_migration(&mut self.prefill[src], p, &blocks, local as u32, tokens, &cfg.perf, self.now) {
                Ok(Some(plan)) => {
                    ready_at = plan.completes_at;
                    self.plans.push(plan);
                    let id = self.plans.len() - 1;
                    self.push(ready_at, EventKind::MigrationDone { plan: id });
                    self.reqs[r].migrated = true;
                }
                Ok(None) => {}
                Err(Error::MigrationAborted { source_id, block }) => {
                    debug!("request {r}: migration from {source_id} aborted at block {block}");
                    prefix_blocks = decision.local_prefix_blocks;
                }
                Err(e) => return Err(e),
            }
        }

        let planned_prefix = prefix_tokens(prefix_blocks, bs, input_len);
        let duration = prefill_duration(input_len as u64, planned_prefix, &cfg.perf)?;
        self.prefill[p].queue.push_back(PrefillJob {
            request: r,
            input_len,
            prefix_blocks,
            duration,
            ready_at,
        });
        self.reqs[r].prefill = Some(p);
        // provisional; the decode side is re-checked when prefill finishes
        self.reqs[r].decode = Some(d);
        self.try_start_prefill(p)
    }

    fn try_start_prefill(&mut self, p: usize) -> Result<()> {
        if self.prefill[p].running.is_some() {
            return Ok(());
        }
        let Some(head) = self.prefill[p].queue.front() else {
            return Ok(());
        };
        if head.ready_at > self.now {
            // the migration landing wakes it
            return Ok(());
        }
        let mut job = self.prefill[p].queue.pop_front().expect("head exists");
        let r = job.request;
        let clock = self.tick();
        let input_len = self.reqs[r].input_len;
        let reused = match_prefix(&self.prefill[p].cache, &self.reqs[r].blocks);
        self.prefill[p].cache.admit_and_touch(&self.reqs[r].blocks, clock);
        let prefix = prefix_tokens(reused, self.cfg.conductor.block_size, input_len);
        job.prefix_blocks = reused;
        job.duration = prefill_duration(input_len as u64, prefix, &self.cfg.perf)?;
        let ends_at = self.now + job.duration;
        let req = &mut self.reqs[r];
        req.reused_blocks = reused;
        req.prefill_start = Some(self.now);
        self.prefill[p].running = Some(RunningPrefill {
            job,
            started: self.now,
            ends_at,
        });
        self.push(ends_at, EventKind::PrefillDone { instance: p });
        Ok(())
    }

    fn on_migration_done(&mut self, id: usize) -> Result<()> {
        let clock = self.tick();
        let plan = self.plans[id].clone();
        apply_migration(&mut self.prefill[plan.dest], &plan, clock);
        self.try_start_prefill(plan.dest)
    }

    fn on_prefill_done(&mut self, p: usize) -> Result<()> {
        let running = self.prefill[p].running.take().expect("prefill in flight");
        let r = running.job.request;
        let cfg = self.cfg;
        let input_len = self.reqs[r].input_len;
        let uncached = input_len as u64
            - prefix_tokens(running.job.prefix_blocks, cfg.conductor.block_size, input_len);
        self.reqs[r].prefill_done = Some(self.now);

        let stage_ok = match cfg.admission {
            AdmissionPolicy::Baseline => {
                measure_decode_load(&self.decode, &cfg.perf, &cfg.slo) < cfg.admission_threshold
            }
            _ => true,
        };
        let (d, tbt) = select_decoding_instance(&self.decode, input_len as u64, &cfg.perf)?;
        let double_check_ok = cfg.admission == AdmissionPolicy::None || tbt <= cfg.slo.l_tbt;
        if !(stage_ok && double_check_ok) {
            self.reqs[r].wasted = uncached;
            self.reqs[r].decode = None;
            self.reject(r, RequestStatus::RejectedAtDecode);
        } else {
            let start = running.started;
            let stream_end = start + transfer_payload_time(input_len as u64, &cfg.perf);
            let done = self.now.max(stream_end);
            self.reqs[r].decode = Some(d);
            self.decode[d].inbound += 1;
            self.decode[d].inbound_kv += input_len as u64;
            self.push(done, EventKind::TransferDone { request: r });
        }
        self.try_start_prefill(p)
    }

    fn on_transfer_done(&mut self, r: usize) {
        let d = self.reqs[r].decode.expect("decode assigned");
        let input_len = self.reqs[r].input_len as u64;
        self.reqs[r].transfer_done = Some(self.now);
        let inst = &mut self.decode[d];
        inst.inbound -= 1;
        inst.inbound_kv -= input_len;
        inst.pending.push_back(DecodeSlot {
            request: r,
            remaining: self.reqs[r].output_len,
            kv_tokens: input_len,
            joined_at: self.now,
        });
        if inst.iteration_end.is_none() {
            self.begin_iteration(d);
        }
    }

    /// Moves waiting requests into the batch and starts the next iteration.
    fn begin_iteration(&mut self, d: usize) {
        let now = self.now;
        let inst = &mut self.decode[d];
        let mut resident = inst.resident_kv();
        while let Some(slot) = inst.pending.front() {
            let fits = inst.kv_capacity.is_none_or(|cap| resident + slot.kv_tokens <= cap);
            if !fits && !inst.batch.is_empty() {
                break;
            }
            let slot = inst.pending.pop_front().expect("front exists");
            resident += slot.kv_tokens;
            self.reqs[slot.request].decode_join = Some(now);
            inst.batch.push(slot);
        }
        if inst.batch.is_empty() {
            inst.iteration_end = None;
            return;
        }
        let dt = decode_iteration_time(inst.batch.len(), resident, &self.cfg.perf).expect("non-empty batch");
        inst.iteration_end = Some(now + dt);
        let batch = inst.batch.iter().map(|s| s.request).collect();
        (self.observer)(&Step::Iteration {
            instance: d,
            start: now,
            end: now + dt,
            batch,
        });
        self.push(now + dt, EventKind::DecodeIteration { instance: d });
    }

    fn on_iteration_end(&mut self, d: usize) -> Result<()> {
        let now = self.now;
        let slo = self.cfg.slo;
        let batch = std::mem::take(&mut self.decode[d].batch);
        let mut keep = Vec::with_capacity(batch.len());
        for mut slot in batch {
            let req = &mut self.reqs[slot.request];
            match req.last_token {
                None => req.first_token = Some(now),
                Some(prev) => req.tbts.push(now - prev),
            }
            req.last_token = Some(now);
            slot.remaining -= 1;
            slot.kv_tokens += 1;
            if slot.remaining == 0 {
                req.completion = Some(now);
                let ttft = req.first_token.expect("emitted") - req.arrival;
                let class = record_ttft_tbt(ttft, &req.tbts, &slo);
                req.status = Some(match class {
                    SloClass::WithinSlo => RequestStatus::WithinSlo,
                    SloClass::Violated => RequestStatus::Violated,
                });
                self.outstanding -= 1;
            } else {
                keep.push(slot);
            }
        }
        self.decode[d].batch = keep;
        self.decode[d].iteration_end = None;
        self.begin_iteration(d);
        Ok(())
    }

    fn report(self) -> SimReport {
        let cfg = self.cfg;
        let requests: Vec<RequestSummary> = self
            .reqs
            .into_iter()
            .map(|q| {
                let status = q.status.expect("every request reaches a terminal state");
                RequestSummary {
                    request_id: q.record_id,
                    arrival: q.arrival,
                    input_length: q.input_len,
                    output_length: q.output_len,
                    status,
                    prefill_instance: q.prefill,
                    decode_instance: q.decode,
                    block_count: q.blocks.len(),
                    reused_blocks: q.reused_blocks,
                    migrated: q.migrated,
                    prefill_start: q.prefill_start,
                    prefill_done: q.prefill_done,
                    transfer_done: q.transfer_done,
                    decode_join: q.decode_join,
                    completion: q.completion,
                    ttft: q.first_token.map(|t| t - q.arrival),
                    tbt_count: q.tbts.len(),
                    tbt_mean: mean(&q.tbts),
                    tbt_max: q.tbts.iter().copied().reduce(f64::max),
                    wasted_tokens: q.wasted,
                    tbts: q.tbts,
                }
            })
            .collect();

        let count = |s: RequestStatus| requests.iter().filter(|r| r.status == s).count();
        let arrived = requests.len();
        let rejected_at_admission = count(RequestStatus::RejectedAtAdmission);
        let rejected_at_decode = count(RequestStatus::RejectedAtDecode);
        let goodput = count(RequestStatus::WithinSlo);
        let violated = count(RequestStatus::Violated);
        let ttfts: Vec<f64> = requests.iter().filter_map(|r| r.ttft).collect();
        let tbts: Vec<f64> = requests.iter().flat_map(|r| r.tbts.iter().copied()).collect();
        let p90_ttft = percentile(&ttfts, 0.9);
        let p90_tbt = percentile(&tbts, 0.9);
        let reused_blocks = requests.iter().map(|r| r.reused_blocks as u64).sum();
        let total_blocks: u64 = requests
            .iter()
            .filter(|r| r.prefill_start.is_some())
            .map(|r| r.block_count as u64)
            .sum();
        let fluctuation = crate::overload::fluctuation_stats(&self.samples).ok();
        SimReport {
            cluster: cfg.cluster.shape(),
            scheduler: cfg.scheduler,
            admission: cfg.admission,
            slo: cfg.slo,
            t_d: self.t_d,
            arrived,
            accepted: arrived - rejected_at_admission,
            completed: goodput + violated,
            goodput,
            violated,
            rejected_at_admission,
            rejected_at_decode,
            wasted_prefill_tokens: requests.iter().map(|r| r.wasted_tokens).sum(),
            violated_output_tokens: requests
                .iter()
                .filter(|r| r.status == RequestStatus::Violated)
                .map(|r| r.output_length as u64)
                .sum(),
            mean_ttft: mean(&ttfts),
            p90_ttft,
            p90_tbt,
            normalized_p90_ttft: p90_ttft.map(|v| v / cfg.slo.l_ttft),
            normalized_p90_tbt: p90_tbt.map(|v| v / cfg.slo.l_tbt),
            slo_attainment: if arrived == 0 { 0.0 } else { goodput as f64 / arrived as f64 },
            reused_blocks,
            total_blocks,
            cache_hit_ratio: if total_blocks == 0 {
                0.0
            } else {
                reused_blocks as f64 / total_blocks as f64
            },
            migrations: self.plans.len(),
            makespan: self.now,
            events_processed: self.events,
            load_series: self.samples,
            fluctuation,
            requests,
        }
    }
}
