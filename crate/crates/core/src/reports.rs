//! Experiment drivers behind the command-line tool, and their CSV/JSON output.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::info;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::conductor::SchedulerChoice;
use crate::config::RunConfig;
use crate::engine::{run, SimReport};
use crate::error::{Error, Result};
use crate::kvcache::{capacity_label, policy_sweep, popularity_cdf, unused_block_fraction, Capacity, EvictionPolicy};
use crate::metrics::cdf_export;
use crate::overload::AdmissionPolicy;
use crate::trace::{trace_to_string, RequestRecord};

/// Capacities swept by `analyze-cache` when none are given, in blocks.
pub const DEFAULT_CAPACITIES: [Capacity; 6] = [None, Some(100_000), Some(50_000), Some(30_000), Some(10_000), Some(1_000)];

/// Hex SHA-256 of the trace in its canonical JSONL form.
pub fn trace_digest(trace: &[RequestRecord]) -> String {
    let digest = Sha256::digest(trace_to_string(trace).as_bytes());
    digest.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub fn cdf_csv(values: &[f64], column: &str) -> String {
    let mut out = format!("{column},cdf\n");
    for (v, f) in cdf_export(values) {
        let _ = writeln!(out, "{v:.3},{f:.6}");
    }
    out
}

pub fn load_series_csv(report: &SimReport) -> String {
    let mut out = String::from("time,prefill_load,decode_load\n");
    for s in &report.load_series {
        let _ = writeln!(out, "{:.3},{:.6},{:.6}", s.time, s.prefill_load, s.decode_load);
    }
    out
}

/// Loads the trace and runs one simulation.
pub fn replay(cfg: &RunConfig) -> Result<(Vec<RequestRecord>, SimReport)> {
    let trace = cfg.load_trace()?;
    let sim = cfg.sim_config(&trace)?;
    info!(
        "replaying {} requests on {} ({}, admission {})",
        trace.len(),
        sim.cluster,
        sim.scheduler,
        sim.admission
    );
    let report = run(&trace, &sim)?;
    Ok((trace, report))
}

/// Writes the report, per-request table, latency CDFs, load series and the
/// materialized config into `dir`. Returns the paths written.
pub fn write_replay(dir: &Path, cfg: &RunConfig, report: &SimReport) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let files = [
        ("report.json", report.to_json()),
        ("requests.csv", report.requests_csv()),
        ("ttft_cdf.csv", cdf_csv(&report.ttfts(), "ttft_ms")),
        ("tbt_cdf.csv", cdf_csv(&report.tbts(), "tbt_ms")),
        ("load_series.csv", load_series_csv(report)),
        ("config.toml", cfg.to_toml_string()),
    ];
    let mut written = Vec::with_capacity(files.len());
    for (name, body) in files {
        let path = dir.join(name);
        fs::write(&path, body)?;
        written.push(path);
    }
    Ok(written)
}

/// Hit ratio per (policy, capacity).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CacheGrid {
    pub capacities: Vec<Capacity>,
    pub rows: Vec<(EvictionPolicy, Vec<f64>)>,
}

impl CacheGrid {
    pub fn get(&self, policy: EvictionPolicy, capacity: Capacity) -> Option<f64> {
        let col = self.capacities.iter().position(|&c| c == capacity)?;
        self.rows.iter().find(|(p, _)| *p == policy).map(|(_, v)| v[col])
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("policy");
        for &c in &self.capacities {
            let _ = write!(out, ",{}", capacity_label(c));
        }
        out.push('\n');
        for (policy, ratios) in &self.rows {
            out.push_str(policy.name());
            for r in ratios {
                let _ = write!(out, ",{r:.4}");
            }
            out.push('\n');
        }
        out
    }
}

pub fn analyze_cache(trace: &[RequestRecord], policies: &[EvictionPolicy], capacities: &[Capacity]) -> Result<CacheGrid> {
    if policies.is_empty() {
        return Err(Error::validation("policies", "at least one policy required"));
    }
    let rows = policies
        .iter()
        .map(|&p| Ok((p, policy_sweep(trace, p, capacities)?.into_iter().map(|(_, r)| r).collect())))
        .collect::<Result<_>>()?;
    Ok(CacheGrid {
        capacities: capacities.to_vec(),
        rows,
    })
}

pub fn popularity_csv(trace: &[RequestRecord]) -> String {
    let mut out = String::from("hit_count,cdf\n");
    for (h, f) in popularity_cdf(trace) {
        let _ = writeln!(out, "{h},{f:.6}");
    }
    out
}

pub fn unused_fraction(trace: &[RequestRecord]) -> f64 {
    unused_block_fraction(&popularity_cdf(trace))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompareAxis {
    Scheduler,
    Admission,
}

impl FromStr for CompareAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scheduler" => Ok(CompareAxis::Scheduler),
            "admission" => Ok(CompareAxis::Admission),
            _ => Err(Error::validation("axis", format!("expected `scheduler` or `admission`, got `{s}`"))),
        }
    }
}

impl CompareAxis {
    pub fn all_variants(self) -> Vec<String> {
        match self {
            CompareAxis::Scheduler => SchedulerChoice::ALL.iter().map(|c| c.name().to_string()).collect(),
            CompareAxis::Admission => AdmissionPolicy::ALL.iter().map(|c| c.name().to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub variant: String,
    pub trace_sha256: String,
    pub seed: u64,
    pub arrived: usize,
    pub completed: usize,
    pub goodput: usize,
    pub mean_ttft: Option<f64>,
    pub p90_ttft: Option<f64>,
    pub p90_tbt: Option<f64>,
    pub slo_attainment: f64,
    pub rejected_at_admission: usize,
    pub rejected_at_decode: usize,
    pub wasted_prefill_tokens: u64,
    pub pearson_r: Option<f64>,
    pub amplitude_p: Option<f64>,
    pub amplitude_d: Option<f64>,
}

impl CompareRow {
    fn from_report(variant: String, digest: String, seed: u64, r: &SimReport) -> Self {
        Self {
            variant,
            trace_sha256: digest,
            seed,
            arrived: r.arrived,
            completed: r.completed,
            goodput: r.goodput,
            mean_ttft: r.mean_ttft,
            p90_ttft: r.p90_ttft,
            p90_tbt: r.p90_tbt,
            slo_attainment: r.slo_attainment,
            rejected_at_admission: r.rejected_at_admission,
            rejected_at_decode: r.rejected_at_decode,
            wasted_prefill_tokens: r.wasted_prefill_tokens,
            pearson_r: r.fluctuation.map(|f| f.pearson_r),
            amplitude_p: r.fluctuation.map(|f| f.amplitude_p),
            amplitude_d: r.fluctuation.map(|f| f.amplitude_d),
        }
    }
}

/// Runs one simulation per variant along `axis`, every one on the same trace
/// and seed. Variants run on separate threads; rows come back in input order.
pub fn compare(cfg: &RunConfig, axis: CompareAxis, variants: &[String]) -> Result<Vec<CompareRow>> {
    if variants.is_empty() {
        return Err(Error::validation("variants", "at least one variant required"));
    }
    let mut configs = Vec::with_capacity(variants.len());
    for v in variants {
        let mut c = cfg.clone();
        match axis {
            CompareAxis::Scheduler => c.scheduler = v.parse()?,
            CompareAxis::Admission => c.admission = v.parse()?,
        }
        configs.push(c);
    }
    let trace = cfg.load_trace()?;
    let digest = trace_digest(&trace);
    let results: Vec<Result<SimReport>> = std::thread::scope(|s| {
        let handles: Vec<_> = configs
            .iter()
            .map(|c| {
                let trace = &trace;
                s.spawn(move || run(trace, &c.sim_config(trace)?))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("simulation thread panicked")).collect()
    });
    variants
        .iter()
        .zip(results)
        .map(|(v, r)| {
            let report = r?;
            info!("variant {v}: trace sha256 {digest}, seed {}", cfg.seed);
            Ok(CompareRow::from_report(v.clone(), digest.clone(), cfg.seed, &report))
        })
        .collect()
}

pub fn compare_csv(rows: &[CompareRow]) -> String {
    let mut out = String::from(
        "variant,trace_sha256,seed,arrived,completed,goodput,mean_ttft,p90_ttft,p90_tbt,slo_attainment,\
         rejected_at_admission,rejected_at_decode,wasted_prefill_tokens,pearson_r,amplitude_p,amplitude_d\n",
    );
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.4}"));
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{:.4},{},{},{},{},{},{}",
            r.variant,
            r.trace_sha256,
            r.seed,
            r.arrived,
            r.completed,
            r.goodput,
            opt(r.mean_ttft),
            opt(r.p90_ttft),
            opt(r.p90_tbt),
            r.slo_attainment,
            r.rejected_at_admission,
            r.rejected_at_decode,
            r.wasted_prefill_tokens,
            opt(r.pearson_r),
            opt(r.amplitude_p),
            opt(r.amplitude_d),
        );
    }
    out
}
