//! Browser bindings for the kvsched simulator. Every entry point takes plain
//! numbers and returns a JSON string for the page to plot.

use kvsched::conductor::SloConfig;
use kvsched::kvcache::{popularity_cdf, unused_block_fraction, EvictionPolicy};
use kvsched::overload::AdmissionPolicy;
use kvsched::perf_model::{estimate_prefill_time, prefill_duration, PerfModelParams};
use kvsched::reports::analyze_cache;
use kvsched::trace::{generate_workload, LengthDist, WorkloadSpec};
use kvsched::{run, ClusterConfig, SimConfig};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

const SWEEP_CAPACITIES: [Option<usize>; 6] = [None, Some(4000), Some(1000), Some(400), Some(100), Some(20)];

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// Hit ratio of every eviction policy across a capacity sweep, plus the
/// block popularity CDF, for a generated prefix-sharing workload.
pub fn cache_sweep_json(requests: usize, cache_ratio: f64, prefix_groups: u32, seed: u64) -> Result<Value, String> {
    let mut spec = WorkloadSpec::poisson(4.0, 8192, 64, cache_ratio, requests, seed);
    spec.input_length = LengthDist::Uniform { min: 512, max: 16_000 };
    spec.prefix_groups = prefix_groups.max(1);
    let trace = generate_workload(&spec).map_err(err)?;
    let grid = analyze_cache(&trace, &EvictionPolicy::ALL, &SWEEP_CAPACITIES).map_err(err)?;
    let cdf = popularity_cdf(&trace);
    Ok(json!({
        "capacities": SWEEP_CAPACITIES.iter().map(|c| c.map_or("Inf".to_string(), |c| c.to_string())).collect::<Vec<_>>(),
        "rows": grid.rows.iter().map(|(p, r)| json!({"policy": p.name(), "hit_ratio": r})).collect::<Vec<_>>(),
        "popularity": cdf,
        "unused_fraction": unused_block_fraction(&cdf),
    }))
}

/// Prefill time against prompt length: full recompute, reuse of a cached
/// prefix, and the same with the pipelined, layer-wise execution model.
pub fn prefill_curve_json(max_input: u64, cached_fraction: f64, cpp_group_size: u32) -> Result<Value, String> {
    if !(0.0..=1.0).contains(&cached_fraction) {
        return Err(format!("cached fraction {cached_fraction} outside [0, 1]"));
    }
    let perf = PerfModelParams {
        cpp_group_size: cpp_group_size.max(1),
        ..PerfModelParams::dummy_70b()
    };
    perf.validate().map_err(err)?;
    let steps = 40u64;
    let points = (1..=steps)
        .map(|k| {
            let input = (max_input.max(steps) * k / steps).max(1);
            let prefix = (input as f64 * cached_fraction) as u64;
            Ok(json!({
                "input": input,
                "recompute": estimate_prefill_time(input, 0, &perf).map_err(err)?,
                "reuse": estimate_prefill_time(input, prefix, &perf).map_err(err)?,
                "pipelined": prefill_duration(input, prefix, &perf).map_err(err)?,
            }))
        })
        .collect::<Result<Vec<_>, String>>()?;
    Ok(json!({ "points": points }))
}

/// One overloaded run on a small cluster under the named admission policy.
pub fn overload_run_json(rate_rps: f64, admission: &str, threshold: f64, requests: usize, seed: u64) -> Result<Value, String> {
    let admission: AdmissionPolicy = admission.parse().map_err(err)?;
    let perf = PerfModelParams {
        alpha_mlp: 0.2,
        delta_decode: 36.0,
        ..PerfModelParams::dummy_70b()
    };
    let trace = generate_workload(&WorkloadSpec::poisson(rate_rps, 8192, 64, 0.0, requests, seed)).map_err(err)?;
    let mut cfg = SimConfig::new(ClusterConfig::new(4, 4), perf, SloConfig::paper_slo(&perf, 8192));
    cfg.admission = admission;
    cfg.admission_threshold = threshold;
    cfg.prediction.horizon = 2000.0;
    cfg.seed = seed;
    let r = run(&trace, &cfg).map_err(err)?;
    Ok(json!({
        "admission": admission.to_string(),
        "arrived": r.arrived,
        "goodput": r.goodput,
        "rejected_at_admission": r.rejected_at_admission,
        "rejected_at_decode": r.rejected_at_decode,
        "wasted_prefill_tokens": r.wasted_prefill_tokens,
        "mean_ttft": r.mean_ttft,
        "slo_attainment": r.slo_attainment,
        "fluctuation": r.fluctuation,
        "load_series": r.load_series.iter().map(|s| [s.time, s.prefill_load, s.decode_load]).collect::<Vec<_>>(),
    }))
}

fn to_js(v: Result<Value, String>) -> Result<String, JsError> {
    v.map(|v| v.to_string()).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn cache_sweep(requests: usize, cache_ratio: f64, prefix_groups: u32, seed: u64) -> Result<String, JsError> {
    to_js(cache_sweep_json(requests, cache_ratio, prefix_groups, seed))
}

#[wasm_bindgen]
pub fn prefill_curve(max_input: u64, cached_fraction: f64, cpp_group_size: u32) -> Result<String, JsError> {
    to_js(prefill_curve_json(max_input, cached_fraction, cpp_group_size))
}

#[wasm_bindgen]
pub fn overload_run(rate_rps: f64, admission: &str, threshold: f64, requests: usize, seed: u64) -> Result<String, JsError> {
    to_js(overload_run_json(rate_rps, admission, threshold, requests, seed))
}
