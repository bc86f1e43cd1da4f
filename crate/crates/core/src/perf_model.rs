//! Analytic cost models for prefill, decode and KVCache movement.
//!
//! All durations are milliseconds. Prefill time is modeled as
//! `alpha * u + beta * u * L` for `u` uncached tokens out of an `L`-token
//! context, decode iteration time as `gamma + delta * B + epsilon * K / 1000`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerfModelParams {
    /// ms per uncached token.
    pub alpha_mlp: f64,
    /// ms per (uncached token x context token).
    pub beta_attn: f64,
    /// ms fixed per decode iteration.
    pub gamma_decode: f64,
    /// ms per batched request per iteration.
    pub delta_decode: f64,
    /// ms per 1000 resident KV tokens per iteration.
    pub epsilon_decode: f64,
    pub kv_bytes_per_token: f64,
    /// Inter-node link, bytes per ms.
    pub link_bandwidth: f64,
    /// Cache-to-GPU load path, bytes per ms.
    pub load_bandwidth: f64,
    /// Maximum tokens per prefill chunk.
    pub prefill_chunk: u32,
    /// Nodes per pipelined prefill group.
    pub cpp_group_size: u32,
}

impl PerfModelParams {
    pub const DUMMY_70B: &'static str = "dummy-70B";

    /// Illustrative coefficients for a 70B-class dense model on one 8-GPU node.
    /// Not calibrated against real hardware.
    pub fn dummy_70b() -> Self {
        Self {
            alpha_mlp: 0.06,
            beta_attn: 2.0e-6,
            gamma_decode: 30.0,
            delta_decode: 0.3,
            epsilon_decode: 0.05,
            // 80 layers * 8 KV heads * 128 dims * (K, V) * fp16
            kv_bytes_per_token: 327_680.0,
            // 800 Gbps
            link_bandwidth: 1.0e8,
            load_bandwidth: 2.5e7,
            prefill_chunk: 4096,
            cpp_group_size: 1,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "dummy-70b" | "dummy_70b" => Some(Self::dummy_70b()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let coeffs = [
            ("alpha_mlp", self.alpha_mlp),
            ("beta_attn", self.beta_attn),
            ("gamma_decode", self.gamma_decode),
            ("delta_decode", self.delta_decode),
            ("epsilon_decode", self.epsilon_decode),
            ("kv_bytes_per_token", self.kv_bytes_per_token),
        ];
        for (field, v) in coeffs {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::validation(field, format!("must be finite and >= 0, got {v}")));
            }
        }
        for (field, v) in [("link_bandwidth", self.link_bandwidth), ("load_bandwidth", self.load_bandwidth)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::validation(field, format!("must be > 0, got {v}")));
            }
        }
        if self.prefill_chunk == 0 {
            return Err(Error::validation("prefill_chunk", "must be >= 1"));
        }
        if self.cpp_group_size == 0 {
            return Err(Error::validation("cpp_group_size", "must be >= 1"));
        }
        Ok(())
    }
}

impl Default for PerfModelParams {
    fn default() -> Self {
        Self::dummy_70b()
    }
}

/// Compute time of a prefill over `input_len` tokens of which `prefix_len`
/// are already cached.
pub fn estimate_prefill_time(input_len: u64, prefix_len: u64, params: &PerfModelParams) -> Result<f64> {
    if prefix_len > input_len {
        return Err(Error::validation(
            "prefix_len",
            format!("{prefix_len} exceeds input length {input_len}"),
        ));
    }
    let u = (input_len - prefix_len) as f64;
    Ok(params.alpha_mlp * u + params.beta_attn * u * input_len as f64)
}

/// Pure payload time of moving `tokens` tokens of KVCache over the link.
pub fn transfer_payload_time(tokens: u64, params: &PerfModelParams) -> f64 {
    tokens as f64 * params.kv_bytes_per_token / params.link_bandwidth
}

/// Transfer time including the wait for a congested sender.
pub fn estimate_transfer_time(transfer_len: u64, params: &PerfModelParams, sender_busy_until: f64, now: f64) -> f64 {
    (sender_busy_until - now).max(0.0) + transfer_payload_time(transfer_len, params)
}

/// Reserves the sender's link for a transfer of `payload_ms` and returns its
/// completion time.
pub fn commit_transfer(sender_busy_until: &mut f64, now: f64, payload_ms: f64) -> f64 {
    *sender_busy_until = sender_busy_until.max(now) + payload_ms;
    *sender_busy_until
}

/// Sum of the remaining prefill times on an instance.
pub fn estimate_queue_time(remaining: &[f64]) -> f64 {
    remaining.iter().sum()
}

pub fn decode_iteration_time(batch_size: usize, resident_kv_tokens: u64, params: &PerfModelParams) -> Result<f64> {
    if batch_size == 0 {
        return Err(Error::validation("batch_size", "decode batch must be non-empty"));
    }
    Ok(params.gamma_decode
        + params.delta_decode * batch_size as f64
        + params.epsilon_decode * resident_kv_tokens as f64 / 1000.0)
}

/// Time to stream `prefix_len` cached tokens from the cache pool into GPU memory.
pub fn cache_load_time(prefix_len: u64, params: &PerfModelParams) -> f64 {
    prefix_len as f64 * params.kv_bytes_per_token / params.load_bandwidth
}

/// Layer-wise prefill overlaps cache loads and stores with compute; the slower
/// of compute and load dominates and stores add nothing.
pub fn layerwise_effective_prefill(compute_time: f64, cache_load_time: f64) -> f64 {
    compute_time.max(cache_load_time)
}

/// Per-chunk compute times for `uncached` new tokens following `prefix_len`
/// cached ones. Each chunk attends to everything up to its own end.
pub fn chunk_times(uncached: u64, prefix_len: u64, params: &PerfModelParams) -> Vec<f64> {
    let chunk = params.prefill_chunk as u64;
    let mut times = Vec::with_capacity(uncached.div_ceil(chunk) as usize);
    let mut done = 0u64;
    while done < uncached {
        let c = chunk.min(uncached - done);
        done += c;
        let context = prefix_len + done;
        times.push(params.alpha_mlp * c as f64 + params.beta_attn * c as f64 * context as f64);
    }
    times
}

/// Fill-drain latency of a chunk pipeline over `cpp_group_size` stages:
/// `sum(t)/X + (X - 1) * max(t)/X`.
pub fn pipeline_latency(chunk_times: &[f64], stages: u32) -> f64 {
    let sum: f64 = chunk_times.iter().sum();
    if stages <= 1 {
        return sum;
    }
    let x = stages as f64;
    let max = chunk_times.iter().copied().fold(0.0, f64::max);
    // same value rearranged so rounding never puts it above the serial sum
    (max + (sum - max) / x).min(sum)
}

/// Chunked-pipeline-parallel prefill latency for `uncached` tokens after a
/// cached prefix of `prefix_len` tokens.
pub fn cpp_prefill_latency(uncached: u64, prefix_len: u64, params: &PerfModelParams) -> f64 {
    pipeline_latency(&chunk_times(uncached, prefix_len, params), params.cpp_group_size)
}

/// End-to-end prefill duration used for scheduling and simulation: compute
/// (pipelined when the uncached part exceeds one chunk) overlapped with the
/// prefix load.
pub fn prefill_duration(input_len: u64, prefix_len: u64, params: &PerfModelParams) -> Result<f64> {
    let uncached = input_len
        .checked_sub(prefix_len)
        .ok_or_else(|| Error::validation("prefix_len", format!("{prefix_len} exceeds input length {input_len}")))?;
    let compute = if uncached > params.prefill_chunk as u64 {
        cpp_prefill_latency(uncached, prefix_len, params)
    } else {
        estimate_prefill_time(input_len, prefix_len, params)?
    };
    Ok(layerwise_effective_prefill(compute, cache_load_time(prefix_len, params)))
}
