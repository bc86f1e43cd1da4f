//! Admission control under overload.
//!
//! Load is measured as SLO headroom: predicted TTFT over `l_ttft` for the
//! prefill pool and iteration time over `l_tbt` for the decoding pool. A value
//! of 1.0 means the bound is exhausted.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::conductor::{DecodeInstance, PrefillInstance, SloConfig};
use crate::error::{Error, Result};
use crate::perf_model::{decode_iteration_time, PerfModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoadSample {
    pub time: f64,
    pub prefill_load: f64,
    pub decode_load: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictionConfig {
    /// Assumed decode duration of every request, ms. `None` derives it from
    /// the workload at run start.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_d: Option<f64>,
    /// Lookahead, ms.
    pub horizon: f64,
    pub sample_period: f64,
}

impl Default for PredictionConfig {
    fn default() -> Self {
        Self {
            t_d: None,
            horizon: 1000.0,
            sample_period: 1000.0,
        }
    }
}

impl PredictionConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(t_d) = self.t_d {
            if !(t_d.is_finite() && t_d > 0.0) {
                return Err(Error::validation("t_d", format!("must be > 0, got {t_d}")));
            }
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(Error::validation("horizon", format!("must be > 0, got {}", self.horizon)));
        }
        if !(self.sample_period.is_finite() && self.sample_period > 0.0) {
            return Err(Error::validation(
                "sample_period",
                format!("must be > 0, got {}", self.sample_period),
            ));
        }
        Ok(())
    }
}

/// Default uniform decode duration: mean output length times `l_tbt`, the
/// iteration time a saturated decoding instance runs at.
pub fn default_t_d(mean_output: f64, slo: &SloConfig) -> f64 {
    (mean_output * slo.l_tbt).max(f64::MIN_POSITIVE)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AdmissionPolicy {
    /// Never reject.
    #[default]
    None,
    /// Reject at prefill entry and again at decode entry.
    Baseline,
    /// Reject at arrival on the larger of the two current loads.
    Early,
    /// Like `Early`, with the decode load predicted one horizon ahead.
    Predictive,
}

impl AdmissionPolicy {
    pub const ALL: [AdmissionPolicy; 4] = [
        AdmissionPolicy::None,
        AdmissionPolicy::Baseline,
        AdmissionPolicy::Early,
        AdmissionPolicy::Predictive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AdmissionPolicy::None => "none",
            AdmissionPolicy::Baseline => "baseline",
            AdmissionPolicy::Early => "early",
            AdmissionPolicy::Predictive => "predictive",
        }
    }
}

impl fmt::Display for AdmissionPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AdmissionPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.to_ascii_lowercase();
        let s = match s.as_str() {
            "early_rejection" | "early-rejection" => "early",
            "predictive_admission" | "predictive-admission" | "prediction" => "predictive",
            other => other,
        };
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::validation("admission", format!("unknown admission policy `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    PrefillEntry,
    DecodeEntry,
}

/// Max over prefill instances of outstanding work (in-flight remainder plus
/// queue) relative to `l_ttft`.
pub fn measure_prefill_load(pool: &[PrefillInstance], slo: &SloConfig, now: f64) -> f64 {
    pool.iter()
        .map(|p| p.queue_time(now) / slo.l_ttft)
        .fold(0.0, f64::max)
}

/// Iteration time of the batch an instance is (or is about to be) running,
/// relative to `l_tbt`; zero when empty.
pub fn instance_decode_load(inst: &DecodeInstance, perf: &PerfModelParams, slo: &SloConfig) -> f64 {
    let b = inst.batch.len() + inst.pending.len();
    if b == 0 {
        return 0.0;
    }
    let k = inst.resident_kv() + inst.pending.iter().map(|s| s.kv_tokens).sum::<u64>();
    decode_iteration_time(b, k, perf).expect("non-empty batch") / slo.l_tbt
}

pub fn measure_decode_load(pool: &[DecodeInstance], perf: &PerfModelParams, slo: &SloConfig) -> f64 {
    pool.iter()
        .map(|d| instance_decode_load(d, perf, slo))
        .fold(0.0, f64::max)
}

pub fn mean_decode_load(pool: &[DecodeInstance], perf: &PerfModelParams, slo: &SloConfig) -> f64 {
    if pool.is_empty() {
        return 0.0;
    }
    pool.iter().map(|d| instance_decode_load(d, perf, slo)).sum::<f64>() / pool.len() as f64
}

pub fn exceeds(load: f64, threshold: f64) -> bool {
    load >= threshold
}

/// Per-stage check: true when the request is accepted.
pub fn baseline_admission(stage_load: f64, threshold: f64) -> bool {
    !exceeds(stage_load, threshold)
}

pub fn early_rejection(prefill_load: f64, decode_load: f64, threshold: f64) -> bool {
    !exceeds(prefill_load.max(decode_load), threshold)
}

pub fn predictive_admission(prefill_load: f64, predicted_decode_load: f64, threshold: f64) -> bool {
    !exceeds(prefill_load.max(predicted_decode_load), threshold)
}

/// A request decoding (or about to decode) on a known instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Resident {
    /// Time since the request's decoding started, ms.
    pub elapsed: f64,
    pub kv_tokens: u64,
}

/// A request still in the prefill pipeline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Incoming {
    pub completes_at: f64,
    pub kv_tokens: u64,
}

/// What the predictor sees of the cluster at `now`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClusterSnapshot {
    pub now: f64,
    /// Residents per decoding instance.
    pub decode: Vec<Vec<Resident>>,
    pub pipeline: Vec<Incoming>,
}

impl ClusterSnapshot {
    /// Captures both pools. Requests whose KVCache is in flight count as
    /// residents of their target instance with zero elapsed time; queued
    /// prefills are projected FIFO from each instance's in-flight job.
    pub fn capture(prefill: &[PrefillInstance], decode: &[DecodeInstance], now: f64) -> Self {
        let decode = decode
            .iter()
            .map(|d| {
                let mut residents: Vec<Resident> = d
                    .batch
                    .iter()
                    .chain(d.pending.iter())
                    .map(|s| Resident {
                        elapsed: (now - s.joined_at).max(0.0),
                        kv_tokens: s.kv_tokens,
                    })
                    .collect();
                if d.inbound > 0 {
                    let per = d.inbound_kv / d.inbound as u64;
                    let rem = d.inbound_kv % d.inbound as u64;
                    for i in 0..d.inbound {
                        residents.push(Resident {
                            elapsed: 0.0,
                            kv_tokens: per + u64::from((i as u64) < rem),
                        });
                    }
                }
                residents
            })
            .collect();
        let mut pipeline = Vec::new();
        for p in prefill {
            let mut clock = now;
            if let Some(r) = &p.running {
                clock = r.ends_at.max(now);
                pipeline.push(Incoming {
                    completes_at: clock,
                    kv_tokens: r.job.input_len as u64,
                });
            }
            for job in &p.queue {
                clock = clock.max(job.ready_at) + job.duration;
                pipeline.push(Incoming {
                    completes_at: clock,
                    kv_tokens: job.input_len as u64,
                });
            }
        }
        Self { now, decode, pipeline }
    }
}

/// Mean over decoding instances of the iteration time of the batch expected
/// at `now + horizon`, relative to `l_tbt`. Residents whose decode will have
/// run for `t_d` leave; prefills finishing by then join round-robin in order
/// of completion.
pub fn predict_decode_load(snapshot: &ClusterSnapshot, t_d: f64, horizon: f64, perf: &PerfModelParams, slo: &SloConfig) -> f64 {
    let n = snapshot.decode.len();
    if n == 0 {
        return 0.0;
    }
    let t = snapshot.now + horizon;
    let mut future: Vec<(usize, u64)> = snapshot
        .decode
        .iter()
        .map(|rs| {
            rs.iter()
                .filter(|r| r.elapsed + horizon < t_d)
                .fold((0, 0), |(b, k), r| (b + 1, k + r.kv_tokens))
        })
        .collect();

    let mut arriving: Vec<&Incoming> = snapshot.pipeline.iter().filter(|i| i.completes_at <= t).collect();
    arriving.sort_by(|a, b| a.completes_at.total_cmp(&b.completes_at));
    for (i, inc) in arriving.into_iter().enumerate() {
        let slot = &mut future[i % n];
        slot.0 += 1;
        slot.1 += inc.kv_tokens;
    }

    future
        .into_iter()
        .map(|(b, k)| {
            if b == 0 {
                0.0
            } else {
                decode_iteration_time(b, k, perf).expect("non-empty batch") / slo.l_tbt
            }
        })
        .sum::<f64>()
        / n as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FluctuationStats {
    pub pearson_r: f64,
    pub amplitude_p: f64,
    pub amplitude_d: f64,
    /// Set when one of the series is constant and `pearson_r` is reported as 0.
    pub degenerate: bool,
}

fn amplitude(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    let min = xs.fold(f64::INFINITY, f64::min);
    max - min
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len().min(ys.len());
    if n < 2 {
        return None;
    }
    let mx = xs[..n].iter().sum::<f64>() / n as f64;
    let my = ys[..n].iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs[..n].iter().zip(&ys[..n]) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

pub fn fluctuation_stats(series: &[LoadSample]) -> Result<FluctuationStats> {
    if series.len() < 2 {
        return Err(Error::validation("load_series", format!("need >= 2 samples, got {}", series.len())));
    }
    let p: Vec<f64> = series.iter().map(|s| s.prefill_load).collect();
    let d: Vec<f64> = series.iter().map(|s| s.decode_load).collect();
    let r = pearson(&p, &d);
    Ok(FluctuationStats {
        pearson_r: r.unwrap_or(0.0),
        amplitude_p: amplitude(p.iter().copied()),
        amplitude_d: amplitude(d.iter().copied()),
        degenerate: r.is_none(),
    })
}

/// [`fluctuation_stats`] over the samples taken in `[from, to]`, which keeps
/// warm-up and drain out of the measurement.
pub fn windowed_fluctuation(series: &[LoadSample], from: f64, to: f64) -> Result<FluctuationStats> {
    let window: Vec<LoadSample> = series.iter().copied().filter(|s| s.time >= from && s.time <= to).collect();
    fluctuation_stats(&window)
}
