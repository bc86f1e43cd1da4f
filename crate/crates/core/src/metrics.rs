//! Latency statistics shared by the engine and the reports.

use serde::{Deserialize, Serialize};

use crate::conductor::SloConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SloClass {
    WithinSlo,
    Violated,
}

/// Inclusive on both bounds: `ttft == l_ttft` is within the SLO.
pub fn record_ttft_tbt(ttft: f64, tbts: &[f64], slo: &SloConfig) -> SloClass {
    if ttft <= slo.l_ttft && tbts.iter().all(|&g| g <= slo.l_tbt) {
        SloClass::WithinSlo
    } else {
        SloClass::Violated
    }
}

/// Nearest-rank percentile, `q` in (0, 1]. `None` for an empty sample.
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = (q * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

pub fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Empirical CDF as `(value, fraction <= value)` for each distinct value.
pub fn cdf_export(values: &[f64]) -> Vec<(f64, f64)> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (i, v) in sorted.iter().enumerate() {
        let frac = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == *v => last.1 = frac,
            _ => out.push((*v, frac)),
        }
    }
    out
}
