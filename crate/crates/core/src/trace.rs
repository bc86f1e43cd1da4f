//! Request traces: parsing the JSON-lines trace format, synthetic workload
//! generation and replay-speed rescaling.
//!
//! A trace record carries only timing and sizes plus the prefix-chained block
//! IDs of its prompt. Two records whose `hash_ids` agree on the first `k`
//! entries share the first `k * block_size` prompt tokens.

use std::collections::BTreeSet;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// Block size of the public trace, in tokens.
pub const TRACE_BLOCK_SIZE: u32 = 512;

/// One request from a trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub request_id: u64,
    /// Milliseconds since trace start.
    pub timestamp: u64,
    pub input_length: u32,
    pub output_length: u32,
    pub hash_ids: Vec<u64>,
}

impl RequestRecord {
    pub fn block_count(&self) -> usize {
        self.hash_ids.len()
    }
}

/// Number of blocks needed for `tokens` tokens.
pub fn blocks_for(tokens: u32, block_size: u32) -> usize {
    tokens.div_ceil(block_size) as usize
}

#[derive(Debug, Clone, Copy)]
pub struct TraceOptions {
    pub block_size: u32,
    /// Reject records whose `hash_ids` length is not `ceil(input_length / block_size)`.
    pub check_block_count: bool,
}

impl Default for TraceOptions {
    fn default() -> Self {
        Self {
            block_size: TRACE_BLOCK_SIZE,
            check_block_count: true,
        }
    }
}

/// Parses a trace with the default options (512-token blocks, strict block counts).
pub fn parse_trace<R: Read>(reader: R) -> Result<Vec<RequestRecord>> {
    parse_trace_with(reader, TraceOptions::default())
}

/// Parses newline- or whitespace-separated JSON objects.
///
/// `request_id` is assigned from input order; the result is stably sorted by
/// timestamp, so ties keep input order.
pub fn parse_trace_with<R: Read>(mut reader: R, opts: TraceOptions) -> Result<Vec<RequestRecord>> {
    let mut buf = Vec::new();
    reader.read_to_end(&mut buf)?;

    let mut records = Vec::new();
    let mut warned: BTreeSet<String> = BTreeSet::new();
    let mut stream = serde_json::Deserializer::from_slice(&buf).into_iter::<Value>();
    let mut offset = 0usize;
    loop {
        let start = offset
            + buf[offset..]
                .iter()
                .take_while(|b| b.is_ascii_whitespace())
                .count();
        let line = 1 + buf[..start].iter().filter(|&&b| b == b'\n').count();
        let value = match stream.next() {
            None => break,
            Some(Ok(v)) => v,
            Some(Err(e)) => {
                return Err(Error::Parse {
                    line: e.line().max(line),
                    message: e.to_string(),
                })
            }
        };
        offset = stream.byte_offset();
        let index = records.len();
        let obj = value.as_object().ok_or_else(|| Error::Parse {
            line,
            message: "expected a JSON object".into(),
        })?;
        let rec = record_from_object(obj, index, line, opts, &mut warned)?;
        records.push(rec);
    }
    records.sort_by_key(|r| r.timestamp);
    Ok(records)
}

fn record_from_object(
    obj: &Map<String, Value>,
    index: usize,
    line: usize,
    opts: TraceOptions,
    warned: &mut BTreeSet<String>,
) -> Result<RequestRecord> {
    const KNOWN: [&str; 4] = ["timestamp", "input_length", "output_length", "hash_ids"];
    for key in obj.keys() {
        if !KNOWN.contains(&key.as_str()) && warned.insert(key.clone()) {
            log::warn!("trace: ignoring unknown field `{key}` (first seen on line {line})");
        }
    }
    let bad = |field: &'static str, reason: &str| Error::Record {
        record: index,
        line,
        field,
        reason: reason.to_string(),
    };
    let uint = |field: &'static str| -> Result<u64> {
        match obj.get(field) {
            None => Err(bad(field, "missing")),
            Some(v) => v.as_u64().ok_or_else(|| {
                if v.as_i64().is_some_and(|x| x < 0) || v.as_f64().is_some_and(|x| x < 0.0) {
                    bad(field, "must be non-negative")
                } else {
                    bad(field, "expected a non-negative integer")
                }
            }),
        }
    };

    let timestamp = uint("timestamp")?;
    let input_length = uint("input_length")?;
    let output_length = uint("output_length")?;
    if input_length == 0 || input_length > u32::MAX as u64 {
        return Err(bad("input_length", "must be in [1, 2^32)"));
    }
    if output_length == 0 || output_length > u32::MAX as u64 {
        return Err(bad("output_length", "must be in [1, 2^32)"));
    }
    let ids = match obj.get("hash_ids") {
        None => return Err(bad("hash_ids", "missing")),
        Some(Value::Array(a)) => a,
        Some(_) => return Err(bad("hash_ids", "expected an array")),
    };
    let hash_ids = ids
        .iter()
        .map(|v| v.as_u64().ok_or_else(|| bad("hash_ids", "expected non-negative integers")))
        .collect::<Result<Vec<_>>>()?;
    let input_length = input_length as u32;
    if opts.check_block_count {
        let expected = blocks_for(input_length, opts.block_size);
        if hash_ids.len() != expected {
            return Err(bad(
                "hash_ids",
                &format!(
                    "has {} entries, expected ceil({input_length}/{}) = {expected}",
                    hash_ids.len(),
                    opts.block_size
                ),
            ));
        }
    }
    Ok(RequestRecord {
        request_id: index as u64,
        timestamp,
        input_length,
        output_length: output_length as u32,
        hash_ids,
    })
}

#[derive(Serialize)]
struct WireRecord<'a> {
    timestamp: u64,
    input_length: u32,
    output_length: u32,
    hash_ids: &'a [u64],
}

/// Writes records as JSON lines in the trace format.
pub fn write_trace<W: Write>(records: &[RequestRecord], mut writer: W) -> Result<()> {
    for r in records {
        let wire = WireRecord {
            timestamp: r.timestamp,
            input_length: r.input_length,
            output_length: r.output_length,
            hash_ids: &r.hash_ids,
        };
        serde_json::to_writer(&mut writer, &wire).map_err(std::io::Error::from)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

pub fn trace_to_string(records: &[RequestRecord]) -> String {
    let mut out = Vec::new();
    write_trace(records, &mut out).expect("writing to a Vec cannot fail");
    String::from_utf8(out).expect("serde_json emits UTF-8")
}

/// Divides every timestamp by `speedup`, flooring to whole milliseconds.
pub fn rescale_replay(records: &[RequestRecord], speedup: f64) -> Result<Vec<RequestRecord>> {
    if !(speedup.is_finite() && speedup > 0.0) {
        return Err(Error::validation("speedup", format!("must be > 0, got {speedup}")));
    }
    Ok(records
        .iter()
        .map(|r| RequestRecord {
            timestamp: (r.timestamp as f64 / speedup).floor() as u64,
            ..r.clone()
        })
        .collect())
}

/// Summary statistics of a trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceStats {
    pub requests: usize,
    pub mean_input_length: f64,
    pub mean_output_length: f64,
    pub total_blocks: usize,
    pub duration_ms: u64,
}

pub fn trace_stats(records: &[RequestRecord]) -> TraceStats {
    let n = records.len();
    let mean = |f: &dyn Fn(&RequestRecord) -> f64| {
        if n == 0 {
            0.0
        } else {
            records.iter().map(f).sum::<f64>() / n as f64
        }
    };
    TraceStats {
        requests: n,
        mean_input_length: mean(&|r| r.input_length as f64),
        mean_output_length: mean(&|r| r.output_length as f64),
        total_blocks: records.iter().map(|r| r.hash_ids.len()).sum(),
        duration_ms: records.last().map_or(0, |r| r.timestamp)
            - records.first().map_or(0, |r| r.timestamp),
    }
}

// ---------------------------------------------------------------------------
// Synthetic workloads
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArrivalProcess {
    Poisson { rate_rps: f64 },
    /// Use the given arrival times verbatim; must hold `request_count` entries.
    TimestampReplay { timestamps_ms: Vec<u64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LengthDist {
    Fixed(u32),
    Uniform { min: u32, max: u32 },
}

impl LengthDist {
    fn validate(&self, field: &'static str) -> Result<()> {
        match *self {
            LengthDist::Fixed(0) => Err(Error::validation(field, "must be >= 1")),
            LengthDist::Uniform { min, max } if min == 0 || min > max => {
                Err(Error::validation(field, format!("bad range [{min}, {max}]")))
            }
            _ => Ok(()),
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> u32 {
        match *self {
            LengthDist::Fixed(n) => n,
            LengthDist::Uniform { min, max } => rng.random_range(min..=max),
        }
    }
}

fn default_groups() -> u32 {
    1
}

fn default_block_size() -> u32 {
    TRACE_BLOCK_SIZE
}

/// Parameters of a synthetic workload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub arrival: ArrivalProcess,
    pub input_length: LengthDist,
    pub output_length: LengthDist,
    /// Fraction of each request's blocks taken from a shared hot chain.
    pub cache_ratio: f64,
    pub request_count: usize,
    pub seed: u64,
    /// Number of independent hot chains; each request draws one uniformly.
    #[serde(default = "default_groups")]
    pub prefix_groups: u32,
    #[serde(default = "default_block_size")]
    pub block_size: u32,
}

impl WorkloadSpec {
    pub fn poisson(rate_rps: f64, input: u32, output: u32, cache_ratio: f64, n: usize, seed: u64) -> Self {
        Self {
            arrival: ArrivalProcess::Poisson { rate_rps },
            input_length: LengthDist::Fixed(input),
            output_length: LengthDist::Fixed(output),
            cache_ratio,
            request_count: n,
            seed,
            prefix_groups: 1,
            block_size: TRACE_BLOCK_SIZE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.cache_ratio) {
            return Err(Error::validation("cache_ratio", format!("{} not in [0, 1]", self.cache_ratio)));
        }
        match &self.arrival {
            ArrivalProcess::Poisson { rate_rps } if !(rate_rps.is_finite() && *rate_rps > 0.0) => {
                return Err(Error::validation("rate_rps", format!("must be > 0, got {rate_rps}")));
            }
            ArrivalProcess::TimestampReplay { timestamps_ms } if timestamps_ms.len() != self.request_count => {
                return Err(Error::validation(
                    "timestamps_ms",
                    format!("{} timestamps for {} requests", timestamps_ms.len(), self.request_count),
                ));
            }
            _ => {}
        }
        self.input_length.validate("input_length")?;
        self.output_length.validate("output_length")?;
        if self.prefix_groups == 0 {
            return Err(Error::validation("prefix_groups", "must be >= 1"));
        }
        if self.block_size == 0 {
            return Err(Error::validation("block_size", "must be >= 1"));
        }
        Ok(())
    }
}

/// Generates a deterministic synthetic trace from `spec`.
///
/// The first `floor(cache_ratio * blocks)` IDs of each request come from the
/// request's hot chain (IDs `g*H .. g*H + H` for group `g`); the rest are
/// fresh IDs never reused.
pub fn generate_workload(spec: &WorkloadSpec) -> Result<Vec<RequestRecord>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    struct Draft {
        timestamp: u64,
        input: u32,
        output: u32,
        group: u64,
        shared: usize,
        blocks: usize,
    }

    let gap = match spec.arrival {
        ArrivalProcess::Poisson { rate_rps } => Some(Exp::new(rate_rps / 1000.0).expect("rate validated")),
        ArrivalProcess::TimestampReplay { .. } => None,
    };
    let mut clock = 0.0f64;
    let mut drafts = Vec::with_capacity(spec.request_count);
    for i in 0..spec.request_count {
        let timestamp = match (&spec.arrival, &gap) {
            (_, Some(exp)) => {
                clock += exp.sample(&mut rng);
                clock.floor() as u64
            }
            (ArrivalProcess::TimestampReplay { timestamps_ms }, None) => timestamps_ms[i],
            _ => unreachable!(),
        };
        let input = spec.input_length.sample(&mut rng);
        let output = spec.output_length.sample(&mut rng);
        let group = if spec.prefix_groups > 1 {
            rng.random_range(0..spec.prefix_groups) as u64
        } else {
            0
        };
        let blocks = blocks_for(input, spec.block_size);
        let shared = ((spec.cache_ratio * blocks as f64) + 1e-9).floor() as usize;
        drafts.push(Draft {
            timestamp,
            input,
            output,
            group,
            shared: shared.min(blocks),
            blocks,
        });
    }

    let hot_len = drafts.iter().map(|d| d.shared).max().unwrap_or(0) as u64;
    let mut next_fresh = hot_len * spec.prefix_groups as u64;
    let mut records: Vec<RequestRecord> = drafts
        .into_iter()
        .enumerate()
        .map(|(i, d)| {
            let base = d.group * hot_len;
            let mut hash_ids: Vec<u64> = (0..d.shared as u64).map(|k| base + k).collect();
            hash_ids.extend((d.shared..d.blocks).map(|_| {
                next_fresh += 1;
                next_fresh - 1
            }));
            RequestRecord {
                request_id: i as u64,
                timestamp: d.timestamp,
                input_length: d.input,
                output_length: d.output,
                hash_ids,
            }
        })
        .collect();
    records.sort_by_key(|r| r.timestamp);
    Ok(records)
}
