//! TOML run configuration.
//!
//! A [`RunConfig`] names a trace source (a JSONL file or a synthetic
//! workload), the cluster shape, the policies under test and the model
//! parameters. Loading fills every omitted field with its default, so
//! re-emitting a loaded config and loading it again yields the same value.
//!
//! ```toml
//! seed = 7
//! scheduler = "kvcache_centric"
//! admission = "predictive"
//!
//! [trace]
//! path = "trace.jsonl"
//!
//! [cluster]
//! shape = "8P+8D"
//! cache_capacity = "inf"
//!
//! [perf]
//! preset = "dummy-70B"
//! alpha_mlp = 0.08
//! ```

use std::fmt;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::conductor::{ConductorConfig, SchedulerChoice, SloConfig};
use crate::engine::{ClusterConfig, SimConfig};
use crate::error::{Error, Result};
use crate::kvcache::{parse_capacity, Capacity, EvictionPolicy};
use crate::overload::{AdmissionPolicy, PredictionConfig};
use crate::perf_model::PerfModelParams;
use crate::trace::{generate_workload, parse_trace, rescale_replay, trace_stats, RequestRecord, WorkloadSpec};

/// Cluster shapes with a name of their own.
pub const CLUSTER_PRESETS: [&str; 4] = ["3P+1D", "2P+2D", "8P+8D", "10P+10D"];

pub const PAPER_SLO: &str = "paper-slo";
pub const FIXED_SLO: &str = "fixed";

fn one() -> f64 {
    1.0
}

fn default_scheduler() -> SchedulerChoice {
    SchedulerChoice::KvcacheCentric
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// Arrival-time compression applied to the trace before replay.
    #[serde(default = "one")]
    pub speedup: f64,
    #[serde(default = "default_scheduler", with = "display_serde")]
    pub scheduler: SchedulerChoice,
    #[serde(default, with = "display_serde")]
    pub admission: AdmissionPolicy,
    #[serde(default = "one")]
    pub admission_threshold: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<TraceFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workload: Option<WorkloadSpec>,
    #[serde(default)]
    pub cluster: ClusterSection,
    #[serde(default)]
    pub perf: PerfSection,
    #[serde(default)]
    pub slo: SloSection,
    #[serde(default)]
    pub conductor: ConductorConfig,
    #[serde(default)]
    pub prediction: PredictionConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceFile {
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterSection {
    /// `"<n>P+<m>D"`.
    pub shape: String,
    #[serde(with = "capacity_serde")]
    pub cache_capacity: Capacity,
    #[serde(with = "display_serde")]
    pub eviction: EvictionPolicy,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decode_kv_capacity: Option<u64>,
}

impl Default for ClusterSection {
    fn default() -> Self {
        Self {
            shape: "8P+8D".into(),
            cache_capacity: None,
            eviction: EvictionPolicy::Lru,
            decode_kv_capacity: None,
        }
    }
}

impl ClusterSection {
    pub fn resolve(&self) -> Result<ClusterConfig> {
        let mut c: ClusterConfig = self.shape.parse()?;
        c.cache_capacity = self.cache_capacity;
        c.eviction = self.eviction;
        c.decode_kv_capacity = self.decode_kv_capacity;
        c.validate()?;
        Ok(c)
    }
}

/// Model coefficients: a named preset, with any field overridable.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerfSection {
    pub preset: Option<String>,
    pub alpha_mlp: Option<f64>,
    pub beta_attn: Option<f64>,
    pub gamma_decode: Option<f64>,
    pub delta_decode: Option<f64>,
    pub epsilon_decode: Option<f64>,
    pub kv_bytes_per_token: Option<f64>,
    pub link_bandwidth: Option<f64>,
    pub load_bandwidth: Option<f64>,
    pub prefill_chunk: Option<u32>,
    pub cpp_group_size: Option<u32>,
}

impl PerfSection {
    pub fn resolve(&self) -> Result<PerfModelParams> {
        let name = self.preset.as_deref().unwrap_or(PerfModelParams::DUMMY_70B);
        let mut p = PerfModelParams::preset(name)
            .ok_or_else(|| Error::validation("perf.preset", format!("unknown preset `{name}`")))?;
        macro_rules! apply {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { p.$f = v; } )* };
        }
        apply!(
            alpha_mlp,
            beta_attn,
            gamma_decode,
            delta_decode,
            epsilon_decode,
            kv_bytes_per_token,
            link_bandwidth,
            load_bandwidth,
            prefill_chunk,
            cpp_group_size
        );
        p.validate()?;
        Ok(p)
    }

    fn materialize(&mut self) -> Result<()> {
        let p = self.resolve()?;
        *self = Self {
            preset: Some(self.preset.clone().unwrap_or_else(|| PerfModelParams::DUMMY_70B.into())),
            alpha_mlp: Some(p.alpha_mlp),
            beta_attn: Some(p.beta_attn),
            gamma_decode: Some(p.gamma_decode),
            delta_decode: Some(p.delta_decode),
            epsilon_decode: Some(p.epsilon_decode),
            kv_bytes_per_token: Some(p.kv_bytes_per_token),
            link_bandwidth: Some(p.link_bandwidth),
            load_bandwidth: Some(p.load_bandwidth),
            prefill_chunk: Some(p.prefill_chunk),
            cpp_group_size: Some(p.cpp_group_size),
        };
        Ok(())
    }
}

/// Either multiples of an uncontended reference request (`paper-slo`) or
/// absolute bounds (`fixed`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SloSection {
    pub preset: String,
    pub ttft_multiplier: f64,
    pub tbt_multiplier: f64,
    /// Reference prompt length; omitted means the trace's mean input length.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference_input: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_ttft: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_tbt: Option<f64>,
}

impl Default for SloSection {
    fn default() -> Self {
        Self {
            preset: PAPER_SLO.into(),
            ttft_multiplier: SloConfig::TTFT_MULTIPLIER,
            tbt_multiplier: SloConfig::TBT_MULTIPLIER,
            reference_input: None,
            l_ttft: None,
            l_tbt: None,
        }
    }
}

impl SloSection {
    fn validate(&self) -> Result<()> {
        match self.preset.as_str() {
            PAPER_SLO => {
                for (field, v) in [
                    ("slo.ttft_multiplier", self.ttft_multiplier),
                    ("slo.tbt_multiplier", self.tbt_multiplier),
                ] {
                    if !(v.is_finite() && v > 0.0) {
                        return Err(Error::validation(field, format!("must be > 0, got {v}")));
                    }
                }
                if self.l_ttft.is_some() || self.l_tbt.is_some() {
                    return Err(Error::validation("slo.l_ttft", "absolute bounds need preset = \"fixed\""));
                }
                if self.reference_input == Some(0) {
                    return Err(Error::validation("slo.reference_input", "must be >= 1"));
                }
                Ok(())
            }
            FIXED_SLO => {
                let l_ttft = self.l_ttft.ok_or_else(|| Error::validation("slo.l_ttft", "required by preset \"fixed\""))?;
                let l_tbt = self.l_tbt.ok_or_else(|| Error::validation("slo.l_tbt", "required by preset \"fixed\""))?;
                SloConfig::fixed(l_ttft, l_tbt).validate()
            }
            other => Err(Error::validation(
                "slo.preset",
                format!("unknown preset `{other}`, expected `{PAPER_SLO}` or `{FIXED_SLO}`"),
            )),
        }
    }

    pub fn resolve(&self, perf: &PerfModelParams, trace: &[RequestRecord]) -> Result<SloConfig> {
        self.validate()?;
        if self.preset == FIXED_SLO {
            return Ok(SloConfig::fixed(self.l_ttft.unwrap_or_default(), self.l_tbt.unwrap_or_default()));
        }
        let reference = match self.reference_input {
            Some(n) => n,
            None if trace.is_empty() => {
                return Err(Error::validation("slo.reference_input", "required when the trace is empty"))
            }
            None => trace_stats(trace).mean_input_length.round().max(1.0) as u64,
        };
        Ok(SloConfig::from_reference(perf, reference, self.ttft_multiplier, self.tbt_multiplier))
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = Self {
            seed: 0,
            speedup: 1.0,
            scheduler: default_scheduler(),
            admission: AdmissionPolicy::None,
            admission_threshold: 1.0,
            out_dir: None,
            trace: None,
            workload: None,
            cluster: ClusterSection::default(),
            perf: PerfSection::default(),
            slo: SloSection::default(),
            conductor: ConductorConfig::default(),
            prediction: PredictionConfig::default(),
        };
        cfg.perf.materialize().expect("default preset exists");
        cfg
    }
}

impl RunConfig {
    /// Parses, fills defaults and validates.
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.perf.materialize()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.trace.is_some() && self.workload.is_some() {
            return Err(Error::validation("trace", "give either [trace] or [workload], not both"));
        }
        if let Some(w) = &self.workload {
            w.validate()?;
        }
        if !(self.speedup.is_finite() && self.speedup > 0.0) {
            return Err(Error::validation("speedup", format!("must be > 0, got {}", self.speedup)));
        }
        if !(self.admission_threshold.is_finite() && self.admission_threshold > 0.0) {
            return Err(Error::validation(
                "admission_threshold",
                format!("must be > 0, got {}", self.admission_threshold),
            ));
        }
        self.cluster.resolve()?;
        self.perf.resolve()?;
        self.slo.validate()?;
        self.conductor.validate()?;
        self.prediction.validate()
    }

    /// Replaces any configured source with a trace file.
    pub fn set_trace_path(&mut self, path: PathBuf) {
        self.trace = Some(TraceFile { path });
        self.workload = None;
    }

    /// Reads or generates the trace, then applies `speedup`.
    pub fn load_trace(&self) -> Result<Vec<RequestRecord>> {
        let records = match (&self.trace, &self.workload) {
            (Some(t), None) => read_trace_file(&t.path)?,
            (None, Some(w)) => generate_workload(w)?,
            (None, None) => return Err(Error::validation("trace", "no [trace] path or [workload] given")),
            (Some(_), Some(_)) => return Err(Error::validation("trace", "give either [trace] or [workload], not both")),
        };
        if self.speedup == 1.0 {
            Ok(records)
        } else {
            rescale_replay(&records, self.speedup)
        }
    }

    pub fn sim_config(&self, trace: &[RequestRecord]) -> Result<SimConfig> {
        let perf = self.perf.resolve()?;
        let slo = self.slo.resolve(&perf, trace)?;
        let mut sim = SimConfig::new(self.cluster.resolve()?, perf, slo);
        sim.scheduler = self.scheduler;
        sim.admission = self.admission;
        sim.admission_threshold = self.admission_threshold;
        sim.conductor = self.conductor;
        sim.prediction = self.prediction;
        sim.seed = self.seed;
        sim.validate()?;
        Ok(sim)
    }
}

pub fn read_trace_file(path: &Path) -> Result<Vec<RequestRecord>> {
    let file = File::open(path).map_err(|e| Error::Config(format!("cannot open trace {}: {e}", path.display())))?;
    parse_trace(BufReader::new(file))
}

mod capacity_serde {
    use super::*;

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Blocks(i64),
        Label(String),
    }

    pub fn serialize<S: Serializer>(c: &Capacity, s: S) -> Result<S::Ok, S::Error> {
        match c {
            Some(n) => s.serialize_u64(*n as u64),
            None => s.serialize_str("inf"),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Capacity, D::Error> {
        let text = match Raw::deserialize(d)? {
            Raw::Blocks(n) => n.to_string(),
            Raw::Label(s) => s,
        };
        parse_capacity(&text).map_err(serde::de::Error::custom)
    }
}

mod display_serde {
    use super::*;

    pub fn serialize<T: fmt::Display, S: Serializer>(v: &T, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(v)
    }

    pub fn deserialize<'de, T, D>(d: D) -> Result<T, D::Error>
    where
        T: FromStr,
        T::Err: fmt::Display,
        D: Deserializer<'de>,
    {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_materializes_defaults() {
        let cfg = RunConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.perf.alpha_mlp, Some(PerfModelParams::dummy_70b().alpha_mlp));
        assert_eq!(cfg.cluster.shape, "8P+8D");
    }

    #[test]
    fn round_trip_is_identity() {
        let text = r#"
            seed = 3
            admission = "early_rejection"
            [workload]
            cache_ratio = 0.5
            request_count = 10
            seed = 1
            input_length = { min = 100, max = 900 }
            output_length = 20
            arrival = { kind = "poisson", rate_rps = 2.0 }
            [cluster]
            shape = "3P+1D"
            cache_capacity = 4096
            eviction = "LFUCache"
            [perf]
            alpha_mlp = 0.1
            [slo]
            preset = "fixed"
            l_ttft = 3000.0
            l_tbt = 100.0
            [prediction]
            horizon = 500.0
        "#;
        let cfg = RunConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.admission, AdmissionPolicy::Early);
        assert_eq!(cfg.cluster.eviction, EvictionPolicy::Lfu);
        assert_eq!(cfg.prediction.sample_period, 1000.0);
        let again = RunConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn errors_name_the_field() {
        let err = RunConfig::from_toml_str("[conductor]\nkvcache_balancing_threshold = 0.5").unwrap_err();
        assert!(err.to_string().contains("kvcache_balancing_threshold"), "{err}");
        let err = RunConfig::from_toml_str("[perf]\npreset = \"tiny\"").unwrap_err();
        assert!(err.to_string().contains("perf.preset"), "{err}");
        let err = RunConfig::from_toml_str("[slo]\npreset = \"fixed\"\nl_tbt = 1.0").unwrap_err();
        assert!(err.to_string().contains("slo.l_ttft"), "{err}");
        let err = RunConfig::from_toml_str("bogus = 1").unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
        let err = RunConfig::from_toml_str("[cluster]\nshape = \"3X\"").unwrap_err();
        assert!(err.to_string().contains("cluster"), "{err}");
    }

    #[test]
    fn presets_parse() {
        for shape in CLUSTER_PRESETS {
            let cfg = RunConfig::from_toml_str(&format!("[cluster]\nshape = \"{shape}\"")).unwrap();
            assert_eq!(cfg.cluster.resolve().unwrap().shape(), shape);
        }
    }

    #[test]
    fn paper_slo_uses_trace_mean_input() {
        let trace = vec![RequestRecord {
            request_id: 0,
            timestamp: 0,
            input_length: 1024,
            output_length: 4,
            hash_ids: vec![1, 2],
        }];
        let cfg = RunConfig::default();
        let sim = cfg.sim_config(&trace).unwrap();
        let perf = PerfModelParams::dummy_70b();
        assert_eq!(sim.slo, SloConfig::paper_slo(&perf, 1024));
    }
}
