//! Experiment configuration files.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::link_state::{SimTime, SECOND_US};
use crate::model::{build_wheel, ModelError, NodeId, Topology, WheelVariant};
use crate::scheduler::Policy;
use crate::sim::{SimParams, Traffic};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config field `{field}`: {message}")]
    Invalid { field: &'static str, message: String },
    #[error("config topology: {0}")]
    Topology(#[from] ModelError),
    #[error("reading config: {0}")]
    Io(#[from] std::io::Error),
}

fn invalid(field: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { field, message: message.into() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkOverride {
    pub from: u32,
    pub to: u32,
    pub pdr: Option<f64>,
    pub rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyConfig {
    /// `arb`, `half-cross`, `cross`, `wheel:x` or `halfwheel:x`.
    pub preset: String,
    /// Flow count for a bare `wheel` or `halfwheel` preset.
    pub n_flows: Option<usize>,
    #[serde(default = "one")]
    pub pdr: f64,
    #[serde(default = "default_rate")]
    pub rate: f64,
    #[serde(default)]
    pub links: Vec<LinkOverride>,
    /// Links whose delivery ratio a `q` sweep sets.
    #[serde(default)]
    pub sweep_links: Vec<[u32; 2]>,
    /// Links whose rate a `rate` sweep sets.
    #[serde(default)]
    pub rate_links: Vec<[u32; 2]>,
}

fn one() -> f64 {
    1.0
}

fn default_rate() -> f64 {
    54.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrafficMode {
    Saturated,
    Poisson,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrafficConfig {
    pub mode: TrafficMode,
    /// Packets per second per flow.
    pub lambda: f64,
    pub payload_bytes: usize,
    pub window: usize,
}

impl Default for TrafficConfig {
    fn default() -> Self {
        Self { mode: TrafficMode::Saturated, lambda: 0.0, payload_bytes: 1500, window: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlgorithmConfig {
    pub name: String,
    pub delta: f64,
}

impl Default for AlgorithmConfig {
    fn default() -> Self {
        Self { name: "alg1".into(), delta: 0.7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub duration_s: f64,
    pub seed: u64,
    pub oracle_links: bool,
    pub key_repo_capacity: usize,
    pub ack_timeout_ms: Option<f64>,
    pub ack_flush_ms: f64,
    pub retry_cap: u32,
    pub explicit_nack: bool,
    pub srcr_period_s: f64,
    pub probes_per_period: usize,
    pub phy_overhead_bits: u64,
    pub q_max: usize,
    pub warmup: f64,
    pub piggyback_cap: usize,
    pub sample_ms: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            duration_s: 10.0,
            seed: 1,
            oracle_links: true,
            key_repo_capacity: 512,
            ack_timeout_ms: None,
            ack_flush_ms: 20.0,
            retry_cap: 5,
            explicit_nack: true,
            srcr_period_s: 3.0,
            probes_per_period: 30,
            phy_overhead_bits: 0,
            q_max: 1000,
            warmup: 0.1,
            piggyback_cap: 8,
            sample_ms: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Option<String>,
    pub topology: TopologyConfig,
    #[serde(default)]
    pub traffic: TrafficConfig,
    #[serde(default)]
    pub algorithm: AlgorithmConfig,
    #[serde(default)]
    pub sim: SimConfig,
}

/// Parses a preset name into a wheel size and variant.
pub fn parse_preset(preset: &str, n_flows: Option<usize>) -> Result<(usize, WheelVariant), ConfigError> {
    let (name, arg) = match preset.split_once(':') {
        Some((n, a)) => {
            let x = a.trim().parse::<usize>().map_err(|_| invalid("topology.preset", format!("bad size in `{preset}`")))?;
            (n, Some(x))
        }
        None => (preset, n_flows),
    };
    let need = |x: Option<usize>| x.ok_or_else(|| invalid("topology.n_flows", format!("`{name}` needs a flow count")));
    match name {
        "arb" => Ok((2, WheelVariant::Full)),
        "half-cross" => Ok((2, WheelVariant::Half)),
        "cross" => Ok((4, WheelVariant::Full)),
        "wheel" => Ok((need(arg)?, WheelVariant::Full)),
        "halfwheel" => Ok((need(arg)?, WheelVariant::Half)),
        _ => Err(invalid("topology.preset", format!("unknown preset `{preset}`"))),
    }
}

fn ms(v: f64) -> SimTime {
    (v * 1000.0).round() as SimTime
}

fn secs(v: f64) -> SimTime {
    (v * SECOND_US as f64).round() as SimTime
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self, ConfigError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let t = &self.traffic;
        if !(t.lambda.is_finite() && t.lambda >= 0.0) {
            return Err(invalid("traffic.lambda", "must be a finite value >= 0"));
        }
        if t.payload_bytes < crate::sim::INNER_HEADER_LEN || t.payload_bytes > u16::MAX as usize {
            return Err(invalid("traffic.payload_bytes", "must hold the inner header and fit 16 bits"));
        }
        if t.window == 0 {
            return Err(invalid("traffic.window", "must be positive"));
        }
        let s = &self.sim;
        if !(s.duration_s.is_finite() && s.duration_s > 0.0) {
            return Err(invalid("sim.duration_s", "must be > 0"));
        }
        if s.key_repo_capacity == 0 {
            return Err(invalid("sim.key_repo_capacity", "must be positive"));
        }
        if s.retry_cap == 0 {
            return Err(invalid("sim.retry_cap", "must be positive"));
        }
        if !(0.0..1.0).contains(&s.warmup) {
            return Err(invalid("sim.warmup", "must be in [0, 1)"));
        }
        if s.sample_ms <= 0.0 || s.srcr_period_s <= 0.0 || s.ack_flush_ms < 0.0 {
            return Err(invalid("sim", "timer periods must be positive"));
        }
        if s.ack_timeout_ms.is_some_and(|v| v <= 0.0) {
            return Err(invalid("sim.ack_timeout_ms", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.algorithm.delta) {
            return Err(invalid("algorithm.delta", "must be in [0, 1]"));
        }
        self.policy()?;
        self.build_topology()?;
        Ok(())
    }

    pub fn policy(&self) -> Result<Policy, ConfigError> {
        match self.algorithm.name.as_str() {
            "plain" => Ok(Policy::Plain),
            "alg1" => Ok(Policy::Alg1),
            "alg2" => Ok(Policy::Alg2),
            "ftp" => Ok(Policy::Ftp { delta: self.algorithm.delta }),
            other => Err(invalid("algorithm.name", format!("unknown algorithm `{other}`"))),
        }
    }

    pub fn build_topology(&self) -> Result<Topology, ConfigError> {
        let tc = &self.topology;
        let (n, variant) = parse_preset(&tc.preset, tc.n_flows)?;
        let mut t = build_wheel(n, variant)?;
        t.set_uniform_rate(tc.rate)?;
        let pairs: Vec<(NodeId, NodeId)> = t.links().map(|l| (l.from, l.to)).collect();
        if tc.pdr != 1.0 {
            for (a, b) in &pairs {
                t.set_pdr(*a, *b, tc.pdr)?;
            }
        }
        for o in &tc.links {
            let (a, b) = (NodeId(o.from), NodeId(o.to));
            if let Some(r) = o.rate {
                t.set_rate(a, b, r)?;
            }
            if let Some(p) = o.pdr {
                t.set_pdr(a, b, p)?;
            }
        }
        Ok(t)
    }

    pub fn scenario_name(&self) -> String {
        self.scenario.clone().unwrap_or_else(|| format!("{}-{}", self.topology.preset, self.algorithm.name))
    }

    pub fn sim_params(&self) -> Result<SimParams, ConfigError> {
        let t = self.build_topology()?;
        let mut p = SimParams::new(t, self.policy()?);
        p.traffic = match self.traffic.mode {
            TrafficMode::Saturated => Traffic::Saturated { window: self.traffic.window },
            TrafficMode::Poisson => Traffic::Poisson { lambda: self.traffic.lambda },
        };
        let s = &self.sim;
        p.payload_bytes = self.traffic.payload_bytes;
        p.duration = secs(s.duration_s);
        p.seed = s.seed;
        p.oracle_links = s.oracle_links;
        p.key_repo_capacity = s.key_repo_capacity;
        p.ack_timeout = s.ack_timeout_ms.map(ms);
        p.ack_flush = ms(s.ack_flush_ms);
        p.retry_cap = s.retry_cap;
        p.explicit_nack = s.explicit_nack;
        p.srcr_period = secs(s.srcr_period_s);
        p.probes_per_period = s.probes_per_period;
        p.phy_overhead_bits = s.phy_overhead_bits;
        p.warmup_fraction = s.warmup;
        p.piggyback_cap = s.piggyback_cap;
        p.sample_interval = ms(s.sample_ms).max(1);
        Ok(p)
    }

    /// A config for `preset` with every other setting at its default.
    pub fn for_preset(preset: &str, algorithm: &str) -> Self {
        Self {
            scenario: None,
            topology: TopologyConfig {
                preset: preset.into(),
                n_flows: None,
                pdr: 1.0,
                rate: 54.0,
                links: Vec::new(),
                sweep_links: Vec::new(),
                rate_links: Vec::new(),
            },
            traffic: TrafficConfig::default(),
            algorithm: AlgorithmConfig { name: algorithm.into(), ..AlgorithmConfig::default() },
            sim: SimConfig::default(),
        }
    }
}
