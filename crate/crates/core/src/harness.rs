//! Experiment runner: single runs, stability search, gains, sweeps and the
//! CSV/JSON output shared by the CLI and the Python bindings.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{frame_len, xor_encode, Frame};
use crate::config::{ConfigError, ExperimentConfig, TrafficMode};
use crate::medium::{airtime_us, Trace};
use crate::metrics::Metrics;
use crate::model::FlowId;
use crate::sim::{make_packet, SimError, Simulator};

pub const DEFAULT_BISECTION_STEPS: usize = 20;

/// Backlogs at or below this many packets never count as drift.
pub const DRIFT_FLOOR: usize = 20;

/// Share of the run, at its end, averaged as the final backlog.
pub const TAIL_FRACTION: f64 = 0.05;

pub const CSV_HEADER: &str = "scenario,seed,flow_id,throughput_mbps,aggregate_mbps,gain,max_queue,retx,drops";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("gain undefined: baseline throughput is zero")]
    ZeroBaseline,
    #[error("unknown sweep parameter `{0}`")]
    UnknownParam(String),
    #[error("tolerance must be positive")]
    BadTolerance,
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Metrics, HarnessError> {
    run_traced(cfg, Trace::Off).map(|(m, _)| m)
}

pub fn run_traced(cfg: &ExperimentConfig, trace: Trace) -> Result<(Metrics, Trace), HarnessError> {
    let mut sim = Simulator::new(cfg.sim_params()?, trace)?;
    let m = sim.run()?;
    Ok((m, sim.into_trace()))
}

/// `cfg` with the relay policy replaced by uncoded FIFO forwarding.
pub fn plain_baseline(cfg: &ExperimentConfig) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.algorithm.name = "plain".into();
    c
}

pub fn gain(nc: &Metrics, plain: &Metrics) -> Result<f64, HarnessError> {
    ratio(nc.aggregate_mbps, plain.aggregate_mbps)
}

pub fn ratio(nc: f64, plain: f64) -> Result<f64, HarnessError> {
    if plain <= 0.0 {
        return Err(HarnessError::ZeroBaseline);
    }
    Ok(nc / plain)
}

/// Airtime in microseconds of one uncoded uplink data frame.
pub fn uplink_airtime(cfg: &ExperimentConfig) -> Result<u64, HarnessError> {
    let p = cfg.sim_params()?;
    let t = &p.topology;
    let flow = t.flows()[0];
    let packet = make_packet(&flow, 1, p.payload_bytes);
    let enc = xor_encode(&[(&packet, t.relay())]).map_err(SimError::from)?;
    let len = frame_len(&Frame::Data(enc));
    let rate = t.flows().iter().filter_map(|f| t.rate(f.source, t.relay())).fold(f64::INFINITY, f64::min);
    Ok(airtime_us(len, p.phy_overhead_bits, rate))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub lambda: f64,
    pub stable: bool,
    pub max_backlog: usize,
    pub mean_backlog: f64,
    pub final_backlog: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityResult {
    /// Largest stable per-flow arrival rate, packets per second.
    pub lambda_star: f64,
    pub lo: f64,
    pub hi: f64,
    pub probes: Vec<Probe>,
    /// Metrics of the last stable probe.
    pub at_lo: Option<Metrics>,
}

/// Mean backlog over the last [`TAIL_FRACTION`] of the samples.
pub fn tail_backlog(m: &Metrics) -> f64 {
    let trace = &m.backlog_trace;
    if trace.is_empty() {
        return m.final_backlog as f64;
    }
    let n = ((trace.len() as f64 * TAIL_FRACTION).ceil() as usize).clamp(1, trace.len());
    trace[trace.len() - n..].iter().map(|(_, b)| *b as f64).sum::<f64>() / n as f64
}

/// Stable iff the backlog stayed below `q_max`, its tail did not end far above
/// its running mean and it did not rise by more than its mean along the fitted
/// trend.
pub fn is_stable(m: &Metrics, q_max: usize) -> bool {
    let floor = DRIFT_FLOOR as f64;
    let tail = tail_backlog(m);
    let ends_high = tail > 3.0 * m.mean_backlog && tail > floor;
    let span = m.duration_us as f64 / 1e6;
    let rise = m.backlog_slope() * span;
    let trending = rise > m.mean_backlog.max(floor);
    !m.aborted && m.max_backlog < q_max && !ends_high && !trending
}

pub fn run_poisson(cfg: &ExperimentConfig, lambda: f64, abort: bool) -> Result<Metrics, HarnessError> {
    let mut c = cfg.clone();
    c.traffic.mode = TrafficMode::Poisson;
    c.traffic.lambda = lambda;
    let mut p = c.sim_params()?;
    if abort {
        p.abort_backlog = Some(cfg.sim.q_max);
    }
    Ok(Simulator::new(p, Trace::Off)?.run()?)
}

/// Bisection on the per-flow Poisson rate between 0 and the rate at which the
/// sources alone would fill the channel.
pub fn stability_search(cfg: &ExperimentConfig, tolerance: f64) -> Result<StabilityResult, HarnessError> {
    stability_search_steps(cfg, tolerance, DEFAULT_BISECTION_STEPS)
}

pub fn stability_search_steps(
    cfg: &ExperimentConfig,
    tolerance: f64,
    max_steps: usize,
) -> Result<StabilityResult, HarnessError> {
    if tolerance.is_nan() || tolerance <= 0.0 {
        return Err(HarnessError::BadTolerance);
    }
    let n_flows = cfg.build_topology()?.flows().len() as f64;
    let mut lo = 0.0;
    let mut hi = 1e6 / (n_flows * uplink_airtime(cfg)? as f64);
    let mut probes = Vec::new();
    let mut at_lo = None;
    let mut steps = 0;
    while hi - lo > tolerance && steps < max_steps {
        steps += 1;
        let mid = 0.5 * (lo + hi);
        let m = run_poisson(cfg, mid, true)?;
        let stable = is_stable(&m, cfg.sim.q_max);
        probes.push(Probe {
            lambda: mid,
            stable,
            max_backlog: m.max_backlog,
            mean_backlog: m.mean_backlog,
            final_backlog: m.final_backlog,
        });
        if stable {
            lo = mid;
            at_lo = Some(m);
        } else {
            hi = mid;
        }
    }
    Ok(StabilityResult { lambda_star: 0.5 * (lo + hi), lo, hi, probes, at_lo })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub scenario: String,
    pub seed: u64,
    pub flow_id: FlowId,
    pub throughput_mbps: f64,
    pub aggregate_mbps: f64,
    pub gain: f64,
    pub max_queue: usize,
    pub retx: u64,
    pub drops: u64,
}

impl Row {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.6},{:.6},{},{},{}",
            self.scenario,
            self.seed,
            self.flow_id,
            self.throughput_mbps,
            self.aggregate_mbps,
            self.gain,
            self.max_queue,
            self.retx,
            self.drops
        )
    }
}

pub fn rows(scenario: &str, m: &Metrics, gain: f64) -> Vec<Row> {
    m.flows
        .iter()
        .map(|f| Row {
            scenario: scenario.to_string(),
            seed: m.seed,
            flow_id: f.flow_id,
            throughput_mbps: f.throughput_mbps,
            aggregate_mbps: m.aggregate_mbps,
            gain,
            max_queue: m.max_queue,
            retx: m.counters.retx,
            drops: m.counters.drops,
        })
        .collect()
}

pub fn to_csv(rows: &[Row]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv());
        out.push('\n');
    }
    out
}

pub fn to_json(rows: &[Row]) -> String {
    serde_json::to_string_pretty(rows).expect("rows serialize")
}

/// Runs `cfg` and its plain baseline; the gain column is their ratio.
pub fn run_with_gain(cfg: &ExperimentConfig) -> Result<(Metrics, f64), HarnessError> {
    let m = run_experiment(cfg)?;
    if cfg.algorithm.name == "plain" {
        return Ok((m, 1.0));
    }
    let base = run_experiment(&plain_baseline(cfg))?;
    let g = gain(&m, &base)?;
    Ok((m, g))
}

/// Rows for a stability search: throughput is the stable per-flow rate in Mbps
/// and the gain is the ratio to the plain baseline's stable rate.
pub fn stability_rows(cfg: &ExperimentConfig, tolerance: f64) -> Result<(Vec<Row>, StabilityResult), HarnessError> {
    let res = stability_search(cfg, tolerance)?;
    let gain = if cfg.algorithm.name == "plain" {
        1.0
    } else {
        ratio(res.lambda_star, stability_search(&plain_baseline(cfg), tolerance)?.lambda_star)?
    };
    let topo = cfg.build_topology()?;
    let per_flow = res.lambda_star * cfg.traffic.payload_bytes as f64 * 8.0 / 1e6;
    let (max_queue, retx, drops) =
        res.at_lo.as_ref().map_or((0, 0, 0), |m| (m.max_queue, m.counters.retx, m.counters.drops));
    let rows = topo
        .flows()
        .iter()
        .map(|f| Row {
            scenario: cfg.scenario_name(),
            seed: cfg.sim.seed,
            flow_id: f.id,
            throughput_mbps: per_flow,
            aggregate_mbps: per_flow * topo.flows().len() as f64,
            gain,
            max_queue,
            retx,
            drops,
        })
        .collect();
    Ok((rows, res))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Q,
    Rate,
    Delta,
    X,
}

impl std::str::FromStr for SweepParam {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "q" => Ok(SweepParam::Q),
            "rate" => Ok(SweepParam::Rate),
            "delta" => Ok(SweepParam::Delta),
            "x" => Ok(SweepParam::X),
            _ => Err(HarnessError::UnknownParam(s.into())),
        }
    }
}

impl std::fmt::Display for SweepParam {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SweepParam::Q => "q",
            SweepParam::Rate => "rate",
            SweepParam::Delta => "delta",
            SweepParam::X => "x",
        })
    }
}

fn default_pair(links: &[[u32; 2]], fallback: [u32; 2]) -> Vec<[u32; 2]> {
    if links.is_empty() {
        vec![fallback]
    } else {
        links.to_vec()
    }
}

fn set_link(cfg: &mut ExperimentConfig, [from, to]: [u32; 2], pdr: Option<f64>, rate: Option<f64>) {
    let links = &mut cfg.topology.links;
    match links.iter_mut().find(|l| l.from == from && l.to == to) {
        Some(l) => {
            if pdr.is_some() {
                l.pdr = pdr;
            }
            if rate.is_some() {
                l.rate = rate;
            }
        }
        None => links.push(crate::config::LinkOverride { from, to, pdr, rate }),
    }
}

/// `cfg` with one parameter set to `value`.
pub fn apply_param(cfg: &ExperimentConfig, param: SweepParam, value: f64) -> Result<ExperimentConfig, HarnessError> {
    let mut c = cfg.clone();
    match param {
        // by default the second source's overhearing link towards the first destination
        SweepParam::Q => {
            for pair in default_pair(&cfg.topology.sweep_links, [2, 3]) {
                set_link(&mut c, pair, Some(value), None);
            }
        }
        SweepParam::Rate => {
            for pair in default_pair(&cfg.topology.rate_links, [0, 3]) {
                set_link(&mut c, pair, None, Some(value));
            }
        }
        SweepParam::Delta => c.algorithm.delta = value,
        SweepParam::X => {
            let (_, variant) = crate::config::parse_preset(&cfg.topology.preset, cfg.topology.n_flows)?;
            c.topology.preset = match variant {
                crate::model::WheelVariant::Half => "halfwheel".into(),
                crate::model::WheelVariant::Full => "wheel".into(),
            };
            c.topology.n_flows = Some(value.round() as usize);
        }
    }
    c.validate()?;
    Ok(c)
}

/// One run per value with seed `seed + i`; each row's gain is against the
/// plain baseline at the same value and seed.
pub fn sweep(cfg: &ExperimentConfig, param: SweepParam, values: &[f64]) -> Result<Vec<(f64, Metrics, f64)>, HarnessError> {
    values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let mut c = apply_param(cfg, param, *v)?;
            c.sim.seed = cfg.sim.seed + i as u64;
            let (m, g) = run_with_gain(&c)?;
            Ok((*v, m, g))
        })
        .collect()
}

pub fn sweep_rows(cfg: &ExperimentConfig, param: SweepParam, values: &[f64]) -> Result<Vec<Row>, HarnessError> {
    let name = cfg.scenario_name();
    Ok(sweep(cfg, param, values)?
        .iter()
        .flat_map(|(v, m, g)| rows(&format!("{name}:{param}={v}"), m, *g))
        .collect())
}

/// Human-readable description of a preset topology.
pub fn describe_topology(cfg: &ExperimentConfig) -> Result<String, HarnessError> {
    let t = cfg.build_topology()?;
    let mut out = format!("relay {}\nneighbors", t.relay());
    for n in t.neighbors() {
        out.push_str(&format!(" {n}"));
    }
    out.push_str("\nflows\n");
    for f in t.flows() {
        out.push_str(&format!("  {}: {} -> {} -> {}\n", f.id, f.source, t.relay(), f.destination));
    }
    out.push_str("links from,to,pdr,rate\n");
    for l in t.links() {
        out.push_str(&format!("  {},{},{},{}\n", l.from, l.to, l.pdr, l.rate));
    }
    Ok(out)
}
