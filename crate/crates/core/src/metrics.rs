//! Run statistics.

use serde::{Deserialize, Serialize};

use crate::link_state::SimTime;
use crate::model::FlowId;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FlowMetrics {
    pub flow_id: FlowId,
    pub injected: u64,
    pub delivered: u64,
    pub delivered_after_warmup: u64,
    pub dropped: u64,
    pub duplicates: u64,
    /// Undelivered packets still held at the source, the relay or in flight.
    pub in_system: u64,
    pub throughput_mbps: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub retx: u64,
    pub drops: u64,
    pub duplicates: u64,
    pub late_acks: u64,
    pub unknown_acks: u64,
    pub duplicate_acks: u64,
    pub decode_failures: u64,
    pub key_missing: u64,
    pub corrupt_decodes: u64,
    pub evicted_before_retx: u64,
    pub coded_frames: u64,
    pub native_frames: u64,
    pub direct_frames: u64,
    pub uplink_frames: u64,
    pub uplink_retries: u64,
    pub ack_frames: u64,
    pub ack_records: u64,
    pub nt_frames: u64,
    pub view_updates: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounts {
    pub encode: u64,
    pub decode: u64,
    pub key_store: u64,
    pub ack_ops: u64,
    pub weight_recomputes: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub policy: String,
    pub seed: u64,
    pub duration_us: SimTime,
    pub warmup_us: SimTime,
    pub flows: Vec<FlowMetrics>,
    pub aggregate_mbps: f64,
    /// Relay queues, sampled.
    pub max_queue: usize,
    pub mean_queue: f64,
    /// Source plus relay queues, sampled.
    pub max_backlog: usize,
    pub mean_backlog: f64,
    pub final_backlog: usize,
    pub backlog_trace: Vec<(SimTime, usize)>,
    pub frames: u64,
    pub busy_us: SimTime,
    pub aborted: bool,
    pub counters: Counters,
    pub ops: OpCounts,
}

impl Metrics {
    pub fn flow(&self, id: FlowId) -> Option<&FlowMetrics> {
        self.flows.iter().find(|f| f.flow_id == id)
    }

    /// Least-squares slope of the backlog trace in packets per second.
    pub fn backlog_slope(&self) -> f64 {
        linear_slope(&self.backlog_trace)
    }

    pub fn total_injected(&self) -> u64 {
        self.flows.iter().map(|f| f.injected).sum()
    }

    pub fn total_delivered(&self) -> u64 {
        self.flows.iter().map(|f| f.delivered).sum()
    }
}

pub fn linear_slope(points: &[(SimTime, usize)]) -> f64 {
    let n = points.len() as f64;
    if points.len() < 2 {
        return 0.0;
    }
    let xs = points.iter().map(|(t, _)| *t as f64 / 1e6);
    let mx = xs.clone().sum::<f64>() / n;
    let my = points.iter().map(|(_, q)| *q as f64).sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (x, (_, y)) in xs.zip(points) {
        sxy += (x - mx) * (*y as f64 - my);
        sxx += (x - mx) * (x - mx);
    }
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_line() {
        let pts: Vec<(SimTime, usize)> = (0..10).map(|i| (i * 500_000, 3 + 4 * i as usize)).collect();
        assert!((linear_slope(&pts) - 8.0).abs() < 1e-9);
        assert_eq!(linear_slope(&pts[..1]), 0.0);
    }
}
