//! Link-quality tables and the snapshots handed to the scheduler.
//!
//! Each node keeps a Neighbor Table (NT) of its own outbound measurements and a
//! Received NT Table (RNTT) holding the tables its neighbors broadcast. After a
//! change the node arms a publish timer; when it fires, NT and RNTT are merged
//! into an immutable [`LinkView`].
//!
//! NT frames: `0x4E54 | sender(4) | n(1) | n x [neighbor(4) | pdr_milli(2) | rate_code(1)]`.

use std::collections::{BTreeMap, VecDeque};

use crate::codec::CodecError;
use crate::model::{rate_code, rate_from_code, NodeId, Topology};

pub const NT_MAGIC: u16 = 0x4E54;

pub type SimTime = u64;

pub const SECOND_US: SimTime = 1_000_000;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinkView {
    q: BTreeMap<(NodeId, NodeId), f64>,
    r: BTreeMap<(NodeId, NodeId), f64>,
    pub snapshot_time: SimTime,
}

impl LinkView {
    pub fn new(snapshot_time: SimTime) -> Self {
        Self { snapshot_time, ..Default::default() }
    }

    /// Ground truth: every configured link with its delivery ratio and rate.
    pub fn from_topology(topology: &Topology, snapshot_time: SimTime) -> Self {
        let mut view = Self::new(snapshot_time);
        for link in topology.links() {
            view.insert(link.from, link.to, link.pdr, link.rate);
        }
        view
    }

    pub fn insert(&mut self, from: NodeId, to: NodeId, pdr: f64, rate: f64) {
        self.q.insert((from, to), pdr);
        self.r.insert((from, to), rate);
    }

    pub fn pdr(&self, from: NodeId, to: NodeId) -> f64 {
        self.q.get(&(from, to)).copied().unwrap_or(0.0)
    }

    pub fn rate(&self, from: NodeId, to: NodeId) -> Option<f64> {
        self.r.get(&(from, to)).copied()
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = ((NodeId, NodeId), f64, f64)> + '_ {
        self.q.iter().map(|(k, q)| (*k, *q, self.r[k]))
    }
}

#[derive(Debug, Clone)]
pub struct LinkStateConfig {
    pub window: usize,
    pub good_pdr: f64,
    pub epsilon_pdr: f64,
    pub srcr_period: SimTime,
    pub publish_delay: SimTime,
    pub stale_periods: u64,
}

impl Default for LinkStateConfig {
    fn default() -> Self {
        Self {
            window: 100,
            good_pdr: 0.9,
            epsilon_pdr: 0.05,
            srcr_period: 3 * SECOND_US,
            publish_delay: SECOND_US,
            stale_periods: 3,
        }
    }
}

/// Sliding window over the last `capacity` probe outcomes.
#[derive(Debug, Clone)]
pub struct ProbeWindow {
    capacity: usize,
    outcomes: VecDeque<bool>,
    delivered: usize,
}

impl ProbeWindow {
    pub fn new(capacity: usize) -> Self {
        Self { capacity: capacity.max(1), outcomes: VecDeque::new(), delivered: 0 }
    }

    pub fn record(&mut self, delivered: bool) {
        if self.outcomes.len() == self.capacity && self.outcomes.pop_front() == Some(true) {
            self.delivered -= 1;
        }
        self.outcomes.push_back(delivered);
        if delivered {
            self.delivered += 1;
        }
    }

    /// Delivered fraction; 0 without samples.
    pub fn pdr(&self) -> f64 {
        if self.outcomes.is_empty() {
            0.0
        } else {
            self.delivered as f64 / self.outcomes.len() as f64
        }
    }

    pub fn samples(&self) -> usize {
        self.outcomes.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkEstimate {
    pub pdr: f64,
    pub rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NtEntry {
    pub pdr: f64,
    pub rate: f64,
    pub last_update: SimTime,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct NeighborTable {
    pub entries: BTreeMap<NodeId, NtEntry>,
}

impl NeighborTable {
    fn differs(&self, other: &Self, epsilon: f64) -> bool {
        if self.entries.len() != other.entries.len() {
            return true;
        }
        self.entries.iter().any(|(n, e)| match other.entries.get(n) {
            None => true,
            Some(o) => (e.pdr - o.pdr).abs() > epsilon || e.rate != o.rate,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RnttEntry {
    pub table: NeighborTable,
    pub received_at: SimTime,
}

/// Per-node updater maintaining NT and RNTT.
#[derive(Debug, Clone)]
pub struct LinkStateUpdater {
    node: NodeId,
    cfg: LinkStateConfig,
    probes: BTreeMap<(NodeId, NodeId), BTreeMap<u64, ProbeWindow>>,
    nt: NeighborTable,
    advertised: NeighborTable,
    rntt: BTreeMap<NodeId, RnttEntry>,
    last_broadcast: Option<SimTime>,
    publish_at: Option<SimTime>,
    publications: u64,
}

fn rate_key(rate: f64) -> u64 {
    (rate * 1000.0).round() as u64
}

impl LinkStateUpdater {
    pub fn new(node: NodeId, cfg: LinkStateConfig) -> Self {
        Self {
            node,
            cfg,
            probes: BTreeMap::new(),
            nt: NeighborTable::default(),
            advertised: NeighborTable::default(),
            rntt: BTreeMap::new(),
            last_broadcast: None,
            publish_at: None,
            publications: 0,
        }
    }

    pub fn node(&self) -> NodeId {
        self.node
    }

    pub fn neighbor_table(&self) -> &NeighborTable {
        &self.nt
    }

    pub fn rntt(&self) -> &BTreeMap<NodeId, RnttEntry> {
        &self.rntt
    }

    pub fn publish_deadline(&self) -> Option<SimTime> {
        self.publish_at
    }

    pub fn publications(&self) -> u64 {
        self.publications
    }

    /// Records one probe outcome on `from -> to` at `rate` and returns the
    /// link's current estimate: the highest rate whose windowed delivery ratio
    /// reaches `good_pdr`, or the lowest probed rate when none does.
    pub fn record_probe(&mut self, from: NodeId, to: NodeId, rate: f64, delivered: bool) -> LinkEstimate {
        let window = self.cfg.window;
        self.probes
            .entry((from, to))
            .or_default()
            .entry(rate_key(rate))
            .or_insert_with(|| ProbeWindow::new(window))
            .record(delivered);
        self.estimate(from, to).expect("a probe was just recorded")
    }

    pub fn estimate(&self, from: NodeId, to: NodeId) -> Option<LinkEstimate> {
        let windows = self.probes.get(&(from, to))?;
        let good = windows.iter().rev().find(|(_, w)| w.pdr() >= self.cfg.good_pdr);
        let (key, w) = good.or_else(|| windows.iter().next())?;
        Some(LinkEstimate { pdr: w.pdr(), rate: *key as f64 / 1000.0 })
    }

    fn rebuild_nt(&mut self, now: SimTime) {
        let mut entries = BTreeMap::new();
        for &(from, to) in self.probes.keys() {
            if from != self.node {
                continue;
            }
            if let Some(est) = self.estimate(from, to) {
                if est.pdr > 0.0 {
                    entries.insert(to, NtEntry { pdr: est.pdr, rate: est.rate, last_update: now });
                }
            }
        }
        self.nt = NeighborTable { entries };
        let nt = &self.nt;
        self.rntt.retain(|n, _| nt.entries.contains_key(n));
    }

    fn arm(&mut self, now: SimTime) {
        if self.publish_at.is_none() {
            self.publish_at = Some(now + self.cfg.publish_delay);
        }
    }

    /// Periodic refresh of NT from the probe windows. Returns the table to
    /// broadcast when a neighbor appeared or vanished, or a link moved by more
    /// than `epsilon_pdr` since the last broadcast.
    pub fn on_period_tick(&mut self, now: SimTime) -> Option<NeighborTable> {
        self.rebuild_nt(now);
        if !self.nt.differs(&self.advertised, self.cfg.epsilon_pdr) {
            return None;
        }
        self.advertised = self.nt.clone();
        self.last_broadcast = Some(now);
        self.arm(now);
        Some(self.nt.clone())
    }

    /// Handles a neighbor's NT. Tables from nodes missing in NT are ignored.
    /// Returns our own NT as a reply unless we broadcast within the last period.
    pub fn on_nt_received(&mut self, from: NodeId, table: NeighborTable, now: SimTime) -> Option<NeighborTable> {
        if !self.nt.entries.contains_key(&from) {
            return None;
        }
        self.rntt.insert(from, RnttEntry { table, received_at: now });
        self.arm(now);
        let recent = self.last_broadcast.is_some_and(|t| now.saturating_sub(t) < self.cfg.srcr_period);
        if recent {
            return None;
        }
        self.last_broadcast = Some(now);
        self.advertised = self.nt.clone();
        Some(self.nt.clone())
    }

    /// Fires the publish timer if it is due.
    pub fn on_publish_timer(&mut self, now: SimTime) -> Option<LinkView> {
        match self.publish_at {
            Some(t) if t <= now => {
                self.publish_at = None;
                Some(self.publish_snapshot(now))
            }
            _ => None,
        }
    }

    /// Merges own measurements with the neighbors' reports that are younger
    /// than `stale_periods` SRCR periods.
    pub fn publish_snapshot(&mut self, now: SimTime) -> LinkView {
        self.publications += 1;
        let mut view = LinkView::new(now);
        let max_age = self.cfg.stale_periods * self.cfg.srcr_period;
        for (sender, entry) in &self.rntt {
            if now.saturating_sub(entry.received_at) > max_age {
                continue;
            }
            for (to, e) in &entry.table.entries {
                view.insert(*sender, *to, e.pdr, e.rate);
            }
        }
        for (to, e) in &self.nt.entries {
            view.insert(self.node, *to, e.pdr, e.rate);
        }
        view
    }
}

pub fn encode_nt(sender: NodeId, table: &NeighborTable) -> Result<Vec<u8>, CodecError> {
    let n = u8::try_from(table.entries.len()).map_err(|_| CodecError::TooMany("neighbors"))?;
    let mut out = Vec::with_capacity(7 + 7 * n as usize);
    out.extend_from_slice(&NT_MAGIC.to_be_bytes());
    out.extend_from_slice(&sender.0.to_be_bytes());
    out.push(n);
    for (node, e) in &table.entries {
        out.extend_from_slice(&node.0.to_be_bytes());
        out.extend_from_slice(&((e.pdr * 1000.0).round() as u16).to_be_bytes());
        out.push(rate_code(e.rate).ok_or(CodecError::MalformedFrame("unsupported rate"))?);
    }
    Ok(out)
}

pub fn decode_nt(bytes: &[u8], now: SimTime) -> Result<(NodeId, NeighborTable), CodecError> {
    let bad = CodecError::MalformedFrame;
    if bytes.len() < 7 {
        return Err(bad("truncated"));
    }
    if u16::from_be_bytes([bytes[0], bytes[1]]) != NT_MAGIC {
        return Err(bad("bad magic"));
    }
    let sender = NodeId(u32::from_be_bytes([bytes[2], bytes[3], bytes[4], bytes[5]]));
    let n = bytes[6] as usize;
    if bytes.len() != 7 + 7 * n {
        return Err(bad("neighbor count disagrees with length"));
    }
    let mut entries = BTreeMap::new();
    for chunk in bytes[7..].chunks_exact(7) {
        let node = NodeId(u32::from_be_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        let milli = u16::from_be_bytes([chunk[4], chunk[5]]);
        if milli > 1000 {
            return Err(bad("pdr above 1"));
        }
        let rate = rate_from_code(chunk[6]).ok_or(bad("unknown rate code"))?;
        entries.insert(node, NtEntry { pdr: milli as f64 / 1000.0, rate, last_update: now });
    }
    Ok((sender, NeighborTable { entries }))
}
