//! Nodes, flows, links and wheel topologies around a single relay.
//!
//! Every flow is a two-hop flow `source -> relay -> destination` between two
//! neighbors of the relay. A missing directed link means the pair cannot hear
//! each other (delivery ratio 0).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::link_state::LinkView;

/// Channel rates (Mbps) a link may be configured with: the 802.11b set followed
/// by the 802.11a/g set. The index of a rate in this table is its wire code.
pub const RATES_MBPS: [f64; 12] = [1.0, 2.0, 5.5, 11.0, 6.0, 9.0, 12.0, 18.0, 24.0, 36.0, 48.0, 54.0];

pub const DEFAULT_RATE_MBPS: f64 = 54.0;

pub fn rate_code(rate: f64) -> Option<u8> {
    RATES_MBPS.iter().position(|r| *r == rate).map(|i| i as u8)
}

pub fn rate_from_code(code: u8) -> Option<f64> {
    RATES_MBPS.get(code as usize).copied()
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("a wheel needs at least one flow")]
    NoFlows,
    #[error("a full wheel is built by role inversion and needs an even number of flows, got {0}")]
    OddFullWheel(usize),
    #[error("delivery ratio {pdr} on link {from}->{to} is outside [0, 1]")]
    PdrOutOfRange { from: NodeId, to: NodeId, pdr: f64 },
    #[error("rate {rate} Mbps on link {from}->{to} is not a supported channel rate")]
    UnsupportedRate { from: NodeId, to: NodeId, rate: f64 },
    #[error("link {0}->{1} is listed twice")]
    DuplicateLink(NodeId, NodeId),
    #[error("node {0} is listed twice")]
    DuplicateNode(NodeId),
    #[error("node {0} is not part of the topology")]
    UnknownNode(NodeId),
    #[error("flow {0} is listed twice")]
    DuplicateFlow(FlowId),
    #[error("flow {0} has the same source and destination")]
    SelfFlow(FlowId),
    #[error("flow {0} must run between two neighbors of the relay")]
    FlowNotThroughRelay(FlowId),
    #[error("flow {flow} lacks the {from}->{to} link through the relay")]
    MissingRelayLink { flow: FlowId, from: NodeId, to: NodeId },
    #[error("a link cannot start and end at node {0}")]
    SelfLink(NodeId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl NodeId {
    /// Simulated IPv4 address of the node, 10.0.0.(id+1).
    pub fn ip(self) -> u32 {
        0x0a00_0000 + self.0 + 1
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FlowId(pub u32);

impl fmt::Display for FlowId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Relay,
    Neighbor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flow {
    pub id: FlowId,
    pub source: NodeId,
    pub destination: NodeId,
}

/// One direction of a wireless link.
///
/// `pdr` is the rate-independent delivery ratio. When `rate_pdrs` is non-empty
/// the delivery ratio depends on the transmit rate and `pdr` describes the
/// configured `rate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectedLink {
    pub from: NodeId,
    pub to: NodeId,
    pub pdr: f64,
    pub rate: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rate_pdrs: Vec<(f64, f64)>,
}

impl DirectedLink {
    pub fn new(from: NodeId, to: NodeId, pdr: f64, rate: f64) -> Self {
        Self { from, to, pdr, rate, rate_pdrs: Vec::new() }
    }

    /// Delivery ratio of a frame sent over this link at `rate`.
    pub fn pdr_at(&self, rate: f64) -> f64 {
        if self.rate_pdrs.is_empty() {
            return self.pdr;
        }
        self.rate_pdrs
            .iter()
            .find(|(r, _)| *r == rate)
            .map(|(_, p)| *p)
            .unwrap_or(0.0)
    }

    /// Rates a prober would try on this link.
    pub fn probe_rates(&self) -> Vec<f64> {
        if self.rate_pdrs.is_empty() {
            vec![self.rate]
        } else {
            self.rate_pdrs.iter().map(|(r, _)| *r).collect()
        }
    }

    fn validate(&self) -> Result<(), ModelError> {
        if self.from == self.to {
            return Err(ModelError::SelfLink(self.from));
        }
        let check_pdr = |pdr: f64| {
            if (0.0..=1.0).contains(&pdr) {
                Ok(())
            } else {
                Err(ModelError::PdrOutOfRange { from: self.from, to: self.to, pdr })
            }
        };
        let check_rate = |rate: f64| {
            if rate_code(rate).is_some() {
                Ok(())
            } else {
                Err(ModelError::UnsupportedRate { from: self.from, to: self.to, rate })
            }
        };
        check_pdr(self.pdr)?;
        check_rate(self.rate)?;
        for (rate, pdr) in &self.rate_pdrs {
            check_rate(*rate)?;
            check_pdr(*pdr)?;
        }
        Ok(())
    }
}

/// A relay, its neighbors, the directed links among them and the flows
/// traversing the relay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    relay: NodeId,
    neighbors: Vec<NodeId>,
    links: BTreeMap<(NodeId, NodeId), DirectedLink>,
    flows: Vec<Flow>,
}

impl Topology {
    pub fn new(
        relay: NodeId,
        neighbors: Vec<NodeId>,
        links: Vec<DirectedLink>,
        flows: Vec<Flow>,
    ) -> Result<Self, ModelError> {
        let mut seen = BTreeSet::from([relay]);
        for n in &neighbors {
            if !seen.insert(*n) {
                return Err(ModelError::DuplicateNode(*n));
            }
        }
        let mut map = BTreeMap::new();
        for link in links {
            link.validate()?;
            for end in [link.from, link.to] {
                if !seen.contains(&end) {
                    return Err(ModelError::UnknownNode(end));
                }
            }
            if map.insert((link.from, link.to), link.clone()).is_some() {
                return Err(ModelError::DuplicateLink(link.from, link.to));
            }
        }
        let topology = Self { relay, neighbors, links: map, flows };
        topology.validate_flows()?;
        Ok(topology)
    }

    fn validate_flows(&self) -> Result<(), ModelError> {
        let mut ids = BTreeSet::new();
        for flow in &self.flows {
            if !ids.insert(flow.id) {
                return Err(ModelError::DuplicateFlow(flow.id));
            }
            if flow.source == flow.destination {
                return Err(ModelError::SelfFlow(flow.id));
            }
            if !self.is_neighbor(flow.source) || !self.is_neighbor(flow.destination) {
                return Err(ModelError::FlowNotThroughRelay(flow.id));
            }
            for (from, to) in [(flow.source, self.relay), (self.relay, flow.destination)] {
                if !self.links.contains_key(&(from, to)) {
                    return Err(ModelError::MissingRelayLink { flow: flow.id, from, to });
                }
            }
        }
        Ok(())
    }

    pub fn relay(&self) -> NodeId {
        self.relay
    }

    pub fn neighbors(&self) -> &[NodeId] {
        &self.neighbors
    }

    /// All nodes, relay first.
    pub fn nodes(&self) -> Vec<NodeId> {
        std::iter::once(self.relay).chain(self.neighbors.iter().copied()).collect()
    }

    pub fn node_count(&self) -> usize {
        self.neighbors.len() + 1
    }

    pub fn is_neighbor(&self, node: NodeId) -> bool {
        self.neighbors.contains(&node)
    }

    pub fn role(&self, node: NodeId) -> Option<Role> {
        if node == self.relay {
            Some(Role::Relay)
        } else if self.is_neighbor(node) {
            Some(Role::Neighbor)
        } else {
            None
        }
    }

    pub fn flows(&self) -> &[Flow] {
        &self.flows
    }

    pub fn flow(&self, id: FlowId) -> Option<&Flow> {
        self.flows.iter().find(|f| f.id == id)
    }

    pub fn links(&self) -> impl Iterator<Item = &DirectedLink> {
        self.links.values()
    }

    pub fn link(&self, from: NodeId, to: NodeId) -> Option<&DirectedLink> {
        self.links.get(&(from, to))
    }

    /// Configured delivery ratio; 0 when the link is absent.
    pub fn pdr(&self, from: NodeId, to: NodeId) -> f64 {
        self.link(from, to).map_or(0.0, |l| l.pdr)
    }

    pub fn rate(&self, from: NodeId, to: NodeId) -> Option<f64> {
        self.link(from, to).map(|l| l.rate)
    }

    /// Lowest rate in use anywhere in the topology.
    pub fn lowest_rate(&self) -> f64 {
        self.links
            .values()
            .flat_map(|l| l.probe_rates())
            .fold(f64::INFINITY, f64::min)
            .min(DEFAULT_RATE_MBPS)
    }

    /// Sets the delivery ratio of `from -> to`, creating the link at the
    /// lowest configured rate when it does not exist yet.
    pub fn set_pdr(&mut self, from: NodeId, to: NodeId, pdr: f64) -> Result<(), ModelError> {
        let rate = self.lowest_rate();
        self.upsert(from, to, |l| l.pdr = pdr, DirectedLink::new(from, to, pdr, rate))
    }

    pub fn set_rate(&mut self, from: NodeId, to: NodeId, rate: f64) -> Result<(), ModelError> {
        self.upsert(from, to, |l| l.rate = rate, DirectedLink::new(from, to, 0.0, rate))
    }

    pub fn set_rate_pdrs(
        &mut self,
        from: NodeId,
        to: NodeId,
        rate_pdrs: Vec<(f64, f64)>,
    ) -> Result<(), ModelError> {
        let fresh = DirectedLink { rate_pdrs: rate_pdrs.clone(), ..DirectedLink::new(from, to, 0.0, DEFAULT_RATE_MBPS) };
        self.upsert(from, to, |l| l.rate_pdrs = rate_pdrs, fresh)
    }

    /// Sets every link to the same channel rate.
    pub fn set_uniform_rate(&mut self, rate: f64) -> Result<(), ModelError> {
        for link in self.links.values_mut() {
            link.rate = rate;
            link.validate()?;
        }
        Ok(())
    }

    pub fn remove_link(&mut self, from: NodeId, to: NodeId) -> Result<(), ModelError> {
        let removed = self.links.remove(&(from, to));
        if let Err(e) = self.validate_flows() {
            if let Some(l) = removed {
                self.links.insert((from, to), l);
            }
            return Err(e);
        }
        Ok(())
    }

    fn upsert(
        &mut self,
        from: NodeId,
        to: NodeId,
        edit: impl FnOnce(&mut DirectedLink),
        fresh: DirectedLink,
    ) -> Result<(), ModelError> {
        for end in [from, to] {
            if self.role(end).is_none() {
                return Err(ModelError::UnknownNode(end));
            }
        }
        let mut link = self.links.get(&(from, to)).cloned().unwrap_or(fresh);
        edit(&mut link);
        link.validate()?;
        self.links.insert((from, to), link);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WheelVariant {
    /// Unidirectional flows: `n` sources matched to `n` destinations.
    Half,
    /// `n/2` matched flows plus their role-inverted twins.
    Full,
}

/// Builds a wheel around relay 0 with every pair of nodes connected at
/// delivery ratio 1 and [`DEFAULT_RATE_MBPS`].
///
/// * `Half` with `n` flows: neighbors `1..=2n`, flow `k` runs `k -> n+k`.
/// * `Full` with `n` flows (even): neighbors `1..=n`; flow `k <= n/2` runs
///   `k -> n/2+k` and flow `n/2+k` is its inverse.
pub fn build_wheel(n_flows: usize, variant: WheelVariant) -> Result<Topology, ModelError> {
    if n_flows == 0 {
        return Err(ModelError::NoFlows);
    }
    let (n_neighbors, flows) = match variant {
        WheelVariant::Half => {
            let n = n_flows as u32;
            let flows = (1..=n)
                .map(|k| Flow { id: FlowId(k), source: NodeId(k), destination: NodeId(n + k) })
                .collect::<Vec<_>>();
            (2 * n, flows)
        }
        WheelVariant::Full => {
            if !n_flows.is_multiple_of(2) {
                return Err(ModelError::OddFullWheel(n_flows));
            }
            let half = (n_flows / 2) as u32;
            let forward = (1..=half).map(|k| Flow { id: FlowId(k), source: NodeId(k), destination: NodeId(half + k) });
            let inverse =
                (1..=half).map(|k| Flow { id: FlowId(half + k), source: NodeId(half + k), destination: NodeId(k) });
            (n_flows as u32, forward.chain(inverse).collect())
        }
    };
    let neighbors: Vec<NodeId> = (1..=n_neighbors).map(NodeId).collect();
    let all: Vec<NodeId> = std::iter::once(NodeId(0)).chain(neighbors.iter().copied()).collect();
    let mut links = Vec::new();
    for &a in &all {
        for &b in &all {
            if a != b {
                links.push(DirectedLink::new(a, b, 1.0, DEFAULT_RATE_MBPS));
            }
        }
    }
    Topology::new(NodeId(0), neighbors, links, flows)
}

/// [`build_wheel`] followed by per-link overrides of delivery ratio and rate.
pub fn build_wheel_with(
    n_flows: usize,
    variant: WheelVariant,
    pdr_matrix: Option<&BTreeMap<(NodeId, NodeId), f64>>,
    rates: Option<&BTreeMap<(NodeId, NodeId), f64>>,
) -> Result<Topology, ModelError> {
    let mut topology = build_wheel(n_flows, variant)?;
    if let Some(m) = pdr_matrix {
        for (&(from, to), &p) in m {
            topology.set_pdr(from, to, p)?;
        }
    }
    if let Some(m) = rates {
        for (&(from, to), &r) in m {
            topology.set_rate(from, to, r)?;
        }
    }
    Ok(topology)
}

/// Knowledge state of a relay queue. `alg1` and `ftp` only
/// use `Unknown`; `alg2` adds `Good` (known to be held as a
/// key by the other receivers).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum QueueState {
    Unknown,
    Good,
}

impl QueueState {
    pub fn tag(self) -> char {
        match self {
            QueueState::Unknown => 'u',
            QueueState::Good => 'g',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct QueueKey {
    pub flow: FlowId,
    pub state: QueueState,
}

impl QueueKey {
    pub fn unknown(flow: FlowId) -> Self {
        Self { flow, state: QueueState::Unknown }
    }

    pub fn good(flow: FlowId) -> Self {
        Self { flow, state: QueueState::Good }
    }
}

impl fmt::Display for QueueKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.flow, self.state.tag())
    }
}

/// A set of relay queues served together by one transmission, at most one
/// queue per flow. A single member means an uncoded transmission.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Control {
    members: Vec<QueueKey>,
}

impl Control {
    /// Returns `None` for an empty member list or two queues of one flow.
    pub fn new(mut members: Vec<QueueKey>) -> Option<Self> {
        members.sort();
        members.dedup();
        if members.is_empty() || members.windows(2).any(|w| w[0].flow == w[1].flow) {
            return None;
        }
        Some(Self { members })
    }

    pub fn of_flows(flows: impl IntoIterator<Item = FlowId>) -> Option<Self> {
        Self::new(flows.into_iter().map(QueueKey::unknown).collect())
    }

    pub fn members(&self) -> &[QueueKey] {
        &self.members
    }

    pub fn flows(&self) -> impl Iterator<Item = FlowId> + '_ {
        self.members.iter().map(|m| m.flow)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains_flow(&self, flow: FlowId) -> bool {
        self.members.iter().any(|m| m.flow == flow)
    }

    pub fn member(&self, flow: FlowId) -> Option<QueueKey> {
        self.members.iter().copied().find(|m| m.flow == flow)
    }

    /// Cardinality first, then lexicographic member order.
    pub fn tie_order(&self, other: &Self) -> std::cmp::Ordering {
        self.len().cmp(&other.len()).then_with(|| self.members.cmp(&other.members))
    }
}

impl fmt::Display for Control {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (i, m) in self.members.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{m}")?;
        }
        write!(f, "}}")
    }
}

/// Probability that `dest` holds a packet originated by `source` as a key.
/// A node always holds its own packets.
pub fn key_probability(view: &LinkView, source: NodeId, dest: NodeId) -> f64 {
    if source == dest {
        1.0
    } else {
        view.pdr(source, dest)
    }
}

fn decodable(topology: &Topology, view: &LinkView, members: &[QueueKey]) -> bool {
    let relay = topology.relay();
    let ends: Vec<&Flow> = members.iter().filter_map(|m| topology.flow(m.flow)).collect();
    if ends.len() != members.len() {
        return false;
    }
    if members.len() > 1 && ends.iter().any(|f| view.rate(relay, f.destination).is_none()) {
        return false;
    }
    for (i, fi) in ends.iter().enumerate() {
        for (j, fj) in ends.iter().enumerate() {
            if i == j {
                continue;
            }
            if fi.destination == fj.destination {
                return false;
            }
            if members[j].state == QueueState::Unknown && key_probability(view, fj.source, fi.destination) <= 0.0 {
                return false;
            }
        }
    }
    true
}

/// Every non-empty subset of flows whose members can all be decoded with
/// non-zero probability under `view`. Singletons are always present. Ordered
/// by cardinality, then lexicographically.
pub fn enumerate_controls(topology: &Topology, view: &LinkView) -> Vec<Control> {
    let flows: Vec<FlowId> = topology.flows().iter().map(|f| f.id).collect();
    let n = flows.len();
    assert!(n < 32, "control enumeration is exponential in the flow count");
    let mut out = Vec::new();
    for mask in 1u64..(1u64 << n) {
        let members: Vec<QueueKey> =
            (0..n).filter(|b| mask & (1 << b) != 0).map(|b| QueueKey::unknown(flows[b])).collect();
        if members.len() == 1 || decodable(topology, view, &members) {
            out.extend(Control::new(members));
        }
    }
    out.sort_by(Control::tie_order);
    out
}

/// Controls over `(flow, state)` queues for the feedback-aware policy: every
/// flow contributes nothing, its unknown queue or its good queue.
pub fn enumerate_state_controls(topology: &Topology, view: &LinkView) -> Vec<Control> {
    let flows: Vec<FlowId> = topology.flows().iter().map(|f| f.id).collect();
    let mut out = Vec::new();
    let mut choice = vec![0u8; flows.len()];
    'outer: loop {
        let members: Vec<QueueKey> = choice
            .iter()
            .zip(&flows)
            .filter_map(|(c, f)| match c {
                1 => Some(QueueKey::unknown(*f)),
                2 => Some(QueueKey::good(*f)),
                _ => None,
            })
            .collect();
        if !members.is_empty() && (members.len() == 1 || decodable(topology, view, &members)) {
            out.extend(Control::new(members));
        }
        for c in choice.iter_mut() {
            *c += 1;
            if *c < 3 {
                continue 'outer;
            }
            *c = 0;
        }
        break;
    }
    out.sort_by(Control::tie_order);
    out
}
