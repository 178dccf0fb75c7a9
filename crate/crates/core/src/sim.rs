//! Event loop tying sources, receivers and the relay to the medium.

use std::collections::{BTreeSet, HashMap, HashSet, VecDeque};

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use thiserror::Error;

use crate::ack::{
    Action, AckConfig, AckEvents, AckManager, Directive, PendingAckQueue, DEFAULT_FLUSH_US, DEFAULT_PIGGYBACK_CAP,
    DEFAULT_RETRY_CAP,
};
use crate::codec::{
    parse_frame, serialize_frame, xor_decode_with, xor_encode, AckRecord, AckStatus, CodecError, EncodedPacket, Frame,
    NativePacket, PacketId,
};
use crate::key_repo::{KeyRepository, KeyTag, DEFAULT_CAPACITY};
use crate::link_state::{decode_nt, encode_nt, LinkStateConfig, LinkStateUpdater, LinkView, SimTime, NT_MAGIC, SECOND_US};
use crate::medium::{substream, Medium, MediumError, RoundRobinMac, Trace, Transmission};
use crate::metrics::{Counters, FlowMetrics, Metrics, OpCounts};
use crate::model::{Flow, FlowId, NodeId, Topology};
use crate::scheduler::{Decision, Policy, QueuedPacket, Scheduler};

/// src_ip | dst_ip | seq | offset | flow_id
pub const INNER_HEADER_LEN: usize = 18;

const ARRIVAL_STREAM: u64 = 1 << 62;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Medium(#[from] MediumError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("node {0} has no link to the relay")]
    NoUplink(NodeId),
    #[error("payload of {0} bytes cannot hold the inner header")]
    PayloadTooSmall(usize),
    #[error("arrival rate {0} is not a valid rate")]
    BadLambda(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Traffic {
    /// Sources always have data, throttled once the relay holds `window`
    /// packets of their flow.
    Saturated { window: usize },
    /// Poisson arrivals, `lambda` packets per second per flow.
    Poisson { lambda: f64 },
}

#[derive(Debug, Clone)]
pub struct SimParams {
    pub topology: Topology,
    pub policy: Policy,
    pub traffic: Traffic,
    pub payload_bytes: usize,
    pub duration: SimTime,
    pub seed: u64,
    pub oracle_links: bool,
    pub key_repo_capacity: usize,
    /// `None` derives the timeout from each frame's airtime.
    pub ack_timeout: Option<SimTime>,
    pub ack_flush: SimTime,
    pub retry_cap: u32,
    pub explicit_nack: bool,
    pub srcr_period: SimTime,
    pub probes_per_period: usize,
    pub phy_overhead_bits: u64,
    /// Stop early once source plus relay queues reach this many packets.
    pub abort_backlog: Option<usize>,
    pub warmup_fraction: f64,
    pub piggyback_cap: usize,
    pub sample_interval: SimTime,
}

impl SimParams {
    pub fn new(topology: Topology, policy: Policy) -> Self {
        Self {
            topology,
            policy,
            traffic: Traffic::Saturated { window: 32 },
            payload_bytes: 1500,
            duration: 10 * SECOND_US,
            seed: 1,
            oracle_links: true,
            key_repo_capacity: DEFAULT_CAPACITY,
            ack_timeout: None,
            ack_flush: DEFAULT_FLUSH_US,
            retry_cap: DEFAULT_RETRY_CAP,
            explicit_nack: true,
            srcr_period: 3 * SECOND_US,
            probes_per_period: 30,
            phy_overhead_bits: 0,
            abort_backlog: None,
            warmup_fraction: 0.1,
            piggyback_cap: DEFAULT_PIGGYBACK_CAP,
            sample_interval: 10_000,
        }
    }
}

/// Native packet whose payload starts with the inner header and continues
/// with a fill pattern derived from the packet id.
pub fn make_packet(flow: &Flow, seq: u32, payload_bytes: usize) -> NativePacket {
    let src_ip = flow.source.ip();
    let id = crate::codec::packet_id(src_ip, seq, 0);
    let mut payload = Vec::with_capacity(payload_bytes);
    payload.extend_from_slice(&src_ip.to_be_bytes());
    payload.extend_from_slice(&flow.destination.ip().to_be_bytes());
    payload.extend_from_slice(&seq.to_be_bytes());
    payload.extend_from_slice(&0u16.to_be_bytes());
    payload.extend_from_slice(&flow.id.0.to_be_bytes());
    payload.extend((INNER_HEADER_LEN..payload_bytes).map(|k| fill_byte(id, k)));
    NativePacket::new(flow.id, src_ip, seq, 0, payload)
}

fn fill_byte(id: PacketId, k: usize) -> u8 {
    (id.0 >> (8 * (k % 4))) as u8 ^ k as u8
}

/// Rebuilds a native packet from its payload; `None` when the header or the
/// fill pattern is inconsistent with `id`.
pub fn parse_packet(id: PacketId, payload: &[u8]) -> Option<NativePacket> {
    if payload.len() < INNER_HEADER_LEN {
        return None;
    }
    let word = |i: usize| u32::from_be_bytes([payload[i], payload[i + 1], payload[i + 2], payload[i + 3]]);
    let (src_ip, seq) = (word(0), word(8));
    let offset = u16::from_be_bytes([payload[12], payload[13]]);
    let flow = FlowId(word(14));
    let p = NativePacket::new(flow, src_ip, seq, offset, payload.to_vec());
    let diff = payload[INNER_HEADER_LEN..]
        .iter()
        .enumerate()
        .fold(0u8, |acc, (i, b)| acc | (b ^ fill_byte(id, i + INNER_HEADER_LEN)));
    let fill_ok = diff == 0;
    (p.id == id && fill_ok).then_some(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Event {
    TxEnd,
    Arrival(usize),
    Wake,
    TokenDeadline,
    SrcrTick(usize),
    NtPublish(usize),
    Sample,
}

#[derive(Debug)]
enum TxKind {
    Nt,
    Uplink { flow_slot: usize, acks: Vec<AckRecord> },
    Acks(Vec<AckRecord>),
    Relay,
}

struct InFlight {
    node: usize,
    tx: Transmission,
    bytes: Vec<u8>,
    kind: TxKind,
}

struct SourceFlow {
    flow: Flow,
    queue: VecDeque<NativePacket>,
    arrivals: Option<(ChaCha8Rng, Exp<f64>)>,
}

struct NodeState {
    id: NodeId,
    repo: KeyRepository,
    acks: PendingAckQueue,
    links: LinkStateUpdater,
    nt_outbox: Option<Vec<u8>>,
    publish_armed: Option<SimTime>,
    sources: Vec<SourceFlow>,
    next_source: usize,
    seq: u32,
}

#[derive(Default, Clone)]
struct FlowTally {
    injected: u64,
    delivered: u64,
    delivered_after_warmup: u64,
    dropped: u64,
    duplicates: u64,
}

pub struct Simulator {
    p: SimParams,
    clock: crate::medium::SimClock<Event>,
    medium: Medium,
    mac: RoundRobinMac,
    nodes: Vec<NodeState>,
    index: HashMap<NodeId, usize>,
    scheduler: Scheduler,
    manager: AckManager,
    relay_repo: KeyRepository,
    /// Arrival order and flow of every packet awaiting an acknowledgment.
    inflight_arrival: HashMap<PacketId, (u64, FlowId)>,
    current: Option<InFlight>,
    token_wake: BTreeSet<SimTime>,
    flow_slots: HashMap<FlowId, usize>,
    tallies: Vec<FlowTally>,
    delivered: HashSet<PacketId>,
    dropped: HashSet<PacketId>,
    counters: Counters,
    ops: OpCounts,
    samples: Vec<(SimTime, usize)>,
    relay_samples: Vec<usize>,
    aborted: bool,
    trace: Trace,
}

impl Simulator {
    pub fn new(p: SimParams, trace: Trace) -> Result<Self, SimError> {
        if p.payload_bytes < INNER_HEADER_LEN {
            return Err(SimError::PayloadTooSmall(p.payload_bytes));
        }
        if let Traffic::Poisson { lambda } = p.traffic {
            if !(lambda.is_finite() && lambda >= 0.0) {
                return Err(SimError::BadLambda(lambda));
            }
        }
        let topo = &p.topology;
        let ls_cfg = LinkStateConfig { srcr_period: p.srcr_period, ..LinkStateConfig::default() };
        let node_ids = topo.nodes();
        let index: HashMap<NodeId, usize> = node_ids.iter().enumerate().map(|(i, n)| (*n, i)).collect();
        let mut nodes: Vec<NodeState> = node_ids
            .iter()
            .map(|n| NodeState {
                id: *n,
                repo: KeyRepository::new(p.key_repo_capacity),
                acks: PendingAckQueue::new(p.ack_flush, p.piggyback_cap),
                links: LinkStateUpdater::new(*n, ls_cfg.clone()),
                nt_outbox: None,
                publish_armed: None,
                sources: Vec::new(),
                next_source: 0,
                seq: 0,
            })
            .collect();
        let mut flow_slots = HashMap::new();
        for (slot, f) in topo.flows().iter().enumerate() {
            flow_slots.insert(f.id, slot);
            if topo.link(f.source, topo.relay()).is_none() {
                return Err(SimError::NoUplink(f.source));
            }
            let arrivals = match p.traffic {
                Traffic::Poisson { lambda } if lambda > 0.0 => Some((
                    substream(p.seed, ARRIVAL_STREAM | f.id.0 as u64),
                    Exp::new(lambda).map_err(|_| SimError::BadLambda(lambda))?,
                )),
                _ => None,
            };
            nodes[index[&f.source]].sources.push(SourceFlow { flow: *f, queue: VecDeque::new(), arrivals });
        }
        let view = if p.oracle_links { LinkView::from_topology(topo, 0) } else { LinkView::new(0) };
        let scheduler = Scheduler::new(topo.clone(), p.policy, view);
        let manager = AckManager::new(AckConfig {
            timeout: p.ack_timeout.unwrap_or(SimTime::MAX / 4),
            retry_cap: p.retry_cap,
            feedback: p.policy == Policy::Alg2,
        });
        let n_flows = topo.flows().len();
        let medium = Medium::new(topo, p.seed, p.phy_overhead_bits);
        Ok(Self {
            clock: Default::default(),
            medium,
            mac: RoundRobinMac::default(),
            nodes,
            index,
            scheduler,
            manager,
            relay_repo: KeyRepository::new(p.key_repo_capacity),
            inflight_arrival: HashMap::new(),
            current: None,
            token_wake: BTreeSet::new(),
            flow_slots,
            tallies: vec![FlowTally::default(); n_flows],
            delivered: HashSet::new(),
            dropped: HashSet::new(),
            counters: Counters::default(),
            ops: OpCounts::default(),
            samples: Vec::new(),
            relay_samples: Vec::new(),
            aborted: false,
            trace,
            p,
        })
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn into_trace(self) -> Trace {
        self.trace
    }

    fn warmup(&self) -> SimTime {
        (self.p.duration as f64 * self.p.warmup_fraction) as SimTime
    }

    fn relay(&self) -> NodeId {
        self.p.topology.relay()
    }

    pub fn run(&mut self) -> Result<Metrics, SimError> {
        self.clock.schedule(0, Event::Sample);
        for (ni, node) in self.nodes.iter_mut().enumerate() {
            for (si, s) in node.sources.iter_mut().enumerate() {
                if let Some((rng, exp)) = s.arrivals.as_mut() {
                    let dt = (exp.sample(rng) * 1e6).ceil() as SimTime;
                    self.clock.schedule(dt, Event::Arrival(ni * 1024 + si));
                }
            }
            if !self.p.oracle_links {
                self.clock.schedule(self.p.srcr_period, Event::SrcrTick(ni));
            }
        }
        let end = self.p.duration;
        self.try_start()?;
        while let Some((now, ev)) = self.clock.step(end) {
            self.handle(now, ev)?;
            if self.aborted {
                break;
            }
            self.try_start()?;
        }
        if !self.aborted {
            self.clock.advance_to(end);
        }
        self.sample(self.clock.now());
        Ok(self.metrics())
    }

    fn handle(&mut self, now: SimTime, ev: Event) -> Result<(), SimError> {
        match ev {
            Event::TxEnd => self.finish_tx(now)?,
            Event::Arrival(code) => {
                let (ni, si) = (code / 1024, code % 1024);
                let node = &mut self.nodes[ni];
                node.seq += 1;
                let seq = node.seq;
                let s = &mut node.sources[si];
                let packet = make_packet(&s.flow, seq, self.p.payload_bytes);
                s.queue.push_back(packet);
                self.tallies[self.flow_slots[&s.flow.id]].injected += 1;
                let (rng, exp) = s.arrivals.as_mut().expect("arrival stream");
                let dt = ((exp.sample(rng) * 1e6).ceil() as SimTime).max(1);
                self.clock.schedule(now + dt, Event::Arrival(code));
            }
            Event::Wake => {}
            Event::TokenDeadline => {
                self.token_wake.remove(&now);
                let directives = self.manager.on_timeout(now);
                for d in directives {
                    self.trace.log(now, "TIMEOUT", NodeId(0), || d.packet_id.to_string());
                    self.apply_directive(now, d);
                }
            }
            Event::SrcrTick(ni) => self.srcr_tick(now, ni)?,
            Event::NtPublish(ni) => {
                self.nodes[ni].publish_armed = None;
                if let Some(view) = self.nodes[ni].links.on_publish_timer(now) {
                    if self.nodes[ni].id == self.relay() {
                        self.scheduler.set_view(view);
                        self.counters.view_updates += 1;
                    }
                }
                self.arm_publish(ni);
            }
            Event::Sample => {
                self.sample(now);
                if let Some(limit) = self.p.abort_backlog {
                    if self.samples.last().is_some_and(|(_, b)| *b >= limit) {
                        self.aborted = true;
                        return Ok(());
                    }
                }
                self.clock.schedule(now + self.p.sample_interval, Event::Sample);
            }
        }
        Ok(())
    }

    fn source_backlog(&self) -> usize {
        self.nodes.iter().flat_map(|n| &n.sources).map(|s| s.queue.len()).sum()
    }

    fn sample(&mut self, now: SimTime) {
        let relay = self.scheduler.total_backlog();
        if self.samples.last().is_some_and(|(t, _)| *t == now) {
            return;
        }
        self.samples.push((now, relay + self.source_backlog()));
        self.relay_samples.push(relay);
    }

    fn arm_publish(&mut self, ni: usize) {
        if let Some(at) = self.nodes[ni].links.publish_deadline() {
            if self.nodes[ni].publish_armed != Some(at) {
                self.nodes[ni].publish_armed = Some(at);
                self.clock.schedule(at, Event::NtPublish(ni));
            }
        }
    }

    fn srcr_tick(&mut self, now: SimTime, ni: usize) -> Result<(), SimError> {
        let me = self.nodes[ni].id;
        let links: Vec<(NodeId, Vec<f64>)> =
            self.p.topology.links().filter(|l| l.from == me).map(|l| (l.to, l.probe_rates())).collect();
        for (to, rates) in links {
            for rate in rates {
                for _ in 0..self.p.probes_per_period {
                    let ok = self.medium.probe(&self.p.topology, me, to, rate);
                    self.nodes[ni].links.record_probe(me, to, rate, ok);
                }
            }
        }
        if let Some(table) = self.nodes[ni].links.on_period_tick(now) {
            self.nodes[ni].nt_outbox = Some(encode_nt(me, &table)?);
        }
        self.arm_publish(ni);
        self.trace.log(now, "SRCR", me, || format!("nt={}", self.nodes[ni].links.neighbor_table().entries.len()));
        self.clock.schedule(now + self.p.srcr_period, Event::SrcrTick(ni));
        Ok(())
    }

    fn eligible_source(&self, ni: usize) -> Option<usize> {
        let node = &self.nodes[ni];
        let n = node.sources.len();
        (0..n).map(|k| (node.next_source + k) % n).find(|&si| {
            let s = &node.sources[si];
            match self.p.traffic {
                Traffic::Saturated { window } => {
                    !s.queue.is_empty() || self.scheduler.flow_backlog(s.flow.id) < window
                }
                Traffic::Poisson { .. } => !s.queue.is_empty(),
            }
        })
    }

    fn backlogged(&self, ni: usize, now: SimTime) -> bool {
        let node = &self.nodes[ni];
        if node.nt_outbox.is_some() {
            return true;
        }
        if node.id == self.relay() {
            return self.scheduler.direct_len() > 0 || self.scheduler.select() != Decision::Idle;
        }
        self.eligible_source(ni).is_some() || (node.acks.flush_due(now) && !node.acks.is_empty())
    }

    fn try_start(&mut self) -> Result<(), SimError> {
        let now = self.clock.now();
        if self.current.is_some() || now >= self.p.duration {
            return Ok(());
        }
        let ready: Vec<bool> = (0..self.nodes.len()).map(|i| self.backlogged(i, now)).collect();
        let Some(ni) = self.mac.grant(&ready) else { return Ok(()) };
        let inflight = if let Some(bytes) = self.nodes[ni].nt_outbox.take() {
            let me = self.nodes[ni].id;
            let rate = self.medium.lowest_rate(me).expect("a node with a table has links");
            self.counters.nt_frames += 1;
            self.send(ni, bytes, rate, TxKind::Nt, now)?
        } else if ni == 0 {
            self.start_relay(now)?
        } else {
            self.start_neighbor(ni, now)?
        };
        self.trace.log(now, "TX", inflight.tx.sender, || {
            format!("{:?} len={} rate={} end={}", short_kind(&inflight.kind), inflight.tx.frame_len, inflight.tx.rate, inflight.tx.end())
        });
        self.clock.schedule(inflight.tx.end(), Event::TxEnd);
        self.current = Some(inflight);
        Ok(())
    }

    fn send(&mut self, ni: usize, bytes: Vec<u8>, rate: f64, kind: TxKind, now: SimTime) -> Result<InFlight, SimError> {
        let tx = self.medium.transmit(&self.p.topology, self.nodes[ni].id, bytes.len(), rate, now)?;
        Ok(InFlight { node: ni, tx, bytes, kind })
    }

    fn start_neighbor(&mut self, ni: usize, now: SimTime) -> Result<InFlight, SimError> {
        let relay = self.relay();
        let me = self.nodes[ni].id;
        let rate = self.p.topology.rate(me, relay).ok_or(SimError::NoUplink(me))?;
        if let Some(si) = self.eligible_source(ni) {
            let node = &mut self.nodes[ni];
            node.next_source = (si + 1) % node.sources.len();
            if node.sources[si].queue.is_empty() {
                node.seq += 1;
                let packet = make_packet(&node.sources[si].flow, node.seq, self.p.payload_bytes);
                node.sources[si].queue.push_back(packet);
                self.tallies[self.flow_slots[&node.sources[si].flow.id]].injected += 1;
            }
            let packet = node.sources[si].queue.front().expect("eligible source has a packet").clone();
            let mut enc = xor_encode(&[(&packet, relay)])?;
            self.ops.encode += 1;
            node.acks.piggyback_or_flush(Some(&mut enc), now);
            let acks = enc.piggyback.clone();
            node.repo.store(packet, KeyTag::Own);
            self.ops.key_store += 1;
            self.counters.uplink_frames += 1;
            self.counters.ack_records += acks.len() as u64;
            let bytes = serialize_frame(&Frame::Data(enc))?;
            self.schedule_flush(ni);
            return self.send(ni, bytes, rate, TxKind::Uplink { flow_slot: si, acks }, now);
        }
        let records = self.nodes[ni].acks.piggyback_or_flush(None, now).expect("backlogged node has acks due");
        self.counters.ack_frames += 1;
        self.counters.ack_records += records.len() as u64;
        let bytes = serialize_frame(&Frame::Ack(records.clone()))?;
        self.schedule_flush(ni);
        self.send(ni, bytes, rate, TxKind::Acks(records), now)
    }

    fn start_relay(&mut self, now: SimTime) -> Result<InFlight, SimError> {
        let relay = self.relay();
        let (members, direct): (Vec<QueuedPacket>, bool) = match self.scheduler.pop_direct() {
            Some(qp) => (vec![qp], true),
            None => {
                let Decision::Serve(control) = self.scheduler.select() else {
                    unreachable!("relay granted without work")
                };
                (self.scheduler.take(&control).into_iter().map(|(_, qp)| qp).collect(), false)
            }
        };
        self.ops.weight_recomputes = self.scheduler.control_list().recomputes();
        let dests: Vec<NodeId> = members
            .iter()
            .map(|qp| self.p.topology.flow(qp.packet.flow_id).expect("queued flow exists").destination)
            .collect();
        let view = self.scheduler.view();
        let rate = dests
            .iter()
            .map(|d| view.rate(relay, *d))
            .try_fold(f64::INFINITY, |acc, r| r.map(|r| acc.min(r)))
            .filter(|r| self.medium.supports(relay, *r))
            .unwrap_or_else(|| self.medium.lowest_rate(relay).expect("relay has links"));
        let pairs: Vec<(&NativePacket, NodeId)> = members.iter().map(|qp| &qp.packet).zip(dests.iter().copied()).collect();
        let enc = xor_encode(&pairs)?;
        self.ops.encode += 1;
        let bytes = serialize_frame(&Frame::Data(enc.clone()))?;
        let retries: Vec<u32> = members.iter().map(|qp| qp.retries).collect();
        if members.iter().any(|qp| qp.retries > 0) {
            self.counters.retx += members.iter().filter(|qp| qp.retries > 0).count() as u64;
        }
        for qp in &members {
            self.relay_repo.store(qp.packet.clone(), KeyTag::Own);
            self.ops.key_store += 1;
            self.inflight_arrival.insert(qp.packet.id, (qp.arrival, qp.packet.flow_id));
        }
        let inflight = self.send(0, bytes, rate, TxKind::Relay, now)?;
        let timeout = self
            .p
            .ack_timeout
            .unwrap_or(4 * inflight.tx.airtime + 2 * self.p.ack_flush);
        self.manager.issue_tokens_with(&enc, &retries, now, timeout);
        self.ops.ack_ops += members.len() as u64;
        if self.token_wake.insert(now + timeout) {
            self.clock.schedule(now + timeout, Event::TokenDeadline);
        }
        if members.len() > 1 {
            self.counters.coded_frames += 1;
        } else if direct {
            self.counters.direct_frames += 1;
        } else {
            self.counters.native_frames += 1;
        }
        Ok(inflight)
    }

    fn schedule_flush(&mut self, ni: usize) {
        if let Some(at) = self.nodes[ni].acks.flush_deadline() {
            self.clock.schedule(at, Event::Wake);
        }
    }

    fn finish_tx(&mut self, now: SimTime) -> Result<(), SimError> {
        let InFlight { node: ni, tx, bytes, kind } = self.current.take().expect("a transmission ends");
        let sender = tx.sender;
        let relay = self.relay();
        for (rx, ok) in &tx.receptions {
            self.trace.log(now, if *ok { "RX" } else { "LOSS" }, *rx, || format!("from={sender}"));
        }
        if let TxKind::Nt = kind {
            debug_assert_eq!(crate::codec::peek_magic(&bytes), Some(NT_MAGIC));
            let (from, table) = decode_nt(&bytes, now)?;
            for (rx, ok) in tx.receptions.clone() {
                if !ok {
                    continue;
                }
                let ri = self.index[&rx];
                if let Some(reply) = self.nodes[ri].links.on_nt_received(from, table.clone(), now) {
                    self.nodes[ri].nt_outbox = Some(encode_nt(rx, &reply)?);
                }
                self.arm_publish(ri);
            }
            return Ok(());
        }
        let frame = parse_frame(&bytes)?;
        let relay_got = tx.received_by(relay);
        match kind {
            TxKind::Uplink { flow_slot, acks } => {
                let Frame::Data(enc) = &frame else { unreachable!("uplinks carry data") };
                if relay_got {
                    self.relay_receive_acks(now, &enc.piggyback);
                    let entry = enc.entries[0];
                    let native = parse_packet(entry.packet_id, &enc.payload).ok_or(SimError::Codec(
                        CodecError::MalformedFrame("inner header"),
                    ))?;
                    self.scheduler.enqueue(native);
                    self.nodes[ni].sources[flow_slot].queue.pop_front();
                } else {
                    self.counters.uplink_retries += 1;
                    for r in acks.into_iter().rev() {
                        self.nodes[ni].acks.push_front(r, now);
                    }
                    self.schedule_flush(ni);
                }
                let overheard: Vec<NodeId> =
                    tx.receptions.iter().filter(|(rx, ok)| *ok && *rx != relay).map(|(rx, _)| *rx).collect();
                if !overheard.is_empty() {
                    if let Some(native) = parse_packet(enc.entries[0].packet_id, &enc.payload) {
                        for rx in overheard {
                            self.nodes[self.index[&rx]].repo.store(native.clone(), KeyTag::Overheard);
                            self.ops.key_store += 1;
                        }
                    }
                }
            }
            TxKind::Acks(records) => {
                if relay_got {
                    let Frame::Ack(recs) = &frame else { unreachable!("ack frames carry acks") };
                    self.relay_receive_acks(now, recs);
                } else {
                    for r in records.into_iter().rev() {
                        self.nodes[ni].acks.push_front(r, now);
                    }
                    self.schedule_flush(ni);
                }
            }
            TxKind::Relay => {
                let Frame::Data(enc) = frame else { unreachable!("relay sends data") };
                for (rx, ok) in tx.receptions.clone() {
                    if ok {
                        self.receive_coded(now, self.index[&rx], &enc);
                    }
                }
            }
            TxKind::Nt => unreachable!(),
        }
        Ok(())
    }

    fn receive_coded(&mut self, now: SimTime, ri: usize, enc: &EncodedPacket) {
        let me = self.nodes[ri].id;
        let mut statuses = Vec::new();
        for e in enc.entries.iter().filter(|e| e.next_hop == me) {
            self.ops.decode += 1;
            let repo = &self.nodes[ri].repo;
            match xor_decode_with(enc, |id| repo.lookup(id).map(|p| p.payload.as_slice()), e.packet_id) {
                Ok(payload) => match parse_packet(e.packet_id, &payload) {
                    Some(native) => {
                        statuses.push((e.packet_id, AckStatus::Decoded));
                        self.deliver(now, me, native);
                    }
                    None => self.counters.corrupt_decodes += 1,
                },
                Err(_) => {
                    self.counters.decode_failures += 1;
                    self.counters.key_missing += 1;
                    if self.p.explicit_nack {
                        statuses.push((e.packet_id, AckStatus::KeyMissing));
                    }
                }
            }
        }
        if !statuses.is_empty() {
            let record = AckRecord { combination_id: enc.combination_id, reporter: me, statuses };
            self.nodes[ri].acks.push(record, now);
            self.ops.ack_ops += 1;
            self.schedule_flush(ri);
        }
    }

    fn deliver(&mut self, now: SimTime, at: NodeId, native: NativePacket) {
        let Some(&slot) = self.flow_slots.get(&native.flow_id) else { return };
        let after_warmup = now >= self.warmup();
        if self.p.topology.flows()[slot].destination != at {
            return;
        }
        let t = &mut self.tallies[slot];
        if !self.delivered.insert(native.id) {
            t.duplicates += 1;
            self.counters.duplicates += 1;
            return;
        }
        if self.dropped.remove(&native.id) {
            t.dropped -= 1;
        }
        t.delivered += 1;
        if after_warmup {
            t.delivered_after_warmup += 1;
        }
        self.trace.log(now, "DELIVER", at, || native.id.to_string());
    }

    fn relay_receive_acks(&mut self, now: SimTime, records: &[AckRecord]) {
        for r in records {
            self.ops.ack_ops += 1;
            let before = self.manager.counters().clone();
            let ev: AckEvents = self.manager.on_ack(r, now);
            let after = self.manager.counters();
            self.counters.duplicate_acks += after.duplicates - before.duplicates;
            self.counters.unknown_acks += after.unknown - before.unknown;
            self.counters.late_acks += after.late - before.late;
            for id in &ev.resolved {
                self.inflight_arrival.remove(id);
            }
            for id in ev.late_decoded {
                if self.scheduler.remove(id).is_some() {
                    self.inflight_arrival.remove(&id);
                }
            }
            for d in ev.directives {
                self.apply_directive(now, d);
            }
        }
    }

    fn apply_directive(&mut self, now: SimTime, d: Directive) {
        let (arrival, flow) = match self.inflight_arrival.get(&d.packet_id) {
            Some((a, f)) => (*a, Some(*f)),
            None => (0, None),
        };
        let packet = self.relay_repo.lookup(d.packet_id).cloned();
        let Some(packet) = packet else {
            self.counters.evicted_before_retx += 1;
            self.record_drop(d.packet_id, flow);
            self.inflight_arrival.remove(&d.packet_id);
            return;
        };
        let qp = QueuedPacket { packet, retries: d.retries, arrival };
        match d.action {
            Action::Requeue => self.scheduler.requeue_front(qp),
            Action::Good => self.scheduler.push_good(qp),
            Action::Direct => self.scheduler.push_direct(qp),
            Action::Drop => {
                self.trace.log(now, "DROP", self.relay(), || d.packet_id.to_string());
                self.inflight_arrival.remove(&d.packet_id);
                self.record_drop(d.packet_id, Some(qp.packet.flow_id));
            }
        }
    }

    fn record_drop(&mut self, id: PacketId, flow: Option<FlowId>) {
        self.counters.drops += 1;
        if self.delivered.contains(&id) || !self.dropped.insert(id) {
            return;
        }
        if let Some(slot) = flow.and_then(|f| self.flow_slots.get(&f).copied()) {
            self.tallies[slot].dropped += 1;
        }
    }

    fn metrics(&self) -> Metrics {
        let warmup = self.warmup();
        let window = self.clock.now().saturating_sub(warmup).max(1);
        let mut in_system: HashMap<FlowId, HashSet<PacketId>> = HashMap::new();
        let mut note = |flow: FlowId, id: PacketId| {
            if !self.delivered.contains(&id) && !self.dropped.contains(&id) {
                in_system.entry(flow).or_default().insert(id);
            }
        };
        for s in self.nodes.iter().flat_map(|n| &n.sources) {
            for p in &s.queue {
                note(s.flow.id, p.id);
            }
        }
        for f in self.p.topology.flows() {
            for id in self.scheduler.queued_ids(f.id) {
                note(f.id, id);
            }
        }
        for id in self.manager.pending_ids() {
            if let Some((_, flow)) = self.inflight_arrival.get(&id) {
                note(*flow, id);
            }
        }
        let bits = (self.p.payload_bytes * 8) as f64;
        let flows: Vec<FlowMetrics> = self
            .p
            .topology
            .flows()
            .iter()
            .zip(&self.tallies)
            .map(|(f, t)| FlowMetrics {
                flow_id: f.id,
                injected: t.injected,
                delivered: t.delivered,
                delivered_after_warmup: t.delivered_after_warmup,
                dropped: t.dropped,
                duplicates: t.duplicates,
                in_system: in_system.get(&f.id).map_or(0, |s| s.len() as u64),
                throughput_mbps: t.delivered_after_warmup as f64 * bits / window as f64,
            })
            .collect();
        let n = self.samples.len().max(1) as f64;
        Metrics {
            policy: self.p.policy.to_string(),
            seed: self.p.seed,
            duration_us: self.clock.now(),
            warmup_us: warmup,
            aggregate_mbps: flows.iter().map(|f| f.throughput_mbps).sum(),
            flows,
            max_queue: self.relay_samples.iter().copied().max().unwrap_or(0),
            mean_queue: self.relay_samples.iter().sum::<usize>() as f64 / n,
            max_backlog: self.samples.iter().map(|(_, b)| *b).max().unwrap_or(0),
            mean_backlog: self.samples.iter().map(|(_, b)| *b).sum::<usize>() as f64 / n,
            final_backlog: self.samples.last().map_or(0, |(_, b)| *b),
            backlog_trace: self.samples.clone(),
            frames: self.medium.frames(),
            busy_us: self.medium.busy_time(),
            aborted: self.aborted,
            counters: self.counters.clone(),
            ops: OpCounts { weight_recomputes: self.scheduler.control_list().recomputes(), ..self.ops.clone() },
        }
    }
}

fn short_kind(kind: &TxKind) -> &'static str {
    match kind {
        TxKind::Nt => "nt",
        TxKind::Uplink { .. } => "uplink",
        TxKind::Acks(_) => "ack",
        TxKind::Relay => "relay",
    }
}

/// Runs one simulation.
pub fn simulate(p: SimParams) -> Result<Metrics, SimError> {
    Simulator::new(p, Trace::Off)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_wheel, WheelVariant};

    #[test]
    fn payload_round_trip() {
        let f = Flow { id: FlowId(2), source: NodeId(2), destination: NodeId(1) };
        let p = make_packet(&f, 9, 100);
        assert_eq!(p.payload.len(), 100);
        assert_eq!(parse_packet(p.id, &p.payload), Some(p.clone()));
        let mut bad = p.payload.clone();
        bad[50] ^= 1;
        assert!(parse_packet(p.id, &bad).is_none());
        assert!(parse_packet(PacketId(1), &p.payload).is_none());
    }

    #[test]
    fn short_run_conserves_packets() {
        let t = build_wheel(2, WheelVariant::Full).unwrap();
        let mut p = SimParams::new(t, Policy::Alg1);
        p.duration = 100_000;
        let m = simulate(p).unwrap();
        assert!(m.total_delivered() > 0);
        for f in &m.flows {
            assert!(f.delivered <= f.injected);
            assert_eq!(f.delivered + f.dropped + f.in_system, f.injected);
        }
        assert_eq!(m.counters.retx, 0);
        assert!(m.counters.coded_frames > 0);
    }
}
