//! Discrete-event clock and a lossy broadcast medium with a collision-free
//! round-robin MAC.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap};
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::link_state::SimTime;
use crate::model::{NodeId, Topology};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MediumError {
    #[error("node {node} has no link configured at {rate} Mbps")]
    RateNotConfigured { node: NodeId, rate: f64 },
    #[error("node {0} is already transmitting")]
    Busy(NodeId),
}

/// Microseconds on air for `bits` of frame plus PHY overhead at `rate_mbps`.
pub fn airtime_us(frame_bytes: usize, phy_overhead_bits: u64, rate_mbps: f64) -> SimTime {
    let bits = frame_bytes as u64 * 8 + phy_overhead_bits;
    // every supported rate is a multiple of 0.5 Mbps
    let half_mbps = (rate_mbps * 2.0).round() as u64;
    assert!(half_mbps > 0, "rate must be positive");
    (bits * 2).div_ceil(half_mbps)
}

struct Scheduled<E> {
    time: SimTime,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Scheduled<E> {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
    }
}

impl<E> Eq for Scheduled<E> {}

impl<E> PartialOrd for Scheduled<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Scheduled<E> {
    fn cmp(&self, other: &Self) -> Ordering {
        (other.time, other.seq).cmp(&(self.time, self.seq))
    }
}

/// Time-ordered event queue; equal times fire in insertion order.
pub struct SimClock<E> {
    now: SimTime,
    seq: u64,
    queue: BinaryHeap<Scheduled<E>>,
}

impl<E> Default for SimClock<E> {
    fn default() -> Self {
        Self { now: 0, seq: 0, queue: BinaryHeap::new() }
    }
}

impl<E> SimClock<E> {
    pub fn now(&self) -> SimTime {
        self.now
    }

    /// Events in the past are clamped to now.
    pub fn schedule(&mut self, at: SimTime, event: E) {
        self.seq += 1;
        self.queue.push(Scheduled { time: at.max(self.now), seq: self.seq, event });
    }

    pub fn peek_time(&self) -> Option<SimTime> {
        self.queue.peek().map(|s| s.time)
    }

    /// Pops the next event no later than `t_end`, advancing the clock.
    pub fn step(&mut self, t_end: SimTime) -> Option<(SimTime, E)> {
        if self.peek_time()? > t_end {
            return None;
        }
        let s = self.queue.pop().expect("peeked");
        self.now = s.time;
        Some((s.time, s.event))
    }

    /// Moves the clock forward without firing anything.
    pub fn advance_to(&mut self, t: SimTime) {
        self.now = self.now.max(t);
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transmission {
    pub sender: NodeId,
    pub rate: f64,
    pub start: SimTime,
    pub airtime: SimTime,
    pub frame_len: usize,
    /// Every node with a link from the sender and whether it got the frame.
    pub receptions: Vec<(NodeId, bool)>,
}

impl Transmission {
    pub fn end(&self) -> SimTime {
        self.start + self.airtime
    }

    pub fn received_by(&self, node: NodeId) -> bool {
        self.receptions.iter().any(|(n, ok)| *n == node && *ok)
    }
}

const PROBE_STREAM: u64 = 1 << 63;

/// Independent ChaCha substream for `stream` under `seed`.
pub fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn link_stream(from: NodeId, to: NodeId) -> u64 {
    ((from.0 as u64) << 32) | to.0 as u64
}

/// Broadcast medium over a fixed topology.
pub struct Medium {
    seed: u64,
    phy_overhead_bits: u64,
    rates: BTreeMap<NodeId, BTreeSet<u64>>,
    out_links: BTreeMap<NodeId, Vec<NodeId>>,
    streams: HashMap<u64, ChaCha8Rng>,
    busy_until: SimTime,
    frames: u64,
    busy_time: SimTime,
}

fn rate_key(rate: f64) -> u64 {
    (rate * 2.0).round() as u64
}

impl Medium {
    pub fn new(topology: &Topology, seed: u64, phy_overhead_bits: u64) -> Self {
        let mut rates: BTreeMap<NodeId, BTreeSet<u64>> = BTreeMap::new();
        let mut out_links: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
        for l in topology.links() {
            let set = rates.entry(l.from).or_default();
            set.insert(rate_key(l.rate));
            set.extend(l.probe_rates().into_iter().map(rate_key));
            out_links.entry(l.from).or_default().push(l.to);
        }
        Self { seed, phy_overhead_bits, rates, out_links, streams: HashMap::new(), busy_until: 0, frames: 0, busy_time: 0 }
    }

    pub fn phy_overhead_bits(&self) -> u64 {
        self.phy_overhead_bits
    }

    pub fn frames(&self) -> u64 {
        self.frames
    }

    pub fn busy_time(&self) -> SimTime {
        self.busy_time
    }

    pub fn is_busy(&self, now: SimTime) -> bool {
        now < self.busy_until
    }

    /// Lowest rate `node` is configured to send at.
    pub fn lowest_rate(&self, node: NodeId) -> Option<f64> {
        self.rates.get(&node)?.iter().next().map(|k| *k as f64 / 2.0)
    }

    pub fn supports(&self, node: NodeId, rate: f64) -> bool {
        self.rates.get(&node).is_some_and(|s| s.contains(&rate_key(rate)))
    }

    fn draw(&mut self, stream: u64, p: f64) -> bool {
        let seed = self.seed;
        let rng = self.streams.entry(stream).or_insert_with(|| substream(seed, stream));
        rng.random::<f64>() < p
    }

    /// Sends one frame; every linked receiver gets it independently.
    pub fn transmit(
        &mut self,
        topology: &Topology,
        sender: NodeId,
        frame_len: usize,
        rate: f64,
        now: SimTime,
    ) -> Result<Transmission, MediumError> {
        if self.is_busy(now) {
            return Err(MediumError::Busy(sender));
        }
        if !self.supports(sender, rate) {
            return Err(MediumError::RateNotConfigured { node: sender, rate });
        }
        let airtime = airtime_us(frame_len, self.phy_overhead_bits, rate);
        let receivers = self.out_links.get(&sender).cloned().unwrap_or_default();
        let receptions = receivers
            .into_iter()
            .map(|to| {
                let p = topology.link(sender, to).map_or(0.0, |l| l.pdr_at(rate));
                (to, self.draw(link_stream(sender, to), p))
            })
            .collect();
        self.busy_until = now + airtime;
        self.frames += 1;
        self.busy_time += airtime;
        Ok(Transmission { sender, rate, start: now, airtime, frame_len, receptions })
    }

    /// Side-channel probe outcome for `from -> to` at `rate`; uses its own
    /// substreams and no airtime.
    pub fn probe(&mut self, topology: &Topology, from: NodeId, to: NodeId, rate: f64) -> bool {
        let p = topology.link(from, to).map_or(0.0, |l| l.pdr_at(rate));
        self.draw(PROBE_STREAM | link_stream(from, to), p)
    }
}

/// Round-robin channel arbitration over node slots.
#[derive(Debug, Clone, Default)]
pub struct RoundRobinMac {
    next: usize,
    grants: u64,
}

impl RoundRobinMac {
    /// First backlogged slot at or after the one following the last grant.
    pub fn grant(&mut self, backlogged: &[bool]) -> Option<usize> {
        let n = backlogged.len();
        let winner = (0..n).map(|k| (self.next + k) % n).find(|&i| backlogged[i])?;
        self.next = (winner + 1) % n;
        self.grants += 1;
        Some(winner)
    }

    pub fn grants(&self) -> u64 {
        self.grants
    }
}

/// Tab-separated event trace: time, type, node, detail.
pub enum Trace {
    Off,
    Memory(Vec<String>),
    Writer(Box<dyn Write>),
}

impl Trace {
    pub fn enabled(&self) -> bool {
        !matches!(self, Trace::Off)
    }

    pub fn log(&mut self, time: SimTime, kind: &str, node: NodeId, detail: impl FnOnce() -> String) {
        match self {
            Trace::Off => {}
            Trace::Memory(lines) => lines.push(format!("{time}\t{kind}\t{node}\t{}", detail())),
            Trace::Writer(w) => {
                // tracing is best effort
                let _ = writeln!(w, "{time}\t{kind}\t{node}\t{}", detail());
            }
        }
    }

    pub fn lines(&self) -> &[String] {
        match self {
            Trace::Memory(lines) => lines,
            _ => &[],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_wheel, WheelVariant};

    #[test]
    fn airtime_values() {
        assert_eq!(airtime_us(1500, 0, 12.0), 1000);
        assert_eq!(airtime_us(1500, 0, 54.0), 223);
        assert_eq!(airtime_us(11, 0, 5.5), 16);
        assert_eq!(airtime_us(0, 192, 1.0), 192);
    }

    #[test]
    fn clock_orders_and_breaks_ties_fifo() {
        let mut c = SimClock::default();
        c.schedule(5, "b");
        c.schedule(1, "a");
        c.schedule(5, "c");
        let fired: Vec<_> = std::iter::from_fn(|| c.step(10)).collect();
        assert_eq!(fired, vec![(1, "a"), (5, "b"), (5, "c")]);
        assert!(c.step(10).is_none());
    }

    #[test]
    fn clock_respects_horizon() {
        let mut c = SimClock::default();
        c.schedule(20, ());
        assert!(c.step(10).is_none());
        assert_eq!(c.pending(), 1);
        let mut empty: SimClock<()> = SimClock::default();
        assert!(empty.step(10).is_none());
    }

    #[test]
    fn delivery_ratio_converges() {
        let mut t = build_wheel(1, WheelVariant::Half).unwrap();
        t.set_pdr(NodeId(0), NodeId(2), 0.7).unwrap();
        let mut m = Medium::new(&t, 11, 0);
        let n = 100_000;
        let mut ok = 0;
        let mut now = 0;
        for _ in 0..n {
            let tx = m.transmit(&t, NodeId(0), 100, 54.0, now).unwrap();
            now = tx.end();
            ok += tx.received_by(NodeId(2)) as u32;
            assert!(tx.received_by(NodeId(1)));
        }
        assert!((ok as f64 / n as f64 - 0.7).abs() < 0.01);
    }

    #[test]
    fn rejects_unknown_rate_and_overlap() {
        let t = build_wheel(1, WheelVariant::Half).unwrap();
        let mut m = Medium::new(&t, 0, 0);
        assert!(matches!(m.transmit(&t, NodeId(0), 10, 6.0, 0), Err(MediumError::RateNotConfigured { .. })));
        m.transmit(&t, NodeId(0), 10, 54.0, 0).unwrap();
        assert_eq!(m.transmit(&t, NodeId(1), 10, 54.0, 1), Err(MediumError::Busy(NodeId(1))));
    }

    #[test]
    fn same_seed_same_draws() {
        let mut t = build_wheel(1, WheelVariant::Half).unwrap();
        t.set_pdr(NodeId(0), NodeId(2), 0.5).unwrap();
        let run = |seed| {
            let mut m = Medium::new(&t, seed, 0);
            (0..64).map(|i| m.transmit(&t, NodeId(0), 10, 54.0, i * 10).unwrap().received_by(NodeId(2))).collect::<Vec<_>>()
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
    }

    #[test]
    fn round_robin_order() {
        let mut mac = RoundRobinMac::default();
        let all = [true, true, true];
        let order: Vec<usize> = (0..4).map(|_| mac.grant(&all).unwrap()).collect();
        assert_eq!(order, vec![0, 1, 2, 0]);
        assert_eq!(mac.grant(&[false, true, false]), Some(1));
        assert_eq!(mac.grant(&[false, true, false]), Some(1));
        assert_eq!(mac.grant(&[false; 3]), None);
    }

    #[test]
    fn fair_share() {
        let mut mac = RoundRobinMac::default();
        let mut counts = [0u32; 3];
        for _ in 0..100_000 {
            counts[mac.grant(&[true; 3]).unwrap()] += 1;
        }
        for c in counts {
            assert!((c as f64 / 1e5 - 1.0 / 3.0).abs() < 0.01);
        }
    }

    #[test]
    fn trace_format() {
        let mut t = Trace::Memory(Vec::new());
        t.log(5, "TX", NodeId(1), || "data".into());
        assert_eq!(t.lines(), &["5\tTX\t1\tdata".to_string()]);
    }
}
