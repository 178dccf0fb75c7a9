//! Service rates, control weights and the relay's transmission policies.

mod control_list;

pub use control_list::{rank, ControlList};

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{NativePacket, PacketId};
use crate::link_state::LinkView;
use crate::model::{
    enumerate_controls, enumerate_state_controls, key_probability, Control, FlowId, QueueKey, QueueState, Topology,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SchedulerError {
    #[error("flow {0} is not a member of the control")]
    NotAMember(FlowId),
    #[error("flow {0} is not configured")]
    UnknownFlow(FlowId),
    #[error("no relay rate towards the destination of flow {0}")]
    MissingRate(FlowId),
}

/// Expected service rate of `flow` under `control`: the probability that its
/// destination holds every other member's packet, times the slowest relay
/// rate among the intended receivers. Members in the good state count as held.
pub fn mu(topology: &Topology, view: &LinkView, control: &Control, flow: FlowId) -> Result<f64, SchedulerError> {
    if !control.contains_flow(flow) {
        return Err(SchedulerError::NotAMember(flow));
    }
    let relay = topology.relay();
    let target = topology.flow(flow).ok_or(SchedulerError::UnknownFlow(flow))?;
    let mut prob = 1.0;
    let mut rate = f64::INFINITY;
    for m in control.members() {
        let f = topology.flow(m.flow).ok_or(SchedulerError::UnknownFlow(m.flow))?;
        rate = rate.min(view.rate(relay, f.destination).ok_or(SchedulerError::MissingRate(m.flow))?);
        if m.flow != flow && m.state == QueueState::Unknown {
            prob *= key_probability(view, f.source, target.destination);
        }
    }
    Ok(prob * rate)
}

/// Σ Q·μ over the members; `mu` is given in member order.
pub fn weight(control: &Control, mu: &[f64], backlog: impl Fn(QueueKey) -> usize) -> f64 {
    control.members().iter().zip(mu).map(|(m, mu)| backlog(*m) as f64 * mu).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase")]
pub enum Policy {
    Plain,
    Alg1,
    Alg2,
    Ftp { delta: f64 },
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Policy::Plain => write!(f, "plain"),
            Policy::Alg1 => write!(f, "alg1"),
            Policy::Alg2 => write!(f, "alg2"),
            Policy::Ftp { delta } => write!(f, "ftp{delta}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Decision {
    Idle,
    Serve(Control),
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueuedPacket {
    pub packet: NativePacket,
    pub retries: u32,
    pub arrival: u64,
}

/// Outcome reported for one entry of a combination.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntryOutcome {
    Decoded,
    KeyMissing,
    Unreported,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Classification {
    Good,
    Bad,
}

/// Feedback classification: a failed packet is good when every other
/// receiver of the combination decoded its own entry (and so held this packet
/// as a key), bad otherwise.
pub fn classify_failures(outcomes: &[(PacketId, EntryOutcome)]) -> Vec<(PacketId, Classification)> {
    outcomes
        .iter()
        .enumerate()
        .filter(|(_, (_, o))| *o != EntryOutcome::Decoded)
        .map(|(i, (id, _))| {
            let others = outcomes.iter().enumerate().filter(|(j, _)| *j != i);
            let good = outcomes.len() > 1 && others.clone().all(|(_, (_, o))| *o == EntryOutcome::Decoded);
            (*id, if good { Classification::Good } else { Classification::Bad })
        })
        .collect()
}

/// Relay-side queues and the policy that serves them.
#[derive(Debug, Clone)]
pub struct Scheduler {
    topology: Topology,
    policy: Policy,
    view: LinkView,
    queues: BTreeMap<QueueKey, VecDeque<QueuedPacket>>,
    direct: VecDeque<QueuedPacket>,
    controls: Vec<Control>,
    list: ControlList,
    arrivals: u64,
    rebuilds: u64,
}

impl Scheduler {
    pub fn new(topology: Topology, policy: Policy, view: LinkView) -> Self {
        let mut queues = BTreeMap::new();
        for f in topology.flows() {
            queues.insert(QueueKey::unknown(f.id), VecDeque::new());
            if policy == Policy::Alg2 {
                queues.insert(QueueKey::good(f.id), VecDeque::new());
            }
        }
        let mut s = Self {
            topology,
            policy,
            view,
            queues,
            direct: VecDeque::new(),
            controls: Vec::new(),
            list: ControlList::default(),
            arrivals: 0,
            rebuilds: 0,
        };
        s.rebuild();
        s
    }

    pub fn policy(&self) -> Policy {
        self.policy
    }

    pub fn view(&self) -> &LinkView {
        &self.view
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn control_list(&self) -> &ControlList {
        &self.list
    }

    pub fn controls(&self) -> &[Control] {
        &self.controls
    }

    pub fn rebuilds(&self) -> u64 {
        self.rebuilds
    }

    /// Installs a new link snapshot; every rate and weight is recomputed.
    pub fn set_view(&mut self, view: LinkView) {
        self.view = view;
        self.rebuild();
    }

    fn rebuild(&mut self) {
        self.rebuilds += 1;
        self.controls = match self.policy {
            Policy::Plain => self.topology.flows().iter().filter_map(|f| Control::of_flows([f.id])).collect(),
            Policy::Alg2 => enumerate_state_controls(&self.topology, &self.view),
            Policy::Alg1 | Policy::Ftp { .. } => enumerate_controls(&self.topology, &self.view),
        };
        let entries = self
            .controls
            .iter()
            .map(|c| {
                let mus = c.flows().map(|f| mu(&self.topology, &self.view, c, f).unwrap_or(0.0)).collect();
                (c.clone(), mus)
            })
            .collect();
        let queues = &self.queues;
        self.list = ControlList::build(entries, |k| queues.get(&k).map_or(0, VecDeque::len));
    }

    fn touched(&mut self, key: QueueKey) {
        let queues = &self.queues;
        self.list.on_backlog_change(key, |k| queues.get(&k).map_or(0, VecDeque::len));
    }

    fn push(&mut self, key: QueueKey, qp: QueuedPacket, front: bool) {
        let q = self.queues.get_mut(&key).unwrap_or_else(|| panic!("no queue {key}"));
        if front {
            q.push_front(qp);
        } else {
            q.push_back(qp);
        }
        self.touched(key);
    }

    /// A fresh packet from a source joins the back of its flow's queue.
    pub fn enqueue(&mut self, packet: NativePacket) {
        self.arrivals += 1;
        let qp = QueuedPacket { packet, retries: 0, arrival: self.arrivals };
        self.push(QueueKey::unknown(qp.packet.flow_id), qp, false);
    }

    /// Retransmission ahead of everything else of its flow.
    pub fn requeue_front(&mut self, qp: QueuedPacket) {
        self.push(QueueKey::unknown(qp.packet.flow_id), qp, true);
    }

    pub fn push_good(&mut self, qp: QueuedPacket) {
        let key = match self.policy {
            Policy::Alg2 => QueueKey::good(qp.packet.flow_id),
            _ => QueueKey::unknown(qp.packet.flow_id),
        };
        self.push(key, qp, false);
    }

    pub fn push_direct(&mut self, qp: QueuedPacket) {
        self.direct.push_back(qp);
    }

    pub fn pop_direct(&mut self) -> Option<QueuedPacket> {
        self.direct.pop_front()
    }

    pub fn direct_len(&self) -> usize {
        self.direct.len()
    }

    pub fn backlog(&self, key: QueueKey) -> usize {
        self.queues.get(&key).map_or(0, VecDeque::len)
    }

    /// Packets of `flow` waiting at the relay, direct sends included.
    pub fn flow_backlog(&self, flow: FlowId) -> usize {
        let queued: usize = self.queues.iter().filter(|(k, _)| k.flow == flow).map(|(_, q)| q.len()).sum();
        queued + self.direct.iter().filter(|p| p.packet.flow_id == flow).count()
    }

    pub fn total_backlog(&self) -> usize {
        self.queues.values().map(VecDeque::len).sum::<usize>() + self.direct.len()
    }

    fn oldest_singleton(&self) -> Option<Control> {
        self.queues
            .iter()
            .filter_map(|(k, q)| q.front().map(|p| (p.arrival, *k)))
            .min()
            .and_then(|(_, k)| Control::new(vec![k]))
    }

    fn select_ftp(&self, delta: f64) -> Option<Control> {
        let relay_view = &self.view;
        let admissible = |c: &Control| {
            c.members().iter().all(|m| self.backlog(*m) > 0)
                && c.flows().all(|i| {
                    let di = self.topology.flow(i).map(|f| f.destination);
                    c.flows().filter(|j| *j != i).all(|j| {
                        let sj = self.topology.flow(j).map(|f| f.source);
                        match (sj, di) {
                            (Some(s), Some(d)) => key_probability(relay_view, s, d) >= delta,
                            _ => false,
                        }
                    })
                })
        };
        let mut best: Option<&Control> = None;
        for c in self.controls.iter().filter(|c| admissible(c)) {
            if best.is_none_or(|b| c.len() > b.len()) {
                best = Some(c);
            }
        }
        best.cloned()
    }

    /// Chooses the next control; direct sends are handled by the caller.
    pub fn select(&self) -> Decision {
        let chosen = match self.policy {
            Policy::Plain => self.oldest_singleton(),
            Policy::Ftp { delta } => self.select_ftp(delta),
            Policy::Alg1 | Policy::Alg2 => match self.list.head() {
                Some((c, w)) if w > 0.0 => Some(c.clone()),
                // rates not yet known: fall back to uncoded FIFO service
                _ => self.oldest_singleton(),
            },
        };
        chosen.map_or(Decision::Idle, Decision::Serve)
    }

    /// Removes the head packet of every member queue.
    pub fn take(&mut self, control: &Control) -> Vec<(QueueKey, QueuedPacket)> {
        let mut out = Vec::with_capacity(control.len());
        for m in control.members() {
            if let Some(p) = self.queues.get_mut(m).and_then(VecDeque::pop_front) {
                out.push((*m, p));
                self.touched(*m);
            }
        }
        out
    }

    /// Drops a queued copy of `id`, e.g. after a late acknowledgment.
    pub fn remove(&mut self, id: PacketId) -> Option<QueuedPacket> {
        if let Some(pos) = self.direct.iter().position(|p| p.packet.id == id) {
            return self.direct.remove(pos);
        }
        let key = self.queues.iter().find(|(_, q)| q.iter().any(|p| p.packet.id == id)).map(|(k, _)| *k)?;
        let q = self.queues.get_mut(&key).expect("key was just found");
        let pos = q.iter().position(|p| p.packet.id == id).expect("packet was just found");
        let p = q.remove(pos);
        self.touched(key);
        p
    }

    /// Ids of every queued packet of `flow`, direct sends included.
    pub fn queued_ids(&self, flow: FlowId) -> Vec<PacketId> {
        self.direct
            .iter()
            .chain(self.queues.iter().filter(|(k, _)| k.flow == flow).flat_map(|(_, q)| q))
            .filter(|p| p.packet.flow_id == flow)
            .map(|p| p.packet.id)
            .collect()
    }

    pub fn contains(&self, id: PacketId) -> bool {
        self.direct.iter().chain(self.queues.values().flatten()).any(|p| p.packet.id == id)
    }
}
