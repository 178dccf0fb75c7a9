//! Expected acknowledgment tokens at the relay and pending ACK records at the
//! receivers.

use std::collections::{HashMap, HashSet, VecDeque};

use crate::codec::{AckRecord, AckStatus, EncodedPacket, PacketId};
use crate::link_state::SimTime;
use crate::model::NodeId;
use crate::scheduler::{classify_failures, Classification, EntryOutcome};

pub const DEFAULT_RETRY_CAP: u32 = 5;
pub const DEFAULT_PIGGYBACK_CAP: usize = 8;
pub const DEFAULT_FLUSH_US: SimTime = 20_000;
pub const MAX_ACK_RECORDS: usize = 255;

const RECENT_EXPIRED: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AckToken {
    pub combination_id: u32,
    pub packet_id: PacketId,
    pub destination: NodeId,
    pub issued_at: SimTime,
    pub deadline: SimTime,
    pub retries: u32,
}

#[derive(Debug, Clone)]
pub struct AckConfig {
    pub timeout: SimTime,
    pub retry_cap: u32,
    /// Classify failures from group feedback (good/bad) instead of requeueing.
    pub feedback: bool,
}

/// What to do with a packet whose delivery failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    /// Back to the head of its flow queue.
    Requeue,
    /// Known to be held by the other receivers.
    Good,
    /// Uncoded resend.
    Direct,
    Drop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Directive {
    pub packet_id: PacketId,
    pub retries: u32,
    pub action: Action,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AckEvents {
    pub resolved: Vec<PacketId>,
    pub directives: Vec<Directive>,
    /// Decoded reports for combinations that already timed out.
    pub late_decoded: Vec<PacketId>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AckCounters {
    pub issued: u64,
    pub resolved: u64,
    pub failed: u64,
    pub dropped: u64,
    pub cancelled: u64,
    pub duplicates: u64,
    pub unknown: u64,
    pub late: u64,
}

#[derive(Debug, Clone)]
struct Group {
    tokens: Vec<AckToken>,
    outcomes: Vec<EntryOutcome>,
    handled: Vec<bool>,
    deadline: SimTime,
}

#[derive(Debug, Clone)]
pub struct AckManager {
    cfg: AckConfig,
    groups: HashMap<u32, Group>,
    pending: HashMap<PacketId, u32>,
    recent: VecDeque<u32>,
    recent_set: HashSet<u32>,
    counters: AckCounters,
}

impl AckManager {
    pub fn new(cfg: AckConfig) -> Self {
        Self {
            cfg,
            groups: HashMap::new(),
            pending: HashMap::new(),
            recent: VecDeque::new(),
            recent_set: HashSet::new(),
            counters: AckCounters::default(),
        }
    }

    pub fn counters(&self) -> &AckCounters {
        &self.counters
    }

    pub fn config(&self) -> &AckConfig {
        &self.cfg
    }

    pub fn outstanding(&self) -> usize {
        self.pending.len()
    }

    pub fn pending_ids(&self) -> impl Iterator<Item = PacketId> + '_ {
        self.pending.keys().copied()
    }

    pub fn is_pending(&self, id: PacketId) -> bool {
        self.pending.contains_key(&id)
    }

    pub fn next_deadline(&self) -> Option<SimTime> {
        self.groups.values().map(|g| g.deadline).min()
    }

    fn cancel(&mut self, id: PacketId) {
        let Some(comb) = self.pending.remove(&id) else { return };
        let group = self.groups.get_mut(&comb).expect("pending token has a group");
        if let Some(i) = group.tokens.iter().position(|t| t.packet_id == id) {
            if !group.handled[i] {
                group.handled[i] = true;
                self.counters.cancelled += 1;
            }
        }
        if group.handled.iter().all(|h| *h) {
            self.groups.remove(&comb);
        }
    }

    /// One token per entry. `retries[i]` is how often entry `i` was sent before.
    pub fn issue_tokens(&mut self, encoded: &EncodedPacket, retries: &[u32], now: SimTime) -> Vec<AckToken> {
        self.issue_tokens_with(encoded, retries, now, self.cfg.timeout)
    }

    /// As [`Self::issue_tokens`] with an explicit timeout for this group.
    pub fn issue_tokens_with(
        &mut self,
        encoded: &EncodedPacket,
        retries: &[u32],
        now: SimTime,
        timeout: SimTime,
    ) -> Vec<AckToken> {
        assert_eq!(retries.len(), encoded.entries.len(), "one retry count per entry");
        for e in &encoded.entries {
            self.cancel(e.packet_id);
        }
        if let Some(stale) = self.groups.remove(&encoded.combination_id) {
            for (t, h) in stale.tokens.iter().zip(&stale.handled) {
                if !h {
                    self.pending.remove(&t.packet_id);
                    self.counters.cancelled += 1;
                }
            }
        }
        let deadline = now + timeout;
        let tokens: Vec<AckToken> = encoded
            .entries
            .iter()
            .zip(retries)
            .map(|(e, r)| AckToken {
                combination_id: encoded.combination_id,
                packet_id: e.packet_id,
                destination: e.next_hop,
                issued_at: now,
                deadline,
                retries: *r,
            })
            .collect();
        for t in &tokens {
            self.pending.insert(t.packet_id, t.combination_id);
        }
        self.counters.issued += tokens.len() as u64;
        let n = tokens.len();
        self.groups.insert(
            encoded.combination_id,
            Group { tokens: tokens.clone(), outcomes: vec![EntryOutcome::Unreported; n], handled: vec![false; n], deadline },
        );
        tokens
    }

    fn directive(&mut self, token: &AckToken, action: Action) -> Directive {
        let retries = token.retries + 1;
        if retries >= self.cfg.retry_cap {
            self.counters.dropped += 1;
            Directive { packet_id: token.packet_id, retries, action: Action::Drop }
        } else {
            self.counters.failed += 1;
            Directive { packet_id: token.packet_id, retries, action }
        }
    }

    fn remember_expired(&mut self, comb: u32) {
        if self.recent_set.insert(comb) {
            self.recent.push_back(comb);
            if self.recent.len() > RECENT_EXPIRED {
                let old = self.recent.pop_front().expect("non-empty");
                self.recent_set.remove(&old);
            }
        }
    }

    /// Resolves or fails tokens named by `record`. In feedback mode failures are
    /// held until every receiver of the combination has reported.
    pub fn on_ack(&mut self, record: &AckRecord, _now: SimTime) -> AckEvents {
        let mut ev = AckEvents::default();
        let comb = record.combination_id;
        let Some(mut group) = self.groups.remove(&comb) else {
            if self.recent_set.contains(&comb) {
                self.counters.late += 1;
                ev.late_decoded.extend(
                    record.statuses.iter().filter(|(_, s)| *s == AckStatus::Decoded).map(|(id, _)| *id),
                );
            } else {
                self.counters.unknown += 1;
            }
            return ev;
        };
        let mut changed = false;
        for (id, status) in &record.statuses {
            let Some(i) = group.tokens.iter().position(|t| t.packet_id == *id && t.destination == record.reporter)
            else {
                continue;
            };
            if group.outcomes[i] != EntryOutcome::Unreported {
                continue;
            }
            changed = true;
            let token = group.tokens[i];
            match status {
                AckStatus::Decoded => {
                    group.outcomes[i] = EntryOutcome::Decoded;
                    if !group.handled[i] {
                        group.handled[i] = true;
                        self.pending.remove(id);
                        self.counters.resolved += 1;
                        ev.resolved.push(*id);
                    }
                }
                AckStatus::KeyMissing => {
                    group.outcomes[i] = EntryOutcome::KeyMissing;
                    if !self.cfg.feedback && !group.handled[i] {
                        group.handled[i] = true;
                        self.pending.remove(id);
                        ev.directives.push(self.directive(&token, Action::Requeue));
                    }
                }
            }
        }
        if !changed {
            self.counters.duplicates += 1;
        }
        if group.outcomes.iter().all(|o| *o != EntryOutcome::Unreported) {
            ev.directives.extend(self.settle(group));
            self.remember_expired(comb);
        } else {
            self.groups.insert(comb, group);
        }
        ev
    }

    /// Classifies the unhandled failures of a finished group.
    fn settle(&mut self, mut group: Group) -> Vec<Directive> {
        let mut out = Vec::new();
        if self.cfg.feedback {
            let outcomes: Vec<(PacketId, EntryOutcome)> =
                group.tokens.iter().zip(&group.outcomes).map(|(t, o)| (t.packet_id, *o)).collect();
            for (id, class) in classify_failures(&outcomes) {
                let i = group.tokens.iter().position(|t| t.packet_id == id).expect("classified entry exists");
                if group.handled[i] {
                    continue;
                }
                group.handled[i] = true;
                self.pending.remove(&id);
                let action = if class == Classification::Good { Action::Good } else { Action::Direct };
                out.push(self.directive(&group.tokens[i], action));
            }
        } else {
            for i in 0..group.tokens.len() {
                if !group.handled[i] {
                    group.handled[i] = true;
                    self.pending.remove(&group.tokens[i].packet_id);
                    out.push(self.directive(&group.tokens[i], Action::Requeue));
                }
            }
        }
        out
    }

    /// Fails every token whose deadline has passed.
    pub fn on_timeout(&mut self, now: SimTime) -> Vec<Directive> {
        let mut due: Vec<u32> = self.groups.iter().filter(|(_, g)| g.deadline <= now).map(|(c, _)| *c).collect();
        due.sort_by_key(|c| (self.groups[c].deadline, self.groups[c].tokens[0].issued_at, *c));
        let mut out = Vec::new();
        for comb in due {
            let group = self.groups.remove(&comb).expect("due group exists");
            out.extend(self.settle(group));
            self.remember_expired(comb);
        }
        out
    }
}

/// Receiver-side queue of ACK records awaiting a ride to the relay.
#[derive(Debug, Clone)]
pub struct PendingAckQueue {
    records: VecDeque<AckRecord>,
    flush_deadline: Option<SimTime>,
    flush_after: SimTime,
    cap: usize,
}

impl PendingAckQueue {
    pub fn new(flush_after: SimTime, cap: usize) -> Self {
        Self { records: VecDeque::new(), flush_deadline: None, flush_after, cap }
    }

    pub fn push(&mut self, record: AckRecord, now: SimTime) {
        if self.records.is_empty() {
            self.flush_deadline = Some(now + self.flush_after);
        }
        self.records.push_back(record);
    }

    /// Returns a record that failed to reach the relay to the head of the queue.
    pub fn push_front(&mut self, record: AckRecord, now: SimTime) {
        if self.records.is_empty() {
            self.flush_deadline = Some(now);
        }
        self.records.push_front(record);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn flush_deadline(&self) -> Option<SimTime> {
        self.flush_deadline
    }

    pub fn flush_due(&self, now: SimTime) -> bool {
        self.flush_deadline.is_some_and(|d| d <= now)
    }

    fn drain(&mut self, n: usize, now: SimTime) -> Vec<AckRecord> {
        let n = n.min(self.records.len());
        let out: Vec<AckRecord> = self.records.drain(..n).collect();
        self.flush_deadline = if self.records.is_empty() {
            None
        } else {
            // leftovers wait at most one more flush window
            Some(self.flush_deadline.unwrap_or(now).min(now + self.flush_after))
        };
        out
    }

    /// Attaches up to `cap` records to `outgoing`; without outgoing traffic a
    /// standalone batch is returned once the flush deadline passed.
    pub fn piggyback_or_flush(&mut self, outgoing: Option<&mut EncodedPacket>, now: SimTime) -> Option<Vec<AckRecord>> {
        match outgoing {
            Some(frame) => {
                let room = self.cap.saturating_sub(frame.piggyback.len());
                let recs = self.drain(room, now);
                frame.piggyback.extend(recs);
                None
            }
            None if self.flush_due(now) && !self.records.is_empty() => Some(self.drain(MAX_ACK_RECORDS, now)),
            None => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{xor_encode, NativePacket};
    use crate::model::FlowId;

    const D1: NodeId = NodeId(3);
    const D2: NodeId = NodeId(4);

    fn manager(feedback: bool) -> AckManager {
        AckManager::new(AckConfig { timeout: 100, retry_cap: DEFAULT_RETRY_CAP, feedback })
    }

    fn pkt(flow: u32, seq: u32) -> NativePacket {
        NativePacket::new(FlowId(flow), NodeId(flow).ip(), seq, 0, vec![1, 2, 3])
    }

    fn pair() -> (NativePacket, NativePacket, EncodedPacket) {
        let (a, b) = (pkt(1, 0), pkt(2, 0));
        let enc = xor_encode(&[(&a, D1), (&b, D2)]).unwrap();
        (a, b, enc)
    }

    fn rec(enc: &EncodedPacket, reporter: NodeId, id: PacketId, s: AckStatus) -> AckRecord {
        AckRecord { combination_id: enc.combination_id, reporter, statuses: vec![(id, s)] }
    }

    fn conserved(m: &AckManager) -> bool {
        let c = m.counters();
        c.issued == c.resolved + c.failed + c.dropped + c.cancelled + m.outstanding() as u64
    }

    #[test]
    fn tokens_per_entry() {
        let mut m = manager(false);
        let (a, _, enc) = pair();
        let tokens = m.issue_tokens(&enc, &[0, 0], 10);
        assert_eq!(tokens.len(), 2);
        assert!(tokens.iter().all(|t| t.combination_id == enc.combination_id && t.deadline == 110));
        let single = xor_encode(&[(&pkt(1, 1), D1)]).unwrap();
        assert_eq!(m.issue_tokens(&single, &[0], 10).len(), 1);
        assert!(m.is_pending(a.id));
        assert_eq!(m.outstanding(), 3);
    }

    #[test]
    fn reencode_cancels_old_token() {
        let mut m = manager(false);
        let (a, _, enc) = pair();
        m.issue_tokens(&enc, &[0, 0], 0);
        let alone = xor_encode(&[(&a, D1)]).unwrap();
        m.issue_tokens(&alone, &[1], 5);
        assert_eq!(m.counters().cancelled, 1);
        assert_eq!(m.outstanding(), 2);
        assert!(conserved(&m));
        // the old group still times out for its other member only
        let d = m.on_timeout(100);
        assert_eq!(d.len(), 1);
        assert!(conserved(&m));
    }

    #[test]
    fn decoded_and_duplicate() {
        let mut m = manager(false);
        let (a, _, enc) = pair();
        m.issue_tokens(&enc, &[0, 0], 0);
        let r = rec(&enc, D1, a.id, AckStatus::Decoded);
        assert_eq!(m.on_ack(&r, 1).resolved, vec![a.id]);
        assert_eq!(m.on_ack(&r, 2), AckEvents::default());
        assert_eq!(m.counters().duplicates, 1);
        // wrong reporter is ignored
        assert!(m.on_ack(&rec(&enc, D2, a.id, AckStatus::Decoded), 3).resolved.is_empty());
    }

    #[test]
    fn unknown_combination() {
        let mut m = manager(false);
        let r = AckRecord { combination_id: 7, reporter: D1, statuses: vec![] };
        m.on_ack(&r, 0);
        assert_eq!(m.counters().unknown, 1);
    }

    #[test]
    fn key_missing_requeues_without_feedback() {
        let mut m = manager(false);
        let (_, b, enc) = pair();
        m.issue_tokens(&enc, &[0, 0], 0);
        let ev = m.on_ack(&rec(&enc, D2, b.id, AckStatus::KeyMissing), 1);
        assert_eq!(ev.directives, vec![Directive { packet_id: b.id, retries: 1, action: Action::Requeue }]);
        assert!(conserved(&m));
    }

    #[test]
    fn feedback_good_and_bad() {
        let (a, b, enc) = pair();
        let mut m = manager(true);
        m.issue_tokens(&enc, &[0, 0], 0);
        assert!(m.on_ack(&rec(&enc, D1, a.id, AckStatus::KeyMissing), 1).directives.is_empty());
        let ev = m.on_ack(&rec(&enc, D2, b.id, AckStatus::Decoded), 2);
        assert_eq!(ev.directives, vec![Directive { packet_id: a.id, retries: 1, action: Action::Good }]);

        let mut m = manager(true);
        m.issue_tokens(&enc, &[0, 0], 0);
        m.on_ack(&rec(&enc, D1, a.id, AckStatus::KeyMissing), 1);
        let ev = m.on_ack(&rec(&enc, D2, b.id, AckStatus::KeyMissing), 2);
        assert_eq!(ev.directives.len(), 2);
        assert!(ev.directives.iter().all(|d| d.action == Action::Direct));

        let mut m = manager(true);
        m.issue_tokens(&enc, &[0, 0], 0);
        m.on_ack(&rec(&enc, D1, a.id, AckStatus::Decoded), 1);
        let ev = m.on_ack(&rec(&enc, D2, b.id, AckStatus::Decoded), 1);
        assert!(ev.directives.is_empty());
        assert_eq!(m.outstanding(), 0);
    }

    #[test]
    fn unreported_partner_means_bad() {
        let (a, _, enc) = pair();
        let mut m = manager(true);
        m.issue_tokens(&enc, &[0, 0], 0);
        m.on_ack(&rec(&enc, D1, a.id, AckStatus::KeyMissing), 1);
        let d = m.on_timeout(100);
        assert_eq!(d.len(), 2);
        assert!(d.iter().all(|d| d.action == Action::Direct));
    }

    #[test]
    fn timeout_boundaries() {
        let mut m = manager(false);
        let (a, b, enc) = pair();
        m.issue_tokens(&enc, &[0, 0], 0);
        m.on_ack(&rec(&enc, D1, a.id, AckStatus::Decoded), 99);
        m.on_ack(&rec(&enc, D2, b.id, AckStatus::Decoded), 99);
        assert!(m.on_timeout(100).is_empty());
        assert_eq!(m.counters().failed, 0);
    }

    #[test]
    fn retry_cap_drops() {
        let mut m = manager(false);
        let p = pkt(1, 9);
        let enc = xor_encode(&[(&p, D1)]).unwrap();
        let mut retries = 0;
        let mut now = 0;
        let mut actions = Vec::new();
        for _ in 0..5 {
            m.issue_tokens(&enc, &[retries], now);
            now += 100;
            let d = m.on_timeout(now);
            assert_eq!(d.len(), 1);
            retries = d[0].retries;
            actions.push(d[0].action);
        }
        assert_eq!(actions[..4], [Action::Requeue; 4]);
        assert_eq!(actions[4], Action::Drop);
        assert_eq!(m.counters().dropped, 1);
        assert!(conserved(&m));
    }

    #[test]
    fn late_ack_is_reported() {
        let mut m = manager(false);
        let (a, _, enc) = pair();
        m.issue_tokens(&enc, &[0, 0], 0);
        m.on_timeout(100);
        let ev = m.on_ack(&rec(&enc, D1, a.id, AckStatus::Decoded), 150);
        assert_eq!(ev.late_decoded, vec![a.id]);
        assert_eq!(m.counters().late, 1);
    }

    fn record(n: u32) -> AckRecord {
        AckRecord { combination_id: n, reporter: D1, statuses: vec![(PacketId(n), AckStatus::Decoded)] }
    }

    #[test]
    fn piggyback_cap_and_flush() {
        let mut q = PendingAckQueue::new(DEFAULT_FLUSH_US, DEFAULT_PIGGYBACK_CAP);
        for i in 0..3 {
            q.push(record(i), 0);
        }
        let (_, _, mut enc) = pair();
        assert!(q.piggyback_or_flush(Some(&mut enc), 5).is_none());
        assert_eq!(enc.piggyback.len(), 3);
        assert!(q.is_empty());

        for i in 0..3 {
            q.push(record(i), 0);
        }
        assert!(q.piggyback_or_flush(None, DEFAULT_FLUSH_US - 1).is_none());
        assert_eq!(q.piggyback_or_flush(None, DEFAULT_FLUSH_US).unwrap().len(), 3);
        assert_eq!(q.flush_deadline(), None);

        for i in 0..12 {
            q.push(record(i), 0);
        }
        let (_, _, mut enc) = pair();
        q.piggyback_or_flush(Some(&mut enc), 1);
        assert_eq!(enc.piggyback.len(), 8);
        assert_eq!(q.len(), 4);
    }
}
