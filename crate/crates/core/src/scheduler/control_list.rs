//! Max-weight control list: an arena doubly linked list whose head always
//! holds the largest weight, plus a per-queue index of memberships.

use std::cmp::Ordering;
use std::collections::HashMap;

use crate::model::{Control, QueueKey};

#[derive(Debug, Clone)]
struct Node {
    control: Control,
    mu: Vec<f64>,
    weight: f64,
    prev: Option<usize>,
    next: Option<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct ControlList {
    nodes: Vec<Node>,
    head: Option<usize>,
    index: HashMap<QueueKey, Vec<usize>>,
    recomputes: u64,
    full_scans: u64,
}

/// Total order used everywhere: weight descending, then smaller cardinality,
/// then lexicographic members.
pub fn rank(wa: f64, ca: &Control, wb: f64, cb: &Control) -> Ordering {
    wb.partial_cmp(&wa).unwrap_or(Ordering::Equal).then_with(|| ca.tie_order(cb))
}

fn weight_of(control: &Control, mu: &[f64], backlog: &impl Fn(QueueKey) -> usize) -> f64 {
    control.members().iter().zip(mu).map(|(m, mu)| backlog(*m) as f64 * mu).sum()
}

impl ControlList {
    /// `entries` pairs every control with the service rate of each member, in
    /// member order.
    pub fn build(entries: Vec<(Control, Vec<f64>)>, backlog: impl Fn(QueueKey) -> usize) -> Self {
        let mut list = Self::default();
        for (control, mu) in entries {
            assert_eq!(control.len(), mu.len(), "one rate per member");
            let weight = weight_of(&control, &mu, &backlog);
            list.nodes.push(Node { control, mu, weight, prev: None, next: None });
        }
        let mut order: Vec<usize> = (0..list.nodes.len()).collect();
        order.sort_by(|&a, &b| list.cmp_nodes(a, b));
        for w in order.windows(2) {
            list.nodes[w[0]].next = Some(w[1]);
            list.nodes[w[1]].prev = Some(w[0]);
        }
        list.head = order.first().copied();
        for (i, node) in list.nodes.iter().enumerate() {
            for m in node.control.members() {
                list.index.entry(*m).or_default().push(i);
            }
        }
        list
    }

    fn cmp_nodes(&self, a: usize, b: usize) -> Ordering {
        let (na, nb) = (&self.nodes[a], &self.nodes[b]);
        rank(na.weight, &na.control, nb.weight, &nb.control)
    }

    fn unlink(&mut self, i: usize) {
        let (prev, next) = (self.nodes[i].prev, self.nodes[i].next);
        match prev {
            Some(p) => self.nodes[p].next = next,
            None => self.head = next,
        }
        if let Some(n) = next {
            self.nodes[n].prev = prev;
        }
        self.nodes[i].prev = None;
        self.nodes[i].next = None;
    }

    fn push_front(&mut self, i: usize) {
        self.nodes[i].next = self.head;
        if let Some(h) = self.head {
            self.nodes[h].prev = Some(i);
        }
        self.head = Some(i);
    }

    fn promote(&mut self, i: usize) {
        if self.head != Some(i) {
            self.unlink(i);
            self.push_front(i);
        }
    }

    /// Recomputes every control containing `key` and restores the head.
    pub fn on_backlog_change(&mut self, key: QueueKey, backlog: impl Fn(QueueKey) -> usize) {
        let Some(members) = self.index.get(&key).cloned() else {
            return;
        };
        for i in members {
            let old = self.nodes[i].weight;
            let new = weight_of(&self.nodes[i].control, &self.nodes[i].mu, &backlog);
            self.nodes[i].weight = new;
            self.recomputes += 1;
            let head = self.head.expect("indexed list is non-empty");
            if head == i {
                if new < old {
                    self.full_scans += 1;
                    let best = (0..self.nodes.len()).min_by(|&a, &b| self.cmp_nodes(a, b)).expect("non-empty");
                    self.promote(best);
                }
            } else if self.cmp_nodes(i, head) == Ordering::Less {
                self.promote(i);
            }
        }
    }

    pub fn head(&self) -> Option<(&Control, f64)> {
        self.head.map(|h| (&self.nodes[h].control, self.nodes[h].weight))
    }

    /// Controls in list order, head first.
    pub fn iter(&self) -> impl Iterator<Item = (&Control, f64)> + '_ {
        let mut cur = self.head;
        std::iter::from_fn(move || {
            let i = cur?;
            cur = self.nodes[i].next;
            Some((&self.nodes[i].control, self.nodes[i].weight))
        })
    }

    pub fn weight(&self, control: &Control) -> Option<f64> {
        self.nodes.iter().find(|n| &n.control == control).map(|n| n.weight)
    }

    pub fn mu(&self, control: &Control) -> Option<&[f64]> {
        self.nodes.iter().find(|n| &n.control == control).map(|n| n.mu.as_slice())
    }

    pub fn memberships(&self, key: QueueKey) -> usize {
        self.index.get(&key).map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn recomputes(&self) -> u64 {
        self.recomputes
    }

    pub fn full_scans(&self) -> u64 {
        self.full_scans
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FlowId;
    use std::cell::RefCell;

    fn c(flows: &[u32]) -> Control {
        Control::of_flows(flows.iter().map(|f| FlowId(*f))).unwrap()
    }

    fn all_three() -> Vec<(Control, Vec<f64>)> {
        [&[1][..], &[2], &[3], &[1, 2], &[1, 3], &[2, 3], &[1, 2, 3]]
            .iter()
            .map(|f| (c(f), vec![1.0; f.len()]))
            .collect()
    }

    #[test]
    fn build_orders_by_weight_then_ties() {
        let q = [0usize, 1, 1, 0];
        let list = ControlList::build(all_three(), |k| q[k.flow.0 as usize]);
        let order: Vec<String> = list.iter().map(|(c, _)| c.to_string()).collect();
        assert_eq!(order[0], "{1u,2u}");
        assert_eq!(order[1], "{1u,2u,3u}");
        assert_eq!(list.head().unwrap().1, 2.0);
        assert_eq!(list.len(), 7);
        assert!(list.iter().all(|(_, w)| w <= 2.0));
    }

    #[test]
    fn empty_list_has_no_head() {
        let list = ControlList::build(vec![], |_| 0);
        assert!(list.head().is_none());
        assert!(list.is_empty());
    }

    #[test]
    fn dequeue_touches_only_indexed_controls() {
        let q = RefCell::new([0usize, 3, 3, 3]);
        let mut list = ControlList::build(all_three(), |k| q.borrow()[k.flow.0 as usize]);
        assert_eq!(list.memberships(QueueKey::unknown(FlowId(1))), 4);
        q.borrow_mut()[3] = 2;
        list.on_backlog_change(QueueKey::unknown(FlowId(3)), |k| q.borrow()[k.flow.0 as usize]);
        // {3},{1,3},{2,3},{1,2,3}
        assert_eq!(list.recomputes(), 4);
    }

    #[test]
    fn head_drop_promotes_runner_up() {
        let entries = vec![(c(&[1]), vec![10.0]), (c(&[2]), vec![5.0])];
        let q = RefCell::new([0usize, 10, 15]);
        let mut list = ControlList::build(entries, |k| q.borrow()[k.flow.0 as usize]);
        assert_eq!(list.head().unwrap().0, &c(&[1]));
        q.borrow_mut()[1] = 1;
        list.on_backlog_change(QueueKey::unknown(FlowId(1)), |k| q.borrow()[k.flow.0 as usize]);
        assert_eq!(list.head().unwrap(), (&c(&[2]), 75.0));
        assert_eq!(list.full_scans(), 1);
    }
}
