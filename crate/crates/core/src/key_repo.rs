//! Bounded FIFO store of native packets, indexed by packet id.

use std::collections::{HashMap, VecDeque};

use crate::codec::{NativePacket, PacketId};

pub const DEFAULT_CAPACITY: usize = 512;

/// How a packet came to be stored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyTag {
    Own,
    Overheard,
}

#[derive(Debug, Clone)]
pub struct KeyRepository {
    capacity: usize,
    fifo: VecDeque<PacketId>,
    index: HashMap<PacketId, (NativePacket, KeyTag)>,
    evictions: u64,
    stores: u64,
}

impl Default for KeyRepository {
    fn default() -> Self {
        Self::new(DEFAULT_CAPACITY)
    }
}

impl KeyRepository {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "key repository capacity must be positive");
        Self { capacity, fifo: VecDeque::with_capacity(capacity), index: HashMap::with_capacity(capacity), evictions: 0, stores: 0 }
    }

    /// Stores `packet`, evicting the oldest entry when full. Storing an id that
    /// is already present refreshes its contents in place.
    pub fn store(&mut self, packet: NativePacket, tag: KeyTag) -> Option<PacketId> {
        self.stores += 1;
        if let Some(slot) = self.index.get_mut(&packet.id) {
            let tag = if slot.1 == KeyTag::Own { KeyTag::Own } else { tag };
            *slot = (packet, tag);
            return None;
        }
        let evicted = if self.fifo.len() == self.capacity {
            let old = self.fifo.pop_front().expect("full repository has an oldest entry");
            self.index.remove(&old);
            self.evictions += 1;
            Some(old)
        } else {
            None
        };
        self.fifo.push_back(packet.id);
        self.index.insert(packet.id, (packet, tag));
        evicted
    }

    pub fn lookup(&self, id: PacketId) -> Option<&NativePacket> {
        self.index.get(&id).map(|(p, _)| p)
    }

    pub fn tag(&self, id: PacketId) -> Option<KeyTag> {
        self.index.get(&id).map(|(_, t)| *t)
    }

    pub fn contains(&self, id: PacketId) -> bool {
        self.index.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.fifo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fifo.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn evictions(&self) -> u64 {
        self.evictions
    }

    pub fn stores(&self) -> u64 {
        self.stores
    }

    /// Ids from oldest to newest.
    pub fn ids(&self) -> impl Iterator<Item = PacketId> + '_ {
        self.fifo.iter().copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FlowId;

    fn p(seq: u32) -> NativePacket {
        NativePacket::new(FlowId(1), 0x0a00_0002, seq, 0, vec![seq as u8])
    }

    #[test]
    fn oldest_is_evicted() {
        let mut repo = KeyRepository::new(2);
        assert_eq!(repo.store(p(1), KeyTag::Own), None);
        assert_eq!(repo.store(p(2), KeyTag::Own), None);
        assert_eq!(repo.store(p(3), KeyTag::Own), Some(p(1).id));
        assert!(repo.lookup(p(1).id).is_none());
        assert_eq!(repo.lookup(p(3).id), Some(&p(3)));
    }

    #[test]
    fn restore_refreshes_in_place() {
        let mut repo = KeyRepository::new(2);
        repo.store(p(1), KeyTag::Overheard);
        let mut newer = p(1);
        newer.payload = vec![42];
        assert_eq!(repo.store(newer.clone(), KeyTag::Overheard), None);
        assert_eq!(repo.len(), 1);
        assert_eq!(repo.lookup(newer.id).unwrap().payload, vec![42]);
        repo.store(p(2), KeyTag::Own);
        // p1 keeps its original slot and is still the oldest
        assert_eq!(repo.store(p(3), KeyTag::Own), Some(p(1).id));
    }

    #[test]
    fn default_capacity_eviction_count() {
        let mut repo = KeyRepository::default();
        let evicted: Vec<PacketId> = (1..=600).filter_map(|s| repo.store(p(s), KeyTag::Own)).collect();
        assert_eq!(evicted.len(), 88);
        let expected: Vec<PacketId> = (1..=88).map(|s| p(s).id).collect();
        assert_eq!(evicted, expected);
        assert_eq!(repo.len(), 512);
    }
}
