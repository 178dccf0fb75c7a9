use std::collections::{BTreeMap, HashSet, VecDeque};

use proptest::prelude::*;

use xorelay::ack::{AckConfig, AckManager};
use xorelay::codec::{
    combination_id, packet_id, parse_frame, sdbm_hash, serialize_frame, xor_decode, xor_encode, AckRecord, AckStatus,
    CodecError, Frame, NativePacket, PacketId,
};
use xorelay::key_repo::{KeyRepository, KeyTag};
use xorelay::link_state::{decode_nt, encode_nt, NeighborTable, NtEntry};
use xorelay::model::{FlowId, NodeId, RATES_MBPS};

fn native() -> impl Strategy<Value = NativePacket> {
    (1u32..8, any::<u32>(), any::<u32>(), any::<u16>(), prop::collection::vec(any::<u8>(), 0..64))
        .prop_map(|(f, ip, seq, off, payload)| NativePacket::new(FlowId(f), ip, seq, off, payload))
}

fn distinct(packets: Vec<NativePacket>) -> Vec<NativePacket> {
    let mut seen = HashSet::new();
    packets.into_iter().filter(|p| seen.insert(p.id)).collect()
}

fn data_frame() -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(native(), 1..4).prop_map(|p| {
        let p = distinct(p);
        let members: Vec<(&NativePacket, NodeId)> = p.iter().map(|x| (x, NodeId(1))).collect();
        serialize_frame(&Frame::Data(xor_encode(&members).unwrap())).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 2000, ..ProptestConfig::default() })]

    #[test]
    fn parse_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..200)) {
        let _ = parse_frame(&bytes);
        let _ = decode_nt(&bytes, 0);
    }

    #[test]
    fn truncated_frames_are_rejected(bytes in data_frame(), cut in any::<prop::sample::Index>()) {
        let n = cut.index(bytes.len());
        prop_assert!(parse_frame(&bytes[..n]).is_err());
    }

    #[test]
    fn flipped_frames_never_panic(bytes in data_frame(), at in any::<prop::sample::Index>(), bit in 0u8..8) {
        let mut b = bytes.clone();
        let i = at.index(b.len());
        b[i] ^= 1 << bit;
        let _ = parse_frame(&b);
    }

    #[test]
    fn decode_without_keys_names_them(packets in prop::collection::vec(native(), 2..5)) {
        let packets = distinct(packets);
        prop_assume!(packets.len() >= 2);
        let members: Vec<(&NativePacket, NodeId)> = packets.iter().map(|p| (p, NodeId(0))).collect();
        let enc = xor_encode(&members).unwrap();
        let missing: Vec<PacketId> = packets[1..].iter().map(|p| p.id).collect();
        prop_assert_eq!(xor_decode(&enc, &[], packets[0].id), Err(CodecError::MissingKey(missing)));
    }

    #[test]
    fn ids_are_sdbm_of_big_endian_fields(ip in any::<u32>(), seq in any::<u32>(), off in any::<u16>()) {
        let mut bytes = ip.to_be_bytes().to_vec();
        bytes.extend_from_slice(&seq.to_be_bytes());
        bytes.extend_from_slice(&off.to_be_bytes());
        prop_assert_eq!(packet_id(ip, seq, off).0, sdbm_hash(&bytes));
        // single id combination hashes the same four bytes
        let id = packet_id(ip, seq, off);
        prop_assert_eq!(combination_id(&[id]), sdbm_hash(&id.0.to_be_bytes()));
    }

    #[test]
    fn nt_round_trip(entries in prop::collection::btree_map(0u32..64, (0u16..=1000, 0usize..RATES_MBPS.len()), 0..20)) {
        let table = NeighborTable {
            entries: entries
                .iter()
                .map(|(n, (m, r))| (NodeId(*n), NtEntry { pdr: *m as f64 / 1000.0, rate: RATES_MBPS[*r], last_update: 9 }))
                .collect(),
        };
        let bytes = encode_nt(NodeId(3), &table).unwrap();
        prop_assert_eq!(decode_nt(&bytes, 9).unwrap(), (NodeId(3), table));
    }
}

#[derive(Debug, Clone)]
enum RepoOp {
    Store(u8, bool),
    Lookup(u8),
}

fn repo_op() -> impl Strategy<Value = RepoOp> {
    prop_oneof![
        (0u8..40, any::<bool>()).prop_map(|(k, own)| RepoOp::Store(k, own)),
        (0u8..40).prop_map(RepoOp::Lookup),
    ]
}

fn key_packet(k: u8, version: u32) -> NativePacket {
    NativePacket::new(FlowId(1), 7, k as u32, 0, version.to_be_bytes().to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 1000, ..ProptestConfig::default() })]

    /// The repository behaves like a FIFO-evicting map of bounded size.
    #[test]
    fn key_repo_matches_model(cap in 1usize..12, ops in prop::collection::vec(repo_op(), 1..200)) {
        let mut repo = KeyRepository::new(cap);
        let mut order: VecDeque<u8> = VecDeque::new();
        let mut model: BTreeMap<u8, (u32, KeyTag)> = BTreeMap::new();
        for (step, op) in ops.into_iter().enumerate() {
            match op {
                RepoOp::Store(k, own) => {
                    let tag = if own { KeyTag::Own } else { KeyTag::Overheard };
                    let evicted = repo.store(key_packet(k, step as u32), tag);
                    let expected = if let Some(slot) = model.get_mut(&k) {
                        let t = if slot.1 == KeyTag::Own { KeyTag::Own } else { tag };
                        *slot = (step as u32, t);
                        None
                    } else {
                        let out = if order.len() == cap {
                            let old = order.pop_front().unwrap();
                            model.remove(&old);
                            Some(key_packet(old, 0).id)
                        } else {
                            None
                        };
                        order.push_back(k);
                        model.insert(k, (step as u32, tag));
                        out
                    };
                    prop_assert_eq!(evicted, expected);
                }
                RepoOp::Lookup(k) => {
                    let id = key_packet(k, 0).id;
                    let got = repo.lookup(id).map(|p| p.payload.clone());
                    let want = model.get(&k).map(|(v, _)| v.to_be_bytes().to_vec());
                    prop_assert_eq!(got, want);
                    prop_assert_eq!(repo.tag(id), model.get(&k).map(|(_, t)| *t));
                }
            }
            prop_assert_eq!(repo.len(), model.len());
            prop_assert!(repo.len() <= cap);
        }
    }
}

#[derive(Debug, Clone)]
enum AckOp {
    Send(Vec<u8>),
    Report(u8, bool),
    Tick(u16),
}

fn ack_op() -> impl Strategy<Value = AckOp> {
    prop_oneof![
        prop::collection::btree_set(0u8..12, 1..4).prop_map(|s| AckOp::Send(s.into_iter().collect())),
        (0u8..12, any::<bool>()).prop_map(|(k, ok)| AckOp::Report(k, ok)),
        (1u16..3000).prop_map(AckOp::Tick),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 500, ..ProptestConfig::default() })]

    /// Every issued token ends resolved, failed, dropped, cancelled or outstanding.
    #[test]
    fn ack_tokens_are_conserved(feedback in any::<bool>(), ops in prop::collection::vec(ack_op(), 1..120)) {
        let mut m = AckManager::new(AckConfig { timeout: 1000, retry_cap: 5, feedback });
        let packets: Vec<NativePacket> = (0..12u32).map(|k| NativePacket::new(FlowId(k), k, 1, 0, vec![k as u8; 8])).collect();
        let mut now = 0;
        let mut last_comb: BTreeMap<u8, u32> = BTreeMap::new();
        for op in ops {
            match op {
                AckOp::Send(ks) => {
                    let members: Vec<(&NativePacket, NodeId)> =
                        ks.iter().map(|k| (&packets[*k as usize], NodeId(100 + *k as u32))).collect();
                    let enc = xor_encode(&members).unwrap();
                    m.issue_tokens(&enc, &vec![0; ks.len()], now);
                    for k in ks {
                        last_comb.insert(k, enc.combination_id);
                    }
                }
                AckOp::Report(k, ok) => {
                    let Some(comb) = last_comb.get(&k) else { continue };
                    let rec = AckRecord {
                        combination_id: *comb,
                        reporter: NodeId(100 + k as u32),
                        statuses: vec![(packets[k as usize].id, if ok { AckStatus::Decoded } else { AckStatus::KeyMissing })],
                    };
                    m.on_ack(&rec, now);
                }
                AckOp::Tick(dt) => {
                    now += dt as u64;
                    m.on_timeout(now);
                }
            }
            let c = m.counters();
            prop_assert_eq!(c.issued, c.resolved + c.failed + c.dropped + c.cancelled + m.outstanding() as u64);
            prop_assert_eq!(m.pending_ids().count(), m.outstanding());
        }
    }
}
