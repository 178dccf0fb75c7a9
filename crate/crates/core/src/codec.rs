//! Packet identifiers, XOR coding and the layer-2.5 frame format.
//!
//! ```text
//! magic(2) | combination_id(4) | n_entries(1)
//!   | n_entries x [packet_id(4) | next_hop(4) | orig_len(2)]
//!   | n_acks(1)
//!   | n_acks x [combination_id(4) | reporter(4) | n_status(1)
//!               | n_status x [packet_id(4) | status(1)]]
//!   | payload
//! ```
//!
//! All integers are big-endian. Data frames carry magic [`DATA_MAGIC`] and at
//! least one entry; acknowledgment-only frames carry [`ACK_MAGIC`], no entries
//! and no payload. Status 1 means decoded, 0 means a key was missing.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{FlowId, NodeId};

pub const DATA_MAGIC: u16 = 0x4E43;
pub const ACK_MAGIC: u16 = 0x4E41;
pub const DEFAULT_MTU: usize = 1500;

const ENTRY_LEN: usize = 10;
const STATUS_LEN: usize = 5;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("nothing to encode")]
    Empty,
    #[error("packet {0} appears twice in one combination")]
    DuplicatePacket(PacketId),
    #[error("payload of {0} bytes does not fit the 16-bit length field")]
    PayloadTooLarge(usize),
    #[error("packet {0} is not part of the combination")]
    NotInCombination(PacketId),
    #[error("missing keys for {0:?}")]
    MissingKey(Vec<PacketId>),
    #[error("malformed frame: {0}")]
    MalformedFrame(&'static str),
    #[error("too many {0} for one frame")]
    TooMany(&'static str),
}

/// sdbm: `h = c + (h << 6) + (h << 16) - h` over the bytes, modulo 2^32.
pub fn sdbm_hash(bytes: &[u8]) -> u32 {
    bytes.iter().fold(0u32, |h, &c| {
        (c as u32).wrapping_add(h << 6).wrapping_add(h << 16).wrapping_sub(h)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PacketId(pub u32);

impl fmt::Display for PacketId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:08x}", self.0)
    }
}

/// Network-wide identifier of a native packet: sdbm over
/// `src_ip || seq || offset`, big-endian.
pub fn packet_id(src_ip: u32, seq: u32, offset: u16) -> PacketId {
    let mut buf = [0u8; 10];
    buf[..4].copy_from_slice(&src_ip.to_be_bytes());
    buf[4..8].copy_from_slice(&seq.to_be_bytes());
    buf[8..].copy_from_slice(&offset.to_be_bytes());
    PacketId(sdbm_hash(&buf))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NativePacket {
    pub id: PacketId,
    pub flow_id: FlowId,
    pub src_ip: u32,
    pub seq: u32,
    pub offset: u16,
    pub payload: Vec<u8>,
}

impl NativePacket {
    pub fn new(flow_id: FlowId, src_ip: u32, seq: u32, offset: u16, payload: Vec<u8>) -> Self {
        Self { id: packet_id(src_ip, seq, offset), flow_id, src_ip, seq, offset, payload }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Entry {
    pub packet_id: PacketId,
    pub next_hop: NodeId,
    pub orig_len: u16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AckStatus {
    Decoded,
    KeyMissing,
}

/// One receiver's report on one encoded combination.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AckRecord {
    pub combination_id: u32,
    pub reporter: NodeId,
    pub statuses: Vec<(PacketId, AckStatus)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedPacket {
    pub combination_id: u32,
    pub entries: Vec<Entry>,
    pub payload: Vec<u8>,
    pub piggyback: Vec<AckRecord>,
}

impl EncodedPacket {
    pub fn entry(&self, id: PacketId) -> Option<&Entry> {
        self.entries.iter().find(|e| e.packet_id == id)
    }

    pub fn is_native(&self) -> bool {
        self.entries.len() == 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Frame {
    Data(EncodedPacket),
    Ack(Vec<AckRecord>),
}

/// sdbm over the concatenated big-endian member ids.
pub fn combination_id(ids: &[PacketId]) -> u32 {
    let bytes: Vec<u8> = ids.iter().flat_map(|id| id.0.to_be_bytes()).collect();
    sdbm_hash(&bytes)
}

/// XORs the member payloads, zero-padding to the longest one. Entries keep the
/// input order.
pub fn xor_encode(members: &[(&NativePacket, NodeId)]) -> Result<EncodedPacket, CodecError> {
    if members.is_empty() {
        return Err(CodecError::Empty);
    }
    let mut seen = HashSet::new();
    let mut entries = Vec::with_capacity(members.len());
    let max_len = members.iter().map(|(p, _)| p.payload.len()).max().unwrap_or(0);
    let mut payload = vec![0u8; max_len];
    for (packet, next_hop) in members {
        if !seen.insert(packet.id) {
            return Err(CodecError::DuplicatePacket(packet.id));
        }
        let orig_len =
            u16::try_from(packet.payload.len()).map_err(|_| CodecError::PayloadTooLarge(packet.payload.len()))?;
        xor_into(&mut payload, &packet.payload);
        entries.push(Entry { packet_id: packet.id, next_hop: *next_hop, orig_len });
    }
    let ids: Vec<PacketId> = entries.iter().map(|e| e.packet_id).collect();
    Ok(EncodedPacket { combination_id: combination_id(&ids), entries, payload, piggyback: Vec::new() })
}

fn xor_into(acc: &mut [u8], other: &[u8]) {
    for (a, b) in acc.iter_mut().zip(other) {
        *a ^= b;
    }
}

/// Recovers `target`'s payload, asking `key` for every other member.
pub fn xor_decode_with<'k>(
    encoded: &EncodedPacket,
    mut key: impl FnMut(PacketId) -> Option<&'k [u8]>,
    target: PacketId,
) -> Result<Vec<u8>, CodecError> {
    let entry = encoded.entry(target).ok_or(CodecError::NotInCombination(target))?;
    let mut out = encoded.payload.clone();
    let mut missing = Vec::new();
    for e in encoded.entries.iter().filter(|e| e.packet_id != target) {
        match key(e.packet_id) {
            Some(k) => xor_into(&mut out, k),
            None => missing.push(e.packet_id),
        }
    }
    if !missing.is_empty() {
        return Err(CodecError::MissingKey(missing));
    }
    out.truncate(entry.orig_len as usize);
    Ok(out)
}

pub fn xor_decode(encoded: &EncodedPacket, keys: &[NativePacket], target: PacketId) -> Result<Vec<u8>, CodecError> {
    xor_decode_with(encoded, |id| keys.iter().find(|k| k.id == id).map(|k| k.payload.as_slice()), target)
}

fn put_acks(out: &mut Vec<u8>, acks: &[AckRecord]) -> Result<(), CodecError> {
    out.push(u8::try_from(acks.len()).map_err(|_| CodecError::TooMany("ack records"))?);
    for rec in acks {
        out.extend_from_slice(&rec.combination_id.to_be_bytes());
        out.extend_from_slice(&rec.reporter.0.to_be_bytes());
        out.push(u8::try_from(rec.statuses.len()).map_err(|_| CodecError::TooMany("ack statuses"))?);
        for (id, status) in &rec.statuses {
            out.extend_from_slice(&id.0.to_be_bytes());
            out.push(match status {
                AckStatus::Decoded => 1,
                AckStatus::KeyMissing => 0,
            });
        }
    }
    Ok(())
}

/// Encoded size of `acks` when carried in a frame, excluding the count byte.
pub fn ack_block_len(acks: &[AckRecord]) -> usize {
    acks.iter().map(|r| 9 + STATUS_LEN * r.statuses.len()).sum()
}

pub fn serialize_frame(frame: &Frame) -> Result<Vec<u8>, CodecError> {
    let mut out = Vec::new();
    match frame {
        Frame::Data(enc) => {
            if enc.entries.is_empty() {
                return Err(CodecError::Empty);
            }
            out.reserve(8 + ENTRY_LEN * enc.entries.len() + ack_block_len(&enc.piggyback) + enc.payload.len());
            out.extend_from_slice(&DATA_MAGIC.to_be_bytes());
            out.extend_from_slice(&enc.combination_id.to_be_bytes());
            out.push(u8::try_from(enc.entries.len()).map_err(|_| CodecError::TooMany("entries"))?);
            for e in &enc.entries {
                out.extend_from_slice(&e.packet_id.0.to_be_bytes());
                out.extend_from_slice(&e.next_hop.0.to_be_bytes());
                out.extend_from_slice(&e.orig_len.to_be_bytes());
            }
            put_acks(&mut out, &enc.piggyback)?;
            out.extend_from_slice(&enc.payload);
        }
        Frame::Ack(acks) => {
            out.extend_from_slice(&ACK_MAGIC.to_be_bytes());
            out.extend_from_slice(&0u32.to_be_bytes());
            out.push(0);
            put_acks(&mut out, acks)?;
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if self.buf.len() < n {
            return Err(CodecError::MalformedFrame("truncated"));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CodecError> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, CodecError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Reads the 16-bit magic without validating the rest of the frame.
pub fn peek_magic(bytes: &[u8]) -> Option<u16> {
    bytes.get(..2).map(|b| u16::from_be_bytes([b[0], b[1]]))
}

pub fn parse_frame(bytes: &[u8]) -> Result<Frame, CodecError> {
    let mut r = Reader { buf: bytes };
    let magic = r.u16()?;
    if magic != DATA_MAGIC && magic != ACK_MAGIC {
        return Err(CodecError::MalformedFrame("bad magic"));
    }
    let combination_id = r.u32()?;
    let n_entries = r.u8()? as usize;
    let mut entries = Vec::with_capacity(n_entries);
    let mut ids = HashSet::new();
    for _ in 0..n_entries {
        let packet_id = PacketId(r.u32()?);
        let next_hop = NodeId(r.u32()?);
        let orig_len = r.u16()?;
        if !ids.insert(packet_id) {
            return Err(CodecError::MalformedFrame("duplicate entry"));
        }
        entries.push(Entry { packet_id, next_hop, orig_len });
    }
    let n_acks = r.u8()? as usize;
    let mut acks = Vec::with_capacity(n_acks);
    for _ in 0..n_acks {
        let combination_id = r.u32()?;
        let reporter = NodeId(r.u32()?);
        let n_status = r.u8()? as usize;
        let mut statuses = Vec::with_capacity(n_status);
        for _ in 0..n_status {
            let id = PacketId(r.u32()?);
            let status = match r.u8()? {
                1 => AckStatus::Decoded,
                0 => AckStatus::KeyMissing,
                _ => return Err(CodecError::MalformedFrame("bad ack status")),
            };
            statuses.push((id, status));
        }
        acks.push(AckRecord { combination_id, reporter, statuses });
    }
    let payload = r.buf;
    if magic == ACK_MAGIC {
        if n_entries != 0 || !payload.is_empty() {
            return Err(CodecError::MalformedFrame("ack frame with data"));
        }
        return Ok(Frame::Ack(acks));
    }
    if n_entries == 0 {
        return Err(CodecError::MalformedFrame("data frame without entries"));
    }
    let max_len = entries.iter().map(|e| e.orig_len as usize).max().unwrap_or(0);
    if payload.len() != max_len {
        return Err(CodecError::MalformedFrame("payload length disagrees with entries"));
    }
    Ok(Frame::Data(EncodedPacket { combination_id, entries, payload: payload.to_vec(), piggyback: acks }))
}

/// Frame length in bytes without materialising it.
pub fn frame_len(frame: &Frame) -> usize {
    match frame {
        Frame::Data(enc) => 8 + ENTRY_LEN * enc.entries.len() + ack_block_len(&enc.piggyback) + enc.payload.len(),
        Frame::Ack(acks) => 8 + ack_block_len(acks),
    }
}
