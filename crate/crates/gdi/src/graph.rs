//! Logical layout level: vertex and edge holders.
//!
//! A holder is serialized as one logical byte buffer divided into sections:
//! fixed metadata header, block-address list, application ID, lightweight
//! edge array, and label/property entries followed by unused space. The
//! buffer is chunked across fixed-size blocks; the primary block always
//! holds the header, and the address list is positioned so that the ref of
//! extra block `j` is readable from blocks `0..j`, letting a reader
//! bootstrap the whole image from the primary block alone.
//!
//! Labels are stored as property entries with marker 2 whose payload is the
//! label integer ID; marker 0 is an unused (tombstoned) entry; marker 1
//! terminates the sequence; markers >= 3 name a property type.

use crate::blocks::{BlockPool, GlobalRef};
use crate::error::{GdiError, Result};
use crate::meta::{MARKER_LABEL, MARKER_LAST, MARKER_UNUSED};

pub const HEADER_LEN: usize = 56;
const LW_EDGE_LEN: usize = 13;
pub const MAX_APP_ID_LEN: usize = 256;

/// Identifies a lightweight edge by its base vertex and the slot in that
/// vertex's edge array. The same physical edge has two uids, one per
/// endpoint base.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct EdgeUid {
    pub vertex: GlobalRef,
    pub slot: u32,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum HolderKind {
    Vertex,
    Edge,
}

/// Orientation of a lightweight edge record relative to its base vertex.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum EdgeDir {
    Outgoing,
    Incoming,
    Undirected,
}

impl EdgeDir {
    fn to_bits(self) -> u8 {
        match self {
            EdgeDir::Outgoing => 0,
            EdgeDir::Incoming => 1,
            EdgeDir::Undirected => 2,
        }
    }

    fn from_bits(b: u8) -> Result<EdgeDir> {
        Ok(match b {
            0 => EdgeDir::Outgoing,
            1 => EdgeDir::Incoming,
            2 => EdgeDir::Undirected,
            _ => return Err(GdiError::InvalidArgument(format!("bad edge direction {b}"))),
        })
    }
}

/// Orientation mask for edge queries.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct EdgeMask {
    pub outgoing: bool,
    pub incoming: bool,
    pub undirected: bool,
}

impl EdgeMask {
    pub const ALL: EdgeMask = EdgeMask { outgoing: true, incoming: true, undirected: true };
    pub const OUT: EdgeMask = EdgeMask { outgoing: true, incoming: false, undirected: false };
    pub const IN: EdgeMask = EdgeMask { outgoing: false, incoming: true, undirected: false };
    pub const UNDIRECTED: EdgeMask = EdgeMask { outgoing: false, incoming: false, undirected: true };

    pub fn matches(self, dir: EdgeDir) -> bool {
        match dir {
            EdgeDir::Outgoing => self.outgoing,
            EdgeDir::Incoming => self.incoming,
            EdgeDir::Undirected => self.undirected,
        }
    }
}

/// One record in a vertex's lightweight-edge array. An escalated record's
/// `neighbor` field holds the primary block of the heavyweight edge holder
/// instead of the far endpoint.
#[derive(Clone, Copy, PartialEq, Debug)]
pub struct LwEdge {
    pub neighbor: GlobalRef,
    pub label: u32,
    pub dir: EdgeDir,
    pub tombstone: bool,
    pub escalated: bool,
}

impl LwEdge {
    fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.neighbor.raw().to_le_bytes());
        out.extend_from_slice(&self.label.to_le_bytes());
        let mut flags = self.dir.to_bits();
        if self.tombstone {
            flags |= 4;
        }
        if self.escalated {
            flags |= 8;
        }
        out.push(flags);
    }

    fn read(buf: &[u8]) -> Result<LwEdge> {
        let neighbor = GlobalRef::from_raw(u64::from_le_bytes(buf[0..8].try_into().unwrap()));
        let label = u32::from_le_bytes(buf[8..12].try_into().unwrap());
        let flags = buf[12];
        Ok(LwEdge {
            neighbor,
            label,
            dir: EdgeDir::from_bits(flags & 3)?,
            tombstone: flags & 4 != 0,
            escalated: flags & 8 != 0,
        })
    }
}

/// One label/property entry. Tombstoned entries keep their payload length
/// so the sequence is never compacted mid-transaction.
#[derive(Clone, PartialEq, Debug)]
pub struct PropEntry {
    pub marker: u32,
    pub payload: Vec<u8>,
}

impl PropEntry {
    pub fn label(int_id: u32) -> PropEntry {
        PropEntry { marker: MARKER_LABEL, payload: int_id.to_le_bytes().to_vec() }
    }

    pub fn label_id(&self) -> Option<u32> {
        if self.marker == MARKER_LABEL && self.payload.len() == 4 {
            Some(u32::from_le_bytes(self.payload[..].try_into().unwrap()))
        } else {
            None
        }
    }
}

/// Parsed holder image: every section of the serialized form.
#[derive(Clone, PartialEq, Debug)]
pub struct HolderImage {
    pub kind: HolderKind,
    pub app_id_hash: u64,
    pub app_id: Vec<u8>,
    pub extra_blocks: Vec<GlobalRef>,
    pub edges: Vec<LwEdge>,
    pub entries: Vec<PropEntry>,
    /// Block holding the application-ID spill record used by the internal
    /// index, or NULL before the vertex is first indexed.
    pub spill: GlobalRef,
    // Edge holders only.
    pub origin: GlobalRef,
    pub target: GlobalRef,
    pub undirected: bool,
}

impl HolderImage {
    pub fn new_vertex(app_id: &[u8]) -> HolderImage {
        HolderImage {
            kind: HolderKind::Vertex,
            app_id_hash: crate::dht::hash_bytes(0, app_id),
            app_id: app_id.to_vec(),
            extra_blocks: Vec::new(),
            edges: Vec::new(),
            entries: Vec::new(),
            spill: GlobalRef::NULL,
            origin: GlobalRef::NULL,
            target: GlobalRef::NULL,
            undirected: false,
        }
    }

    pub fn new_edge(origin: GlobalRef, target: GlobalRef, undirected: bool) -> HolderImage {
        HolderImage {
            kind: HolderKind::Edge,
            app_id_hash: 0,
            app_id: Vec::new(),
            extra_blocks: Vec::new(),
            edges: Vec::new(),
            entries: Vec::new(),
            spill: GlobalRef::NULL,
            origin,
            target,
            undirected,
        }
    }

    /// Live (non-tombstoned) label integer IDs, in entry order.
    pub fn labels(&self) -> Vec<u32> {
        self.entries.iter().filter_map(|e| e.label_id()).collect()
    }

    pub fn has_label(&self, int_id: u32) -> bool {
        self.entries.iter().any(|e| e.label_id() == Some(int_id))
    }

    pub fn add_label(&mut self, int_id: u32) -> Result<()> {
        if self.has_label(int_id) {
            return Err(GdiError::Duplicate(format!("label id {int_id} already on object")));
        }
        self.entries.push(PropEntry::label(int_id));
        Ok(())
    }

    /// Tombstone the label entry; the slot is reclaimed on compaction.
    pub fn remove_label(&mut self, int_id: u32) -> Result<()> {
        for e in &mut self.entries {
            if e.label_id() == Some(int_id) {
                e.marker = MARKER_UNUSED;
                return Ok(());
            }
        }
        Err(GdiError::NotFound(format!("label id {int_id} not on object")))
    }

    /// Payloads of live entries of one property type, in entry order.
    pub fn prop_payloads(&self, ptype_id: u32) -> Vec<&[u8]> {
        debug_assert!(ptype_id > MARKER_LABEL);
        self.entries
            .iter()
            .filter(|e| e.marker == ptype_id)
            .map(|e| e.payload.as_slice())
            .collect()
    }

    pub fn add_prop(&mut self, ptype_id: u32, payload: Vec<u8>) {
        debug_assert!(ptype_id > MARKER_LABEL);
        self.entries.push(PropEntry { marker: ptype_id, payload });
    }

    /// Tombstone every entry of a property type; returns how many.
    pub fn remove_props(&mut self, ptype_id: u32) -> usize {
        let mut n = 0;
        for e in &mut self.entries {
            if e.marker == ptype_id {
                e.marker = MARKER_UNUSED;
                n += 1;
            }
        }
        n
    }

    pub fn append_edge(&mut self, edge: LwEdge) -> u32 {
        self.edges.push(edge);
        (self.edges.len() - 1) as u32
    }

    pub fn edge(&self, slot: u32) -> Result<&LwEdge> {
        self.edges
            .get(slot as usize)
            .ok_or_else(|| GdiError::NotFound(format!("edge slot {slot} out of range")))
    }

    pub fn tombstone_edge(&mut self, slot: u32) -> Result<()> {
        let e = self
            .edges
            .get_mut(slot as usize)
            .ok_or_else(|| GdiError::NotFound(format!("edge slot {slot} out of range")))?;
        e.tombstone = true;
        Ok(())
    }

    /// Live edge slots matching an orientation mask.
    pub fn live_edges(&self, mask: EdgeMask) -> impl Iterator<Item = (u32, &LwEdge)> {
        self.edges
            .iter()
            .enumerate()
            .filter(move |(_, e)| !e.tombstone && mask.matches(e.dir))
            .map(|(i, e)| (i as u32, e))
    }

    /// Drop tombstoned edges and unused entries. Outstanding edge slots are
    /// invalidated, so this only runs when a write transaction first
    /// associates the holder.
    pub fn compact(&mut self) {
        self.edges.retain(|e| !e.tombstone);
        self.entries.retain(|e| e.marker != MARKER_UNUSED);
    }

    fn entries_len(&self) -> usize {
        self.entries.iter().map(|e| 8 + e.payload.len()).sum::<usize>() + 8
    }

    /// Logical image length given the current extra-block list.
    pub fn serialized_len(&self) -> usize {
        HEADER_LEN
            + 8 * self.extra_blocks.len()
            + self.app_id.len()
            + LW_EDGE_LEN * self.edges.len()
            + self.entries_len()
    }

    /// Blocks needed to store a logical image of `len` bytes.
    pub fn blocks_needed(len: usize, block_size: usize) -> usize {
        len.div_ceil(block_size).max(1)
    }

    /// Resize the extra-block list so the serialized image fits (each list
    /// entry itself adds 8 bytes to the image). Returns shrink victims for
    /// the caller to release; growth goes through `alloc`.
    pub fn fit_blocks(
        &mut self,
        block_size: usize,
        mut alloc: impl FnMut() -> Result<GlobalRef>,
    ) -> Result<Vec<GlobalRef>> {
        while Self::blocks_needed(self.serialized_len(), block_size) > 1 + self.extra_blocks.len() {
            self.extra_blocks.push(alloc()?);
        }
        let mut released = Vec::new();
        while !self.extra_blocks.is_empty()
            && Self::blocks_needed(self.serialized_len() - 8, block_size) <= self.extra_blocks.len()
        {
            released.push(self.extra_blocks.pop().unwrap());
        }
        Ok(released)
    }

    /// Serialize to the logical byte buffer.
    pub fn serialize(&self) -> Vec<u8> {
        let total = self.serialized_len();
        let mut out = Vec::with_capacity(total);
        let edges_off = HEADER_LEN + 8 * self.extra_blocks.len() + self.app_id.len();
        let props_off = edges_off + LW_EDGE_LEN * self.edges.len();

        out.extend_from_slice(&self.app_id_hash.to_le_bytes());
        out.extend_from_slice(&(total as u32).to_le_bytes());
        out.extend_from_slice(&(self.extra_blocks.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.edges.len() as u32).to_le_bytes());
        out.extend_from_slice(&(edges_off as u32).to_le_bytes());
        out.extend_from_slice(&(props_off as u32).to_le_bytes());
        out.extend_from_slice(&(self.app_id.len() as u16).to_le_bytes());
        out.push(match self.kind {
            HolderKind::Vertex => 1,
            HolderKind::Edge => 2,
        });
        out.push(self.undirected as u8);
        out.extend_from_slice(&self.origin.raw().to_le_bytes());
        out.extend_from_slice(&self.target.raw().to_le_bytes());
        out.extend_from_slice(&self.spill.raw().to_le_bytes());
        debug_assert_eq!(out.len(), HEADER_LEN);

        for b in &self.extra_blocks {
            out.extend_from_slice(&b.raw().to_le_bytes());
        }
        out.extend_from_slice(&self.app_id);
        for e in &self.edges {
            e.write(&mut out);
        }
        for e in &self.entries {
            out.extend_from_slice(&e.marker.to_le_bytes());
            out.extend_from_slice(&(e.payload.len() as u32).to_le_bytes());
            out.extend_from_slice(&e.payload);
        }
        out.extend_from_slice(&MARKER_LAST.to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        debug_assert_eq!(out.len(), total);
        out
    }

    /// Parse a logical byte buffer back into an image.
    pub fn parse(buf: &[u8]) -> Result<HolderImage> {
        let bad = |what: &str| GdiError::InvalidArgument(format!("corrupt holder image: {what}"));
        if buf.len() < HEADER_LEN {
            return Err(bad("short header"));
        }
        let u32_at = |off: usize| u32::from_le_bytes(buf[off..off + 4].try_into().unwrap());
        let u64_at = |off: usize| u64::from_le_bytes(buf[off..off + 8].try_into().unwrap());

        let total = u32_at(8) as usize;
        if total > buf.len() {
            return Err(bad("truncated buffer"));
        }
        let n_extra = u32_at(12) as usize;
        let n_edges = u32_at(16) as usize;
        let edges_off = u32_at(20) as usize;
        let props_off = u32_at(24) as usize;
        let app_id_len = u16::from_le_bytes(buf[28..30].try_into().unwrap()) as usize;
        let kind = match buf[30] {
            1 => HolderKind::Vertex,
            2 => HolderKind::Edge,
            k => return Err(bad(&format!("kind byte {k}"))),
        };
        let undirected = buf[31] != 0;

        let list_end = HEADER_LEN + 8 * n_extra;
        if list_end + app_id_len != edges_off
            || edges_off + LW_EDGE_LEN * n_edges != props_off
            || props_off > total
        {
            return Err(bad("inconsistent section offsets"));
        }

        let mut extra_blocks = Vec::with_capacity(n_extra);
        for j in 0..n_extra {
            extra_blocks.push(GlobalRef::from_raw(u64_at(HEADER_LEN + 8 * j)));
        }
        let app_id = buf[list_end..list_end + app_id_len].to_vec();
        let mut edges = Vec::with_capacity(n_edges);
        for j in 0..n_edges {
            edges.push(LwEdge::read(&buf[edges_off + j * LW_EDGE_LEN..])?);
        }

        let mut entries = Vec::new();
        let mut pos = props_off;
        loop {
            if pos + 8 > total {
                return Err(bad("entry sequence missing terminator"));
            }
            let marker = u32_at(pos);
            let len = u32_at(pos + 4) as usize;
            pos += 8;
            if marker == MARKER_LAST {
                break;
            }
            if pos + len > total {
                return Err(bad("entry payload past end"));
            }
            entries.push(PropEntry { marker, payload: buf[pos..pos + len].to_vec() });
            pos += len;
        }

        Ok(HolderImage {
            kind,
            app_id_hash: u64_at(0),
            app_id,
            extra_blocks,
            edges,
            entries,
            spill: GlobalRef::from_raw(u64_at(48)),
            origin: GlobalRef::from_raw(u64_at(32)),
            target: GlobalRef::from_raw(u64_at(40)),
            undirected,
        })
    }
}

/// Number of extra blocks recorded in a serialized header.
pub fn peek_extra_blocks(primary_bytes: &[u8]) -> Result<(usize, usize)> {
    if primary_bytes.len() < HEADER_LEN {
        return Err(GdiError::InvalidArgument("corrupt holder image: short header".into()));
    }
    let total = u32::from_le_bytes(primary_bytes[8..12].try_into().unwrap()) as usize;
    let n_extra = u32::from_le_bytes(primary_bytes[12..16].try_into().unwrap()) as usize;
    Ok((total, n_extra))
}

/// Fetch a holder's full logical buffer starting from its primary block.
/// The block-address list is positioned so every needed ref is available
/// before its block is fetched.
pub fn fetch_logical(pool: &BlockPool, primary: GlobalRef) -> Result<Vec<u8>> {
    let bs = pool.block_size();
    let mut buf = vec![0u8; bs];
    pool.read_block(primary, 0, &mut buf)?;
    let (total, n_extra) = peek_extra_blocks(&buf)?;
    if total <= bs {
        buf.truncate(total);
        return Ok(buf);
    }
    buf.resize(total, 0);
    for j in 0..n_extra {
        let ref_off = HEADER_LEN + 8 * j;
        let r = GlobalRef::from_raw(u64::from_le_bytes(buf[ref_off..ref_off + 8].try_into().unwrap()));
        let start = bs * (j + 1);
        if start >= total {
            break;
        }
        let len = bs.min(total - start);
        let (head, tail) = buf.split_at_mut(start);
        let _ = head;
        pool.read_block(r, 0, &mut tail[..len])?;
    }
    Ok(buf)
}

/// Write a logical buffer across `primary` and the image's extra blocks.
/// The caller flushes the touched ranks afterwards.
pub fn write_logical(
    pool: &BlockPool,
    primary: GlobalRef,
    extra: &[GlobalRef],
    buf: &[u8],
) -> Result<()> {
    let bs = pool.block_size();
    debug_assert!(buf.len() <= bs * (1 + extra.len()));
    pool.write_block(primary, 0, &buf[..bs.min(buf.len())])?;
    for (j, r) in extra.iter().enumerate() {
        let start = bs * (j + 1);
        if start >= buf.len() {
            break;
        }
        let len = bs.min(buf.len() - start);
        pool.write_block(*r, 0, &buf[start..start + len])?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rma::{Comm, RankId, RmaOptions};
    use proptest::prelude::*;

    fn sample_image() -> HolderImage {
        let mut img = HolderImage::new_vertex(b"app-17");
        img.add_label(3).unwrap();
        img.add_label(4).unwrap();
        img.remove_label(3).unwrap();
        img.add_prop(7, vec![1, 2, 3, 4, 5, 6, 7, 8]);
        img.add_prop(8, b"hello".to_vec());
        img.append_edge(LwEdge {
            neighbor: GlobalRef::new(RankId(1), 512),
            label: 5,
            dir: EdgeDir::Outgoing,
            tombstone: false,
            escalated: false,
        });
        img.append_edge(LwEdge {
            neighbor: GlobalRef::new(RankId(0), 1024),
            label: 0,
            dir: EdgeDir::Undirected,
            tombstone: true,
            escalated: false,
        });
        img
    }

    #[test]
    fn image_roundtrip_preserves_all_sections() {
        let img = sample_image();
        let bytes = img.serialize();
        assert_eq!(bytes.len(), img.serialized_len());
        let back = HolderImage::parse(&bytes).unwrap();
        assert_eq!(back, img);
        // Tombstones survive the round trip.
        assert!(back.edges[1].tombstone);
        assert_eq!(back.labels(), vec![4]);
    }

    #[test]
    fn label_and_prop_entry_ops() {
        let mut img = HolderImage::new_vertex(b"x");
        img.add_label(3).unwrap();
        assert!(matches!(img.add_label(3), Err(GdiError::Duplicate(_))));
        assert!(matches!(img.remove_label(9), Err(GdiError::NotFound(_))));
        img.add_prop(7, vec![1]);
        img.add_prop(7, vec![2]);
        assert_eq!(img.prop_payloads(7).len(), 2);
        assert_eq!(img.remove_props(7), 2);
        assert!(img.prop_payloads(7).is_empty());
        // Unused entries remain until compaction.
        assert_eq!(img.entries.len(), 3);
        img.compact();
        assert_eq!(img.entries.len(), 1);
    }

    #[test]
    fn edge_mask_filters() {
        let img = sample_image();
        assert_eq!(img.live_edges(EdgeMask::ALL).count(), 1);
        assert_eq!(img.live_edges(EdgeMask::OUT).count(), 1);
        assert_eq!(img.live_edges(EdgeMask::IN).count(), 0);
        assert_eq!(img.live_edges(EdgeMask::UNDIRECTED).count(), 0);
    }

    #[test]
    fn parse_rejects_missing_terminator() {
        let img = sample_image();
        let mut bytes = img.serialize();
        let n = bytes.len();
        // Overwrite the terminator marker with a bogus entry header.
        bytes[n - 8..n - 4].copy_from_slice(&9u32.to_le_bytes());
        bytes[n - 4..].copy_from_slice(&1000u32.to_le_bytes());
        assert!(HolderImage::parse(&bytes).is_err());
    }

    #[test]
    fn multiblock_image_roundtrips_through_pool() {
        let comm = Comm::split(1, RmaOptions::default()).pop().unwrap();
        let pool = BlockPool::create(&comm, 64, 64).unwrap();
        let me = RankId(0);
        let primary = pool.acquire_block(me).unwrap();

        let mut img = HolderImage::new_vertex(b"big-vertex");
        for i in 0..40u32 {
            img.append_edge(LwEdge {
                neighbor: GlobalRef::new(me, (i as u64 % 4) * 64),
                label: 3 + (i % 5),
                dir: if i % 2 == 0 { EdgeDir::Outgoing } else { EdgeDir::Incoming },
                tombstone: i % 7 == 0,
                escalated: false,
            });
        }
        img.add_prop(9, vec![0xab; 100]);
        let released = img
            .fit_blocks(pool.block_size(), || {
                let r = pool.acquire_block(me)?;
                if r.is_null() {
                    return Err(GdiError::ResourceExhausted("pool".into()));
                }
                Ok(r)
            })
            .unwrap();
        assert!(released.is_empty());
        assert!(!img.extra_blocks.is_empty());

        let bytes = img.serialize();
        write_logical(&pool, primary, &img.extra_blocks, &bytes).unwrap();
        pool.flush_data(me).unwrap();
        let back = HolderImage::parse(&fetch_logical(&pool, primary).unwrap()).unwrap();
        assert_eq!(back, img);

        // Shrinking after clearing the edges releases blocks.
        let mut small = back;
        small.edges.clear();
        small.entries.clear();
        let released = small.fit_blocks(pool.block_size(), || unreachable!("no growth")).unwrap();
        assert!(!released.is_empty());
        for r in released {
            pool.release_block(r).unwrap();
        }
    }

    proptest! {
        #[test]
        fn image_roundtrip_random(
            app_id in proptest::collection::vec(any::<u8>(), 0..32),
            labels in proptest::collection::vec(3u32..20, 0..6),
            payloads in proptest::collection::vec(proptest::collection::vec(any::<u8>(), 0..40), 0..8),
            edges in proptest::collection::vec((any::<u16>(), 0u64..1 << 20, 0u8..3, any::<bool>()), 0..20),
        ) {
            let mut img = HolderImage::new_vertex(&app_id);
            let mut expect_labels = Vec::new();
            for l in labels {
                if img.add_label(l).is_ok() {
                    expect_labels.push(l);
                }
            }
            for (i, p) in payloads.into_iter().enumerate() {
                img.add_prop(20 + i as u32, p);
            }
            for (rank, off, dir, tomb) in edges {
                img.append_edge(LwEdge {
                    neighbor: GlobalRef::new(RankId(rank), off * 64),
                    label: 0,
                    dir: EdgeDir::from_bits(dir).unwrap(),
                    tombstone: tomb,
                    escalated: false,
                });
            }
            let back = HolderImage::parse(&img.serialize()).unwrap();
            prop_assert_eq!(&back, &img);
            prop_assert_eq!(back.labels(), expect_labels);
        }
    }
}
