//! Blocked graph data layout: fixed-size block pools with lock-free
//! acquire/release and one reader-writer lock word per block.
//!
//! Three windows back a pool. The data window holds the blocks themselves.
//! The usage window is a linked list of 4-byte indices, one per block, each
//! naming the next free block. The system window holds the tagged free-list
//! head followed by the lock words.

#[cfg(debug_assertions)]
use std::collections::HashSet;
#[cfg(debug_assertions)]
use std::sync::{Arc, Mutex};

use crate::error::{GdiError, Result};
use crate::rma::{Comm, RankId, Window};

/// Sentinel index terminating a free list.
const NULL_IDX: u32 = u32::MAX;

/// 64-bit global block address: 16-bit rank in the high bits, 48-bit
/// block-aligned byte offset into the rank's data window in the low bits.
/// The all-ones value is the distinguished null reference.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GlobalRef(u64);

impl GlobalRef {
    pub const NULL: GlobalRef = GlobalRef(u64::MAX);
    const OFFSET_MASK: u64 = (1 << 48) - 1;

    pub fn new(rank: RankId, offset: u64) -> Self {
        debug_assert!(offset < (1 << 48));
        GlobalRef(((rank.0 as u64) << 48) | offset)
    }

    pub fn rank(self) -> RankId {
        RankId((self.0 >> 48) as u16)
    }

    pub fn offset(self) -> u64 {
        self.0 & Self::OFFSET_MASK
    }

    pub fn is_null(self) -> bool {
        self.0 == u64::MAX
    }

    pub fn raw(self) -> u64 {
        self.0
    }

    pub fn from_raw(raw: u64) -> Self {
        GlobalRef(raw)
    }
}

impl std::fmt::Debug for GlobalRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.is_null() {
            write!(f, "NULL_REF")
        } else {
            write!(f, "{}+{:#x}", self.rank(), self.offset())
        }
    }
}

/// Packed tagged free-list head: low 32 bits are the index of the next free
/// block (or `NULL_IDX`), high 32 bits a modification counter that advances
/// on every successful acquire or release, defeating ABA.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct FreeListHead(pub u64);

impl FreeListHead {
    pub fn new(index: u32, tag: u32) -> Self {
        FreeListHead(((tag as u64) << 32) | index as u64)
    }

    pub fn index(self) -> u32 {
        self.0 as u32
    }

    pub fn tag(self) -> u32 {
        (self.0 >> 32) as u32
    }

    fn advanced_to(self, index: u32) -> Self {
        FreeListHead::new(index, self.tag().wrapping_add(1))
    }
}

/// Packed per-block lock word: bit 63 is the write bit, bits 32..63 a 31-bit
/// read counter, bits 0..32 the incarnation. The incarnation increments
/// exactly when the vertex in the paired primary block is deleted.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct LockWord(pub u64);

impl LockWord {
    const WRITE_BIT: u64 = 1 << 63;
    const READER_ONE: u64 = 1 << 32;
    const MAX_READERS: u32 = 0x7FFF_FFFF;

    pub fn pack(write: bool, readers: u32, incarnation: u32) -> Self {
        debug_assert!(readers <= Self::MAX_READERS);
        debug_assert!(!write || readers == 0);
        let mut w = incarnation as u64 | ((readers as u64) << 32);
        if write {
            w |= Self::WRITE_BIT;
        }
        LockWord(w)
    }

    pub fn write_locked(self) -> bool {
        self.0 & Self::WRITE_BIT != 0
    }

    pub fn readers(self) -> u32 {
        ((self.0 >> 32) & 0x7FFF_FFFF) as u32
    }

    pub fn incarnation(self) -> u32 {
        self.0 as u32
    }
}

/// Lock request mode.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum LockMode {
    Read,
    Write,
}

/// Non-blocking lock acquisition outcome. `Busy` and `Stale` are normal
/// results that drive transaction aborts.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum LockOutcome {
    Acquired,
    Busy,
    Stale,
}

/// Per-rank view of the block pool. Clone one per rank; all clones address
/// the same windows.
#[derive(Clone)]
pub struct BlockPool {
    comm: Comm,
    data: Window,
    usage: Window,
    system: Window,
    block_size: usize,
    blocks_per_rank: usize,
    #[cfg(debug_assertions)]
    held: Arc<Mutex<HashSet<GlobalRef>>>,
}

impl BlockPool {
    /// Collective: create and initialize a pool with `blocks_per_rank` blocks
    /// of `block_size` bytes on every rank. Each rank seeds its own free
    /// list 0 -> 1 -> ... -> n-1.
    pub fn create(comm: &Comm, block_size: usize, blocks_per_rank: usize) -> Result<BlockPool> {
        if !block_size.is_power_of_two() || block_size < 64 {
            return Err(GdiError::InvalidArgument(format!(
                "block size must be a power of two >= 64, got {block_size}"
            )));
        }
        comm.agree(block_size as u64)?;
        comm.agree(blocks_per_rank as u64)?;
        let data = comm.win_alloc(block_size * blocks_per_rank)?;
        let usage = comm.win_alloc(4 * blocks_per_rank)?;
        let system = comm.win_alloc(8 + 8 * blocks_per_rank)?;

        let me = comm.rank();
        let mut links = Vec::with_capacity(4 * blocks_per_rank);
        for i in 0..blocks_per_rank {
            let next = if i + 1 < blocks_per_rank { (i + 1) as u32 } else { NULL_IDX };
            links.extend_from_slice(&next.to_le_bytes());
        }
        comm.put(&usage, me, 0, &links)?;
        comm.flush(&usage, me)?;
        let head = if blocks_per_rank > 0 {
            FreeListHead::new(0, 0)
        } else {
            FreeListHead::new(NULL_IDX, 0)
        };
        comm.atomic_put(&system, me, 0, head.0)?;
        comm.barrier()?;

        #[cfg(debug_assertions)]
        let held = {
            let any = comm.share(
                0x6c0c_4b00,
                (me.0 == 0).then(|| {
                    Arc::new(Mutex::new(HashSet::<GlobalRef>::new())) as Arc<dyn std::any::Any + Send + Sync>
                }),
            )?;
            any.downcast::<Mutex<HashSet<GlobalRef>>>().expect("held ledger")
        };

        Ok(BlockPool {
            comm: comm.clone(),
            data,
            usage,
            system,
            block_size,
            blocks_per_rank,
            #[cfg(debug_assertions)]
            held,
        })
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn blocks_per_rank(&self) -> usize {
        self.blocks_per_rank
    }

    pub fn capacity(&self) -> usize {
        self.blocks_per_rank * self.comm.nranks()
    }

    fn index_of(&self, r: GlobalRef) -> usize {
        debug_assert_eq!(r.offset() as usize % self.block_size, 0);
        r.offset() as usize / self.block_size
    }

    /// Try to allocate a block on `target`. Returns [`GlobalRef::NULL`] iff
    /// the target's free list is empty. Lock-free.
    pub fn acquire_block(&self, target: RankId) -> Result<GlobalRef> {
        let mut head = FreeListHead(self.comm.atomic_get(&self.system, target, 0)?);
        loop {
            if head.index() == NULL_IDX {
                return Ok(GlobalRef::NULL);
            }
            let mut next = [0u8; 4];
            self.comm.get(&self.usage, target, head.index() as usize * 4, &mut next)?;
            let next = u32::from_le_bytes(next);
            let new_head = head.advanced_to(next);
            let prior = self.comm.atomic_cas(&self.system, target, 0, head.0, new_head.0)?;
            if prior == head.0 {
                let r = GlobalRef::new(target, head.index() as u64 * self.block_size as u64);
                #[cfg(debug_assertions)]
                debug_assert!(self.held.lock().unwrap().insert(r), "block {r:?} granted twice");
                return Ok(r);
            }
            // The CAS reported the current head; restart from there.
            head = FreeListHead(prior);
        }
    }

    /// Return a block to its rank's free list (LIFO).
    pub fn release_block(&self, r: GlobalRef) -> Result<()> {
        debug_assert!(!r.is_null());
        #[cfg(debug_assertions)]
        debug_assert!(self.held.lock().unwrap().remove(&r), "double release of {r:?}");
        let target = r.rank();
        let idx = self.index_of(r) as u32;
        let mut head = FreeListHead(self.comm.atomic_get(&self.system, target, 0)?);
        loop {
            self.comm.put(&self.usage, target, idx as usize * 4, &head.index().to_le_bytes())?;
            self.comm.flush(&self.usage, target)?;
            let new_head = head.advanced_to(idx);
            let prior = self.comm.atomic_cas(&self.system, target, 0, head.0, new_head.0)?;
            if prior == head.0 {
                return Ok(());
            }
            head = FreeListHead(prior);
        }
    }

    /// Read `buf.len()` bytes from the block at in-block offset `offset`.
    pub fn read_block(&self, r: GlobalRef, offset: usize, buf: &mut [u8]) -> Result<()> {
        if offset + buf.len() > self.block_size {
            return Err(GdiError::OutOfBounds { offset, len: buf.len(), size: self.block_size });
        }
        self.comm.get(&self.data, r.rank(), r.offset() as usize + offset, buf)
    }

    /// Write `data` into the block at in-block offset `offset`. Complete
    /// after `flush_data(r.rank())`.
    pub fn write_block(&self, r: GlobalRef, offset: usize, data: &[u8]) -> Result<()> {
        if offset + data.len() > self.block_size {
            return Err(GdiError::OutOfBounds { offset, len: data.len(), size: self.block_size });
        }
        self.comm.put(&self.data, r.rank(), r.offset() as usize + offset, data)
    }

    pub fn flush_data(&self, target: RankId) -> Result<()> {
        self.comm.flush(&self.data, target)
    }

    fn lock_offset(&self, r: GlobalRef) -> usize {
        8 + self.index_of(r) * 8
    }

    /// Current lock word of a primary block.
    pub fn lock_word(&self, r: GlobalRef) -> Result<LockWord> {
        Ok(LockWord(self.comm.atomic_get(&self.system, r.rank(), self.lock_offset(r))?))
    }

    /// Try to take a read or write lock, verifying the block's incarnation.
    /// Never blocks.
    pub fn try_lock(&self, r: GlobalRef, mode: LockMode, expected_incarnation: u32) -> Result<LockOutcome> {
        let off = self.lock_offset(r);
        loop {
            let w = LockWord(self.comm.atomic_get(&self.system, r.rank(), off)?);
            if w.incarnation() != expected_incarnation {
                return Ok(LockOutcome::Stale);
            }
            let new = match mode {
                LockMode::Read => {
                    if w.write_locked() || w.readers() == LockWord::MAX_READERS {
                        return Ok(LockOutcome::Busy);
                    }
                    LockWord(w.0 + LockWord::READER_ONE)
                }
                LockMode::Write => {
                    if w.write_locked() || w.readers() > 0 {
                        return Ok(LockOutcome::Busy);
                    }
                    LockWord(w.0 | LockWord::WRITE_BIT)
                }
            };
            if self.comm.atomic_cas(&self.system, r.rank(), off, w.0, new.0)? == w.0 {
                return Ok(LockOutcome::Acquired);
            }
        }
    }

    /// Release a lock held in `mode`.
    pub fn unlock(&self, r: GlobalRef, mode: LockMode) -> Result<()> {
        let off = self.lock_offset(r);
        loop {
            let w = LockWord(self.comm.atomic_get(&self.system, r.rank(), off)?);
            let new = match mode {
                LockMode::Read => {
                    debug_assert!(w.readers() > 0, "read-unlock without a read lock on {r:?}");
                    LockWord(w.0 - LockWord::READER_ONE)
                }
                LockMode::Write => {
                    debug_assert!(w.write_locked(), "write-unlock without a write lock on {r:?}");
                    LockWord(w.0 & !LockWord::WRITE_BIT)
                }
            };
            if self.comm.atomic_cas(&self.system, r.rank(), off, w.0, new.0)? == w.0 {
                return Ok(());
            }
        }
    }

    /// Release a write lock and bump the incarnation in one step; used when
    /// committing a vertex deletion.
    pub fn unlock_write_bump_incarnation(&self, r: GlobalRef) -> Result<()> {
        let off = self.lock_offset(r);
        loop {
            let w = LockWord(self.comm.atomic_get(&self.system, r.rank(), off)?);
            debug_assert!(w.write_locked() && w.readers() == 0);
            let new = LockWord::pack(false, 0, w.incarnation().wrapping_add(1));
            if self.comm.atomic_cas(&self.system, r.rank(), off, w.0, new.0)? == w.0 {
                return Ok(());
            }
        }
    }

    /// Walk `target`'s free list and return its length. Quiescent use only;
    /// errors if a cycle is detected.
    pub fn free_count(&self, target: RankId) -> Result<usize> {
        let head = FreeListHead(self.comm.atomic_get(&self.system, target, 0)?);
        let mut idx = head.index();
        let mut count = 0usize;
        while idx != NULL_IDX {
            count += 1;
            if count > self.blocks_per_rank {
                return Err(GdiError::InvalidArgument(format!("free list of {target} is cyclic")));
            }
            let mut next = [0u8; 4];
            self.comm.get(&self.usage, target, idx as usize * 4, &mut next)?;
            idx = u32::from_le_bytes(next);
        }
        Ok(count)
    }

    /// Total free blocks across all ranks. Quiescent use only.
    pub fn total_free(&self) -> Result<usize> {
        let mut total = 0;
        for r in 0..self.comm.nranks() {
            total += self.free_count(RankId(r as u16))?;
        }
        Ok(total)
    }

    /// Scan all lock words; returns the refs of blocks whose lock word has a
    /// set write bit or non-zero read counter. Quiescent use only.
    pub fn lock_hygiene_violations(&self) -> Result<Vec<GlobalRef>> {
        let mut bad = Vec::new();
        for r in 0..self.comm.nranks() {
            let rank = RankId(r as u16);
            for i in 0..self.blocks_per_rank {
                let w = LockWord(self.comm.atomic_get(&self.system, rank, 8 + i * 8)?);
                if w.write_locked() || w.readers() > 0 {
                    bad.push(GlobalRef::new(rank, (i * self.block_size) as u64));
                }
            }
        }
        Ok(bad)
    }

    /// Raw tagged head of `target`'s free list. Test hook.
    #[doc(hidden)]
    pub fn debug_head(&self, target: RankId) -> Result<u64> {
        self.comm.atomic_get(&self.system, target, 0)
    }

    /// Raw CAS against `target`'s free-list head. Test hook for ABA
    /// regression checks; returns the prior value.
    #[doc(hidden)]
    pub fn debug_cas_head(&self, target: RankId, compare: u64, new: u64) -> Result<u64> {
        self.comm.atomic_cas(&self.system, target, 0, compare, new)
    }
}
