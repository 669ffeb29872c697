//! Fully offloaded, lock-free, chained distributed hash table.
//!
//! The table shards `n` buckets across ranks; each bucket is a 24-byte
//! record `{key, value, next}` whose `next` field heads a chain of heap
//! entries. Entries live in per-rank heaps with a bump allocator plus a
//! tagged free list. Collisions are resolved by distributed chaining:
//! inserts prepend with a single CAS, deletes unlink with two CASes. The
//! first CAS self-marks the victim's next link (its own address plus 2), the
//! second bypasses it in the predecessor; readers that encounter a marked
//! link restart.
//!
//! While an entry sits on the free list its next link stays self-marked and
//! the free list threads through the value field, so late traversers holding
//! a stale pointer still observe the mark and restart.

use crate::error::{GdiError, Result};
use crate::rma::{Comm, RankId, Window};

const ENTRY_SIZE: usize = 24;
const NULL_PTR: u64 = u64::MAX;
const NULL_IDX: u32 = u32::MAX;
/// Keys at or above this value are reserved (empty-bucket sentinel space).
pub const RESERVED_KEY: u64 = u64::MAX - 1;

const KEY_OFF: usize = 0;
const VAL_OFF: usize = 8;
const NEXT_OFF: usize = 16;

/// Restart bound; exceeding it indicates a livelock and surfaces as an
/// error instead of spinning forever.
const RESTART_BOUND: usize = 1_000_000;

/// SplitMix64 finalizer; deterministic and seedless so all ranks agree.
pub fn mix64(mut x: u64) -> u64 {
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^= x >> 31;
    x
}

/// Hash a byte sequence to a u64 key (word-folding through mix64).
pub fn hash_bytes(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = mix64(seed ^ 0x51_7c_c1_b7_27_22_0a_95);
    for chunk in bytes.chunks(8) {
        let mut w = [0u8; 8];
        w[..chunk.len()].copy_from_slice(chunk);
        h = mix64(h ^ u64::from_le_bytes(w) ^ ((chunk.len() as u64) << 56));
    }
    h
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Loc {
    Bucket { rank: RankId, off: usize },
    Entry { ptr: u64 },
}

#[derive(Clone, Copy)]
struct Entry {
    key: u64,
    value: u64,
    next: u64,
}

/// Per-rank view of one distributed hash table.
#[derive(Clone)]
pub struct DhtTable {
    comm: Comm,
    table: Window,
    heap: Window,
    ctl: Window,
    buckets_per_rank: usize,
    entries_per_rank: usize,
}

impl DhtTable {
    /// Collective: allocate a table with at least `buckets` buckets and a
    /// heap of at least `capacity` entries, both rounded up to a multiple of
    /// the rank count.
    pub fn create(comm: &Comm, buckets: usize, capacity: usize) -> Result<DhtTable> {
        comm.agree(buckets as u64)?;
        comm.agree(capacity as u64)?;
        let nranks = comm.nranks();
        let buckets_per_rank = buckets.div_ceil(nranks).max(1);
        let entries_per_rank = capacity.div_ceil(nranks).max(1);
        let table = comm.win_alloc(buckets_per_rank * ENTRY_SIZE)?;
        let heap = comm.win_alloc(entries_per_rank * ENTRY_SIZE)?;
        let ctl = comm.win_alloc(16)?;

        let me = comm.rank();
        let mut init = Vec::with_capacity(buckets_per_rank * ENTRY_SIZE);
        for _ in 0..buckets_per_rank {
            init.extend_from_slice(&RESERVED_KEY.to_le_bytes());
            init.extend_from_slice(&0u64.to_le_bytes());
            init.extend_from_slice(&NULL_PTR.to_le_bytes());
        }
        comm.put(&table, me, 0, &init)?;
        comm.flush(&table, me)?;
        comm.atomic_put(&ctl, me, 0, 0)?; // bump counter
        comm.atomic_put(&ctl, me, 8, pack_free_head(NULL_IDX, 0))?;
        comm.barrier()?;

        Ok(DhtTable { comm: comm.clone(), table, heap, ctl, buckets_per_rank, entries_per_rank })
    }

    pub fn comm(&self) -> &Comm {
        &self.comm
    }

    pub fn bucket_count(&self) -> usize {
        self.buckets_per_rank * self.comm.nranks()
    }

    pub fn capacity(&self) -> usize {
        self.entries_per_rank * self.comm.nranks()
    }

    fn bucket_loc(&self, key: u64) -> Loc {
        let b = (mix64(key) % self.bucket_count() as u64) as usize;
        Loc::Bucket {
            rank: RankId((b / self.buckets_per_rank) as u16),
            off: (b % self.buckets_per_rank) * ENTRY_SIZE,
        }
    }

    fn bucket_rank(&self, key: u64) -> RankId {
        match self.bucket_loc(key) {
            Loc::Bucket { rank, .. } => rank,
            Loc::Entry { .. } => unreachable!(),
        }
    }

    fn load_link(&self, loc: Loc) -> Result<u64> {
        match loc {
            Loc::Bucket { rank, off } => self.comm.atomic_get(&self.table, rank, off + NEXT_OFF),
            Loc::Entry { ptr } => {
                let p = crate::blocks::GlobalRef::from_raw(ptr);
                self.comm.atomic_get(&self.heap, p.rank(), p.offset() as usize + NEXT_OFF)
            }
        }
    }

    fn cas_link(&self, loc: Loc, compare: u64, new: u64) -> Result<u64> {
        match loc {
            Loc::Bucket { rank, off } => {
                self.comm.atomic_cas(&self.table, rank, off + NEXT_OFF, compare, new)
            }
            Loc::Entry { ptr } => {
                let p = crate::blocks::GlobalRef::from_raw(ptr);
                self.comm.atomic_cas(&self.heap, p.rank(), p.offset() as usize + NEXT_OFF, compare, new)
            }
        }
    }

    fn entry_word(&self, ptr: u64, field: usize) -> Result<u64> {
        let p = crate::blocks::GlobalRef::from_raw(ptr);
        self.comm.atomic_get(&self.heap, p.rank(), p.offset() as usize + field)
    }

    fn put_entry_word(&self, ptr: u64, field: usize, v: u64) -> Result<()> {
        let p = crate::blocks::GlobalRef::from_raw(ptr);
        self.comm.atomic_put(&self.heap, p.rank(), p.offset() as usize + field, v)
    }

    fn read_entry(&self, ptr: u64) -> Result<Entry> {
        Ok(Entry {
            key: self.entry_word(ptr, KEY_OFF)?,
            value: self.entry_word(ptr, VAL_OFF)?,
            next: self.entry_word(ptr, NEXT_OFF)?,
        })
    }

    fn is_marked(ptr: u64, next: u64) -> bool {
        next == ptr.wrapping_add(2)
    }

    /// Allocate a heap entry, preferring `preferred`'s heap and falling back
    /// round-robin across ranks.
    fn alloc(&self, preferred: RankId) -> Result<u64> {
        let nranks = self.comm.nranks();
        for i in 0..nranks {
            let rank = RankId(((preferred.as_usize() + i) % nranks) as u16);
            // Bump phase: hand out pristine entries first.
            loop {
                let c = self.comm.atomic_get(&self.ctl, rank, 0)?;
                if c >= self.entries_per_rank as u64 {
                    break;
                }
                if self.comm.atomic_cas(&self.ctl, rank, 0, c, c + 1)? == c {
                    return Ok(crate::blocks::GlobalRef::new(rank, c * ENTRY_SIZE as u64).raw());
                }
            }
            // Free-list pop; the list threads through the value field.
            loop {
                let head = self.comm.atomic_get(&self.ctl, rank, 8)?;
                let (idx, tag) = unpack_free_head(head);
                if idx == NULL_IDX {
                    break;
                }
                let ptr = crate::blocks::GlobalRef::new(rank, idx as u64 * ENTRY_SIZE as u64).raw();
                let next_free = self.entry_word(ptr, VAL_OFF)? as u32;
                let new_head = pack_free_head(next_free, tag.wrapping_add(1));
                if self.comm.atomic_cas(&self.ctl, rank, 8, head, new_head)? == head {
                    return Ok(ptr);
                }
            }
        }
        Err(GdiError::ResourceExhausted(format!(
            "dht heap exhausted ({} entries)",
            self.capacity()
        )))
    }

    /// Return an unlinked, still self-marked entry to its rank's free list.
    fn dealloc(&self, ptr: u64) -> Result<()> {
        debug_assert!(Self::is_marked(ptr, self.entry_word(ptr, NEXT_OFF)?));
        let p = crate::blocks::GlobalRef::from_raw(ptr);
        let rank = p.rank();
        let idx = (p.offset() as usize / ENTRY_SIZE) as u32;
        loop {
            let head = self.comm.atomic_get(&self.ctl, rank, 8)?;
            let (hidx, tag) = unpack_free_head(head);
            self.put_entry_word(ptr, VAL_OFF, hidx as u64)?;
            self.comm.flush(&self.heap, rank)?;
            let new_head = pack_free_head(idx, tag.wrapping_add(1));
            if self.comm.atomic_cas(&self.ctl, rank, 8, head, new_head)? == head {
                return Ok(());
            }
        }
    }

    /// Insert `(k, v)`. Duplicate keys are allowed; the newest entry shadows
    /// older ones for `lookup` while `lookup_all` sees every entry.
    pub fn insert(&self, k: u64, v: u64) -> Result<()> {
        if k >= RESERVED_KEY {
            return Err(GdiError::InvalidArgument(format!("key {k:#x} is reserved")));
        }
        let bucket = self.bucket_loc(k);
        let ptr = self.alloc(self.bucket_rank(k))?;
        self.put_entry_word(ptr, KEY_OFF, k)?;
        self.put_entry_word(ptr, VAL_OFF, v)?;
        let heap_rank = crate::blocks::GlobalRef::from_raw(ptr).rank();
        self.comm.flush(&self.heap, heap_rank)?;
        let mut head = self.load_link(bucket)?;
        loop {
            self.put_entry_word(ptr, NEXT_OFF, head)?;
            self.comm.flush(&self.heap, heap_rank)?;
            let prior = self.cas_link(bucket, head, ptr)?;
            if prior == head {
                return Ok(());
            }
            head = prior;
        }
    }

    /// Look up `k`; returns the value of the most recently inserted live
    /// entry with that key.
    pub fn lookup(&self, k: u64) -> Result<Option<u64>> {
        let bucket = self.bucket_loc(k);
        let mut restarts = 0usize;
        'restart: loop {
            restarts += 1;
            if restarts > RESTART_BOUND {
                return Err(GdiError::ResourceExhausted("dht lookup restart bound".into()));
            }
            let mut ptr = self.load_link(bucket)?;
            while ptr != NULL_PTR {
                let e = self.read_entry(ptr)?;
                if Self::is_marked(ptr, e.next) {
                    continue 'restart;
                }
                if e.key == k {
                    // Re-validate: the entry may have been deleted and
                    // recycled between the field reads.
                    let next2 = self.entry_word(ptr, NEXT_OFF)?;
                    if Self::is_marked(ptr, next2) {
                        continue 'restart;
                    }
                    if self.entry_word(ptr, KEY_OFF)? != k {
                        continue 'restart;
                    }
                    return Ok(Some(e.value));
                }
                ptr = e.next;
            }
            return Ok(None);
        }
    }

    /// Collect the values of every live entry with key `k`.
    pub fn lookup_all(&self, k: u64) -> Result<Vec<u64>> {
        let bucket = self.bucket_loc(k);
        let mut restarts = 0usize;
        'restart: loop {
            restarts += 1;
            if restarts > RESTART_BOUND {
                return Err(GdiError::ResourceExhausted("dht lookup restart bound".into()));
            }
            let mut found = Vec::new();
            let mut ptr = self.load_link(bucket)?;
            while ptr != NULL_PTR {
                let e = self.read_entry(ptr)?;
                if Self::is_marked(ptr, e.next) {
                    continue 'restart;
                }
                if e.key == k {
                    let next2 = self.entry_word(ptr, NEXT_OFF)?;
                    if Self::is_marked(ptr, next2) || self.entry_word(ptr, KEY_OFF)? != k {
                        continue 'restart;
                    }
                    found.push(e.value);
                }
                ptr = e.next;
            }
            return Ok(found);
        }
    }

    /// Delete the first live entry with key `k`. Returns true iff this call
    /// unlinked an entry.
    pub fn delete(&self, k: u64) -> Result<bool> {
        self.delete_matching(k, None)
    }

    /// Delete the first live entry with key `k` and value `v`.
    pub fn delete_kv(&self, k: u64, v: u64) -> Result<bool> {
        self.delete_matching(k, Some(v))
    }

    fn delete_matching(&self, k: u64, want_value: Option<u64>) -> Result<bool> {
        let bucket = self.bucket_loc(k);
        // When our victim is marked but a failed bypass left it linked, we
        // carry (victim, successor) across restarts and finish the unlink.
        let mut pending: Option<(u64, u64)> = None;
        let mut restarts = 0usize;
        'restart: loop {
            restarts += 1;
            if restarts > RESTART_BOUND {
                return Err(GdiError::ResourceExhausted("dht delete restart bound".into()));
            }
            let mut prev = bucket;
            let mut ptr = self.load_link(bucket)?;
            while ptr != NULL_PTR {
                if let Some((victim, succ)) = pending {
                    if ptr == victim {
                        if self.cas_link(prev, victim, succ)? == victim {
                            self.dealloc(victim)?;
                            return Ok(true);
                        }
                        continue 'restart;
                    }
                }
                let e = self.read_entry(ptr)?;
                if Self::is_marked(ptr, e.next) {
                    continue 'restart;
                }
                if pending.is_none() && e.key == k && want_value.is_none_or(|w| w == e.value) {
                    // First CAS: self-mark the victim's next link.
                    if self.cas_link(Loc::Entry { ptr }, e.next, ptr.wrapping_add(2))? != e.next {
                        // Lost to a concurrent delete of this entry or its
                        // successor.
                        continue 'restart;
                    }
                    // Second CAS: bypass the victim in the predecessor.
                    if self.cas_link(prev, ptr, e.next)? == ptr {
                        self.dealloc(ptr)?;
                        return Ok(true);
                    }
                    // The predecessor is being deleted; retain the original
                    // successor and finish on a later pass.
                    pending = Some((ptr, e.next));
                    continue 'restart;
                }
                prev = Loc::Entry { ptr };
                ptr = e.next;
            }
            if pending.is_some() {
                // Our marked victim is still linked somewhere; the chain
                // mutated under us, walk again.
                continue 'restart;
            }
            return Ok(false);
        }
    }

    /// Walk every bucket chain and return all `(key, value)` pairs.
    /// Quiescent use only.
    pub fn scan(&self) -> Result<Vec<(u64, u64)>> {
        Ok(self.scan_raw()?.into_iter().map(|(_, kv)| kv).collect())
    }

    fn scan_raw(&self) -> Result<Vec<(u64, (u64, u64))>> {
        let mut out = Vec::new();
        for r in 0..self.comm.nranks() {
            let rank = RankId(r as u16);
            for b in 0..self.buckets_per_rank {
                let mut ptr = self.load_link(Loc::Bucket { rank, off: b * ENTRY_SIZE })?;
                let mut steps = 0usize;
                while ptr != NULL_PTR {
                    steps += 1;
                    if steps > self.capacity() + 1 {
                        return Err(GdiError::InvalidArgument("dht chain is cyclic".into()));
                    }
                    let e = self.read_entry(ptr)?;
                    debug_assert!(!Self::is_marked(ptr, e.next), "marked entry during quiescent scan");
                    out.push((ptr, (e.key, e.value)));
                    ptr = e.next;
                }
            }
        }
        Ok(out)
    }

    /// Number of live entries. Quiescent use only.
    pub fn live_count(&self) -> Result<usize> {
        Ok(self.scan_raw()?.len())
    }

    /// Audit that no free-list entry is reachable from any bucket chain.
    /// Quiescent use only.
    pub fn audit_reuse_safety(&self) -> Result<()> {
        let reachable: std::collections::HashSet<u64> =
            self.scan_raw()?.into_iter().map(|(p, _)| p).collect();
        for r in 0..self.comm.nranks() {
            let rank = RankId(r as u16);
            let (mut idx, _) = unpack_free_head(self.comm.atomic_get(&self.ctl, rank, 8)?);
            let mut steps = 0usize;
            while idx != NULL_IDX {
                steps += 1;
                if steps > self.entries_per_rank + 1 {
                    return Err(GdiError::InvalidArgument("dht free list is cyclic".into()));
                }
                let ptr = crate::blocks::GlobalRef::new(rank, idx as u64 * ENTRY_SIZE as u64).raw();
                if reachable.contains(&ptr) {
                    return Err(GdiError::InvalidArgument(format!(
                        "free entry {ptr:#x} still reachable from a chain"
                    )));
                }
                idx = self.entry_word(ptr, VAL_OFF)? as u32;
            }
        }
        Ok(())
    }
}

fn pack_free_head(index: u32, tag: u32) -> u64 {
    ((tag as u64) << 32) | index as u64
}

fn unpack_free_head(head: u64) -> (u32, u32) {
    (head as u32, (head >> 32) as u32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rma::RmaOptions;
    use std::collections::HashMap;
    use std::sync::Arc;
    use std::thread;

    fn with_tables<T: Send + 'static>(
        nranks: usize,
        buckets: usize,
        capacity: usize,
        f: impl Fn(DhtTable) -> T + Send + Sync + 'static,
    ) -> Vec<T> {
        let comms = Comm::split(nranks, RmaOptions::default());
        let f = Arc::new(f);
        comms
            .into_iter()
            .map(|c| {
                let f = f.clone();
                thread::spawn(move || f(DhtTable::create(&c, buckets, capacity).unwrap()))
            })
            .collect::<Vec<_>>()
            .into_iter()
            .map(|h| h.join().unwrap())
            .collect()
    }

    #[test]
    fn insert_lookup_delete_basics() {
        with_tables(1, 16, 64, |t| {
            assert_eq!(t.lookup(5).unwrap(), None);
            t.insert(5, 50).unwrap();
            assert_eq!(t.lookup(5).unwrap(), Some(50));
            assert!(!t.delete(6).unwrap());
            assert!(t.delete(5).unwrap());
            assert_eq!(t.lookup(5).unwrap(), None);
            assert!(!t.delete(5).unwrap());
            t.audit_reuse_safety().unwrap();
        });
    }

    #[test]
    fn reserved_key_rejected() {
        with_tables(1, 4, 4, |t| {
            assert!(t.insert(u64::MAX, 1).is_err());
            assert!(t.insert(RESERVED_KEY, 1).is_err());
        });
    }

    #[test]
    fn colliding_keys_from_two_ranks_are_both_retrievable() {
        // Two distinct keys landing in the same bucket of an 8-bucket table.
        let n_buckets = 8usize;
        let k1 = 1u64;
        let b1 = mix64(k1) % n_buckets as u64;
        let mut k2 = 2u64;
        while mix64(k2) % n_buckets as u64 != b1 {
            k2 += 1;
        }
        let out = with_tables(2, n_buckets, 32, move |t| {
            if t.comm.rank().0 == 0 {
                t.insert(k1, 100).unwrap();
            } else {
                t.insert(k2, 200).unwrap();
            }
            t.comm.barrier().unwrap();
            (t.lookup(k1).unwrap(), t.lookup(k2).unwrap())
        });
        for (a, b) in out {
            assert_eq!(a, Some(100));
            assert_eq!(b, Some(200));
        }
    }

    #[test]
    fn duplicate_keys_and_lookup_all() {
        with_tables(1, 4, 16, |t| {
            t.insert(9, 1).unwrap();
            t.insert(9, 2).unwrap();
            t.insert(9, 3).unwrap();
            let mut all = t.lookup_all(9).unwrap();
            all.sort();
            assert_eq!(all, vec![1, 2, 3]);
            assert!(t.delete_kv(9, 2).unwrap());
            assert!(!t.delete_kv(9, 2).unwrap());
            let mut all = t.lookup_all(9).unwrap();
            all.sort();
            assert_eq!(all, vec![1, 3]);
        });
    }

    #[test]
    fn heap_exhaustion_is_reported() {
        with_tables(1, 4, 3, |t| {
            t.insert(1, 1).unwrap();
            t.insert(2, 2).unwrap();
            t.insert(3, 3).unwrap();
            assert!(matches!(t.insert(4, 4), Err(GdiError::ResourceExhausted(_))));
            // Freeing one admits one more.
            assert!(t.delete(2).unwrap());
            t.insert(4, 4).unwrap();
            assert_eq!(t.lookup(4).unwrap(), Some(4));
        });
    }

    #[test]
    fn sequential_random_ops_match_map_oracle() {
        with_tables(1, 256, 4096, |t| {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
            let mut oracle: HashMap<u64, u64> = HashMap::new();
            for i in 0..20_000u64 {
                let k = rng.gen_range(0..512);
                match rng.gen_range(0..3) {
                    0 => {
                        if !oracle.contains_key(&k) && oracle.len() < 3000 {
                            t.insert(k, i).unwrap();
                            oracle.insert(k, i);
                        }
                    }
                    1 => {
                        assert_eq!(t.lookup(k).unwrap(), oracle.get(&k).copied(), "lookup({k})");
                    }
                    _ => {
                        assert_eq!(t.delete(k).unwrap(), oracle.remove(&k).is_some(), "delete({k})");
                    }
                }
            }
            assert_eq!(t.live_count().unwrap(), oracle.len());
            t.audit_reuse_safety().unwrap();
        });
    }

    #[test]
    fn concurrent_disjoint_inserts_all_survive() {
        let per_rank = 2000u64;
        let out = with_tables(8, 1024, 20_000, move |t| {
            let me = t.comm.rank().0 as u64;
            for i in 0..per_rank {
                let k = me * per_rank + i;
                t.insert(k, k + 1).unwrap();
            }
            t.comm.barrier().unwrap();
            let mut ok = true;
            for i in 0..per_rank {
                let k = ((me + 1) % 8) * per_rank + i;
                ok &= t.lookup(k).unwrap() == Some(k + 1);
            }
            t.comm.barrier().unwrap();
            if t.comm.rank().0 == 0 {
                assert_eq!(t.live_count().unwrap(), 8 * per_rank as usize);
                t.audit_reuse_safety().unwrap();
            }
            ok
        });
        assert!(out.into_iter().all(|x| x));
    }

    #[test]
    fn racing_deletes_have_one_winner_per_key() {
        let keys = 64u64;
        let out = with_tables(4, 64, 1024, move |t| {
            if t.comm.rank().0 == 0 {
                for k in 0..keys {
                    t.insert(k, k).unwrap();
                }
            }
            t.comm.barrier().unwrap();
            let mut wins = 0u64;
            for k in 0..keys {
                if t.delete(k).unwrap() {
                    wins += 1;
                }
            }
            t.comm.barrier().unwrap();
            let total = t.comm.allreduce(wins, crate::rma::ReduceOp::Sum).unwrap();
            if t.comm.rank().0 == 0 {
                assert_eq!(t.live_count().unwrap(), 0);
                t.audit_reuse_safety().unwrap();
            }
            total
        });
        for total in out {
            assert_eq!(total, keys, "exactly one winner per key");
        }
    }

    #[test]
    fn mixed_churn_conserves_entries() {
        // All ranks hammer one small key space with inserts and deletes,
        // then the survivors are counted against successful ops.
        let out = with_tables(4, 16, 4096, |t| {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7 + t.comm.rank().0 as u64);
            let mut ins = 0u64;
            let mut del = 0u64;
            for _ in 0..1500 {
                let k = rng.gen_range(0..24u64);
                if rng.gen_bool(0.6) {
                    t.insert(k, 1).unwrap();
                    ins += 1;
                } else if t.delete(k).unwrap() {
                    del += 1;
                }
                if rng.gen_bool(0.2) {
                    let _ = t.lookup(k).unwrap();
                }
            }
            t.comm.barrier().unwrap();
            let ins = t.comm.allreduce(ins, crate::rma::ReduceOp::Sum).unwrap();
            let del = t.comm.allreduce(del, crate::rma::ReduceOp::Sum).unwrap();
            if t.comm.rank().0 == 0 {
                assert_eq!(t.live_count().unwrap() as u64, ins - del);
                t.audit_reuse_safety().unwrap();
            }
        });
        assert_eq!(out.len(), 4);
    }

    #[test]
    fn lookup_racing_delete_returns_value_or_none() {
        let out = with_tables(2, 4, 64, |t| {
            let mut ok = true;
            if t.comm.rank().0 == 0 {
                for round in 0..2000u64 {
                    t.insert(7, round).unwrap();
                    t.comm.barrier().unwrap(); // round start
                    assert!(t.delete(7).unwrap());
                    t.comm.barrier().unwrap(); // round end
                }
            } else {
                for round in 0..2000u64 {
                    t.comm.barrier().unwrap();
                    match t.lookup(7).unwrap() {
                        None => {}
                        Some(v) => ok &= v == round,
                    }
                    t.comm.barrier().unwrap();
                }
            }
            ok
        });
        assert!(out.into_iter().all(|x| x));
    }
}
