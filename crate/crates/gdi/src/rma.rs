//! Simulated one-sided communication layer.
//!
//! Every rank is an independent execution agent (a thread). Windows are
//! shared byte arrays with per-word atomic access; puts and gets apply
//! eagerly, so the flush contract ("all prior ops to the target are visible
//! after flush returns") holds trivially. Remote atomics are linearizable
//! through `AtomicU64`. Collectives use a single centralized rendezvous.
//!
//! An optional uniform per-op delay widens race windows in stress tests and
//! emulates transport latency; it defaults to zero.

use std::any::Any;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use crate::error::{GdiError, Result};

/// Identifies one of the `P` ranks. Must fit the 16-bit rank field of a
/// global block reference, so `P <= 65536`.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct RankId(pub u16);

impl RankId {
    #[inline]
    pub fn as_usize(self) -> usize {
        self.0 as usize
    }
}

impl std::fmt::Display for RankId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "r{}", self.0)
    }
}

/// Reduction operators for `allreduce`/`reduce`.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ReduceOp {
    Sum,
    Max,
    Min,
}

impl ReduceOp {
    fn fold(self, a: u64, b: u64) -> u64 {
        match self {
            ReduceOp::Sum => a.wrapping_add(b),
            ReduceOp::Max => a.max(b),
            ReduceOp::Min => a.min(b),
        }
    }
}

/// Discriminates collective call sites; all ranks must issue the same
/// sequence of kinds with matching arguments.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum CollKind {
    Barrier,
    AllReduce(ReduceOp),
    Reduce { op: ReduceOp, root: u16 },
    Broadcast { root: u16 },
    WinAlloc { size: usize },
    Share { tag: u64 },
}

struct Round {
    arrived: usize,
    kind: Option<CollKind>,
    acc: u64,
    any: Option<Arc<dyn Any + Send + Sync>>,
    poisoned: Option<GdiError>,
}

impl Round {
    fn fresh() -> Self {
        Round { arrived: 0, kind: None, acc: 0, any: None, poisoned: None }
    }
}

#[derive(Clone)]
struct RoundResult {
    out: u64,
    any: Option<Arc<dyn Any + Send + Sync>>,
    err: Option<GdiError>,
}

struct RendezvousInner {
    epoch: u64,
    cur: Round,
    // Results ring: epoch e completes into slot e % 2. Epoch e+2 cannot
    // complete before every rank has exited epoch e.
    done: [Option<RoundResult>; 2],
}

struct Rendezvous {
    state: Mutex<RendezvousInner>,
    cv: Condvar,
    nranks: usize,
    timeout: Duration,
}

impl Rendezvous {
    fn new(nranks: usize, timeout: Duration) -> Self {
        Rendezvous {
            state: Mutex::new(RendezvousInner {
                epoch: 0,
                cur: Round::fresh(),
                done: [None, None],
            }),
            cv: Condvar::new(),
            nranks,
            timeout,
        }
    }

    fn run(
        &self,
        rank: RankId,
        kind: CollKind,
        contrib: u64,
        any: Option<Arc<dyn Any + Send + Sync>>,
    ) -> Result<RoundResult> {
        let mut st = self.state.lock().unwrap();
        let ep = st.epoch;
        {
            let r = &mut st.cur;
            if r.arrived == 0 {
                r.kind = Some(kind);
                r.acc = contrib;
                r.any = None;
                r.poisoned = None;
            } else if r.kind != Some(kind) {
                r.poisoned = Some(GdiError::CollectiveMismatch(format!(
                    "rank {rank} called {kind:?} while round started as {:?}",
                    r.kind
                )));
            } else if let CollKind::AllReduce(op) | CollKind::Reduce { op, .. } = kind {
                r.acc = op.fold(r.acc, contrib);
            }
            // The broadcast result is the root's contribution no matter the
            // arrival order.
            if let CollKind::Broadcast { root } = kind {
                if rank.0 == root {
                    r.acc = contrib;
                }
            }
            if r.any.is_none() {
                r.any = any;
            }
            r.arrived += 1;
        }

        if st.cur.arrived == self.nranks {
            let mut result = RoundResult {
                out: st.cur.acc,
                any: st.cur.any.take(),
                err: st.cur.poisoned.take(),
            };
            if result.err.is_none() {
                if let CollKind::WinAlloc { size } = kind {
                    result.any =
                        Some(Arc::new(WindowInner::new(self.nranks, size)) as Arc<dyn Any + Send + Sync>);
                }
            }
            st.done[(ep % 2) as usize] = Some(result.clone());
            st.cur = Round::fresh();
            st.epoch = ep + 1;
            self.cv.notify_all();
            match result.err {
                Some(e) => Err(e),
                None => Ok(result),
            }
        } else {
            let deadline = std::time::Instant::now() + self.timeout;
            while st.epoch <= ep {
                let now = std::time::Instant::now();
                if now >= deadline {
                    return Err(GdiError::CollectiveTimeout(self.timeout.as_millis() as u64));
                }
                let (guard, _) = self.cv.wait_timeout(st, deadline - now).unwrap();
                st = guard;
            }
            let result = st.done[(ep % 2) as usize].clone().expect("completed round has a result");
            match result.err {
                Some(e) => Err(e),
                None => Ok(result),
            }
        }
    }
}

struct WindowInner {
    id: u64,
    size: usize,
    segs: Vec<Box<[AtomicU64]>>,
}

impl WindowInner {
    fn new(nranks: usize, size: usize) -> Self {
        static NEXT_ID: AtomicU64 = AtomicU64::new(1);
        let words = size.div_ceil(8);
        let segs = (0..nranks)
            .map(|_| (0..words).map(|_| AtomicU64::new(0)).collect::<Vec<_>>().into_boxed_slice())
            .collect();
        WindowInner { id: NEXT_ID.fetch_add(1, Ordering::Relaxed), size, segs }
    }
}

/// Handle to a remotely accessible memory window. Every rank exposes
/// `size_per_rank` bytes, readable and writable by all ranks.
#[derive(Clone)]
pub struct Window {
    inner: Arc<WindowInner>,
}

impl Window {
    pub fn size_per_rank(&self) -> usize {
        self.inner.size
    }
}

impl std::fmt::Debug for Window {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Window#{}[{}B/rank]", self.inner.id, self.inner.size)
    }
}

/// Backend-wide options for a communicator group.
#[derive(Clone, Debug)]
pub struct RmaOptions {
    /// Collective rendezvous timeout; expiring it reports a mismatched
    /// collective sequence.
    pub collective_timeout: Duration,
    /// Uniform per-op simulated network delay (None or zero to disable).
    pub net_delay: Option<Duration>,
}

impl Default for RmaOptions {
    fn default() -> Self {
        RmaOptions { collective_timeout: Duration::from_secs(30), net_delay: None }
    }
}

struct CommShared {
    nranks: usize,
    rendezvous: Rendezvous,
    delay: Option<Duration>,
}

/// Per-rank endpoint of the communication layer. Cheap to clone.
#[derive(Clone)]
pub struct Comm {
    shared: Arc<CommShared>,
    rank: RankId,
}

impl Comm {
    /// Create a group of `nranks` endpoints sharing one simulated transport.
    /// Hand one endpoint to each rank's thread.
    pub fn split(nranks: usize, opts: RmaOptions) -> Vec<Comm> {
        assert!((1..=65_536).contains(&nranks), "rank count must be in [1, 65536]");
        let delay = opts.net_delay.filter(|d| !d.is_zero());
        let shared = Arc::new(CommShared {
            nranks,
            rendezvous: Rendezvous::new(nranks, opts.collective_timeout),
            delay,
        });
        (0..nranks).map(|r| Comm { shared: shared.clone(), rank: RankId(r as u16) }).collect()
    }

    pub fn rank(&self) -> RankId {
        self.rank
    }

    pub fn nranks(&self) -> usize {
        self.shared.nranks
    }

    #[inline]
    fn delay(&self) {
        if let Some(d) = self.shared.delay {
            std::thread::sleep(d);
        }
    }

    fn seg<'a>(&self, win: &'a Window, target: RankId) -> Result<&'a [AtomicU64]> {
        win.inner
            .segs
            .get(target.as_usize())
            .map(|s| &s[..])
            .ok_or_else(|| GdiError::InvalidArgument(format!("rank {target} out of range")))
    }

    fn check_bounds(win: &Window, offset: usize, len: usize) -> Result<()> {
        let size = win.inner.size;
        if offset.checked_add(len).is_none_or(|end| end > size) || (len == 0 && offset > size) {
            return Err(GdiError::OutOfBounds { offset, len, size });
        }
        Ok(())
    }

    fn check_atomic(win: &Window, offset: usize) -> Result<()> {
        Self::check_bounds(win, offset, 8)?;
        if !offset.is_multiple_of(8) {
            return Err(GdiError::Misaligned(offset));
        }
        Ok(())
    }

    /// Allocate a zero-initialized window of `size_per_rank` bytes per rank.
    /// Collective; all ranks must pass the same size.
    pub fn win_alloc(&self, size_per_rank: usize) -> Result<Window> {
        let res = self.shared.rendezvous.run(
            self.rank,
            CollKind::WinAlloc { size: size_per_rank },
            0,
            None,
        )?;
        let any = res.any.expect("win_alloc result");
        let inner = any.downcast::<WindowInner>().expect("window payload");
        Ok(Window { inner })
    }

    /// Write `data` into `target`'s segment at `offset`. Visibility is
    /// guaranteed after `flush(target)` returns.
    pub fn put(&self, win: &Window, target: RankId, offset: usize, data: &[u8]) -> Result<()> {
        Self::check_bounds(win, offset, data.len())?;
        self.delay();
        let seg = self.seg(win, target)?;
        let mut pos = 0usize;
        while pos < data.len() {
            let byte_off = offset + pos;
            let word = byte_off / 8;
            let in_word = byte_off % 8;
            let take = (8 - in_word).min(data.len() - pos);
            let chunk = &data[pos..pos + take];
            if take == 8 {
                seg[word].store(u64::from_le_bytes(chunk.try_into().unwrap()), Ordering::SeqCst);
            } else {
                // Partial word: merge so concurrent writers of disjoint byte
                // ranges within one word do not lose updates.
                seg[word]
                    .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |old| {
                        let mut b = old.to_le_bytes();
                        b[in_word..in_word + take].copy_from_slice(chunk);
                        Some(u64::from_le_bytes(b))
                    })
                    .unwrap();
            }
            pos += take;
        }
        Ok(())
    }

    /// Read `buf.len()` bytes from `target`'s segment at `offset`.
    pub fn get(&self, win: &Window, target: RankId, offset: usize, buf: &mut [u8]) -> Result<()> {
        Self::check_bounds(win, offset, buf.len())?;
        self.delay();
        let seg = self.seg(win, target)?;
        let mut pos = 0usize;
        while pos < buf.len() {
            let byte_off = offset + pos;
            let word = byte_off / 8;
            let in_word = byte_off % 8;
            let take = (8 - in_word).min(buf.len() - pos);
            let w = seg[word].load(Ordering::SeqCst).to_le_bytes();
            buf[pos..pos + take].copy_from_slice(&w[in_word..in_word + take]);
            pos += take;
        }
        Ok(())
    }

    /// Convenience wrapper returning an owned buffer.
    pub fn get_vec(&self, win: &Window, target: RankId, offset: usize, len: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; len];
        self.get(win, target, offset, &mut buf)?;
        Ok(buf)
    }

    /// Atomic compare-and-swap on an aligned 64-bit word. Returns the prior
    /// value; the swap happened iff the prior value equals `compare`.
    /// Linearizable across all ranks and complete at return.
    pub fn atomic_cas(
        &self,
        win: &Window,
        target: RankId,
        offset: usize,
        compare: u64,
        new: u64,
    ) -> Result<u64> {
        Self::check_atomic(win, offset)?;
        self.delay();
        let seg = self.seg(win, target)?;
        Ok(match seg[offset / 8].compare_exchange(compare, new, Ordering::SeqCst, Ordering::SeqCst)
        {
            Ok(prior) => prior,
            Err(prior) => prior,
        })
    }

    /// Atomic read of an aligned 64-bit word.
    pub fn atomic_get(&self, win: &Window, target: RankId, offset: usize) -> Result<u64> {
        Self::check_atomic(win, offset)?;
        self.delay();
        Ok(self.seg(win, target)?[offset / 8].load(Ordering::SeqCst))
    }

    /// Atomic write of an aligned 64-bit word.
    pub fn atomic_put(&self, win: &Window, target: RankId, offset: usize, value: u64) -> Result<()> {
        Self::check_atomic(win, offset)?;
        self.delay();
        self.seg(win, target)?[offset / 8].store(value, Ordering::SeqCst);
        Ok(())
    }

    /// Complete all outstanding puts/gets by the caller to `target`.
    pub fn flush(&self, win: &Window, target: RankId) -> Result<()> {
        let _ = self.seg(win, target)?;
        self.delay();
        std::sync::atomic::fence(Ordering::SeqCst);
        Ok(())
    }

    /// Collective: returns once every rank reached the barrier.
    pub fn barrier(&self) -> Result<()> {
        self.shared.rendezvous.run(self.rank, CollKind::Barrier, 0, None)?;
        Ok(())
    }

    /// Collective: combine `local` across all ranks; every rank receives the
    /// same result.
    pub fn allreduce(&self, local: u64, op: ReduceOp) -> Result<u64> {
        Ok(self.shared.rendezvous.run(self.rank, CollKind::AllReduce(op), local, None)?.out)
    }

    /// Collective: combine `local` across all ranks; only `root` receives
    /// `Some(result)`.
    pub fn reduce(&self, local: u64, op: ReduceOp, root: RankId) -> Result<Option<u64>> {
        let res = self.shared.rendezvous.run(self.rank, CollKind::Reduce { op, root: root.0 }, local, None)?;
        Ok((self.rank == root).then_some(res.out))
    }

    /// Collective: every rank receives `root`'s value.
    pub fn broadcast(&self, value: u64, root: RankId) -> Result<u64> {
        Ok(self
            .shared
            .rendezvous
            .run(self.rank, CollKind::Broadcast { root: root.0 }, value, None)?
            .out)
    }

    /// Collective: all ranks must contribute the same value, which is
    /// returned. Detects mismatched collective arguments.
    pub fn agree(&self, value: u64) -> Result<u64> {
        let lo = self.allreduce(value, ReduceOp::Min)?;
        let hi = self.allreduce(value, ReduceOp::Max)?;
        if lo != hi {
            return Err(GdiError::CollectiveMismatch(format!(
                "ranks disagree on collective argument ({lo} vs {hi})"
            )));
        }
        Ok(lo)
    }

    /// Collective: share one `Arc` payload (provided by at least one rank,
    /// conventionally rank 0) with every rank. `tag` disambiguates call
    /// sites.
    pub fn share(
        &self,
        tag: u64,
        payload: Option<Arc<dyn Any + Send + Sync>>,
    ) -> Result<Arc<dyn Any + Send + Sync>> {
        let res = self.shared.rendezvous.run(self.rank, CollKind::Share { tag }, 0, payload)?;
        res.any.ok_or_else(|| {
            GdiError::CollectiveMismatch("share: no rank provided a payload".into())
        })
    }
}
