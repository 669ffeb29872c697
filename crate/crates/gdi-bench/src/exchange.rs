//! All-to-all exchange of u64 items over the one-sided layer, used for
//! frontier and contribution routing in the analytics workloads.
//!
//! Each rank's window holds one inbox slot per source rank: a count word
//! followed by `cap` payload words. A round is: put your per-destination
//! items (bounded by `cap`) into the destinations' inboxes, barrier, read
//! your own inboxes, barrier. Sub-rounds repeat until every rank has
//! drained its outgoing queues, so message volume per pair is unbounded
//! while window memory stays fixed.

use gdi::error::Result;
use gdi::rma::{Comm, RankId, ReduceOp, Window};

pub struct Exchanger {
    comm: Comm,
    win: Window,
    cap: usize,
}

impl Exchanger {
    /// Collective. `cap` bounds the items moved per (source, destination)
    /// pair per sub-round.
    pub fn create(comm: &Comm, cap: usize) -> Result<Exchanger> {
        let slot_bytes = 8 + cap * 8;
        let win = comm.win_alloc(comm.nranks() * slot_bytes)?;
        Ok(Exchanger { comm: comm.clone(), win, cap })
    }

    fn slot_off(&self, src: RankId) -> usize {
        src.as_usize() * (8 + self.cap * 8)
    }

    /// Collective: route `outgoing[d]` to rank `d`; returns the items this
    /// rank received, grouped by source, order preserved per pair.
    pub fn exchange(&self, outgoing: &[Vec<u64>]) -> Result<Vec<Vec<u64>>> {
        assert_eq!(outgoing.len(), self.comm.nranks());
        let me = self.comm.rank();
        let n = self.comm.nranks();
        let mut sent = vec![0usize; n];
        let mut received: Vec<Vec<u64>> = (0..n).map(|_| Vec::new()).collect();
        loop {
            // Put one bounded batch per destination.
            let mut left = 0u64;
            for (d, items) in outgoing.iter().enumerate() {
                let dest = RankId(d as u16);
                let take = (items.len() - sent[d]).min(self.cap);
                if take > 0 {
                    let mut buf = Vec::with_capacity(take * 8);
                    for x in &items[sent[d]..sent[d] + take] {
                        buf.extend_from_slice(&x.to_le_bytes());
                    }
                    self.comm.put(&self.win, dest, self.slot_off(me) + 8, &buf)?;
                }
                self.comm.atomic_put(&self.win, dest, self.slot_off(me), take as u64)?;
                self.comm.flush(&self.win, dest)?;
                sent[d] += take;
                left += (items.len() - sent[d]) as u64;
            }
            self.comm.barrier()?;
            // Drain own inboxes.
            for (s, inbox) in received.iter_mut().enumerate() {
                let src = RankId(s as u16);
                let count = self.comm.atomic_get(&self.win, me, self.slot_off(src))? as usize;
                if count > 0 {
                    let buf = self.comm.get_vec(&self.win, me, self.slot_off(src) + 8, count * 8)?;
                    for chunk in buf.chunks(8) {
                        inbox.push(u64::from_le_bytes(chunk.try_into().unwrap()));
                    }
                }
            }
            // Everyone must finish reading before inboxes are overwritten.
            let more = self.comm.allreduce(left, ReduceOp::Max)?;
            if more == 0 {
                return Ok(received);
            }
        }
    }

    /// Flattened exchange: `(dest, value)` pairs in, values received in
    /// deterministic (source, send) order out.
    pub fn route(&self, items: impl IntoIterator<Item = (RankId, u64)>) -> Result<Vec<u64>> {
        let mut outgoing: Vec<Vec<u64>> = (0..self.comm.nranks()).map(|_| Vec::new()).collect();
        for (dest, v) in items {
            outgoing[dest.as_usize()].push(v);
        }
        Ok(self.exchange(&outgoing)?.into_iter().flatten().collect())
    }
}
