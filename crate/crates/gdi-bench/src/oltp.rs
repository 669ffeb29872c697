//! OLTP driver: a high-velocity stream of single-operation local
//! transactions drawn i.i.d. from a workload mix.
//!
//! Operands come from a per-rank reservoir of live vertex refs (seeded from
//! the whole graph, refreshed on adds and deletes). Failed transactions
//! (lock conflicts, stale refs, forced aborts) are counted and not retried.
//! Each rank runs `warmup` unmeasured queries before the measured run.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gdi::blocks::GlobalRef;
use gdi::db::Db;
use gdi::error::{GdiError, Result};
use gdi::graph::EdgeMask;
use gdi::meta::{Datatype, EntityKind, Label, PropType, PropValue, SizeLimit};
use gdi::txn::{Decision, TxnMode};

use crate::mixes::{OltpMix, OpKind};
use crate::report::{LatencyHistogram, OpStats};

pub struct OltpOutcome {
    pub per_op: BTreeMap<OpKind, OpStats>,
    pub attempted: u64,
    pub failed: u64,
    pub elapsed: Duration,
}

struct Reservoir {
    refs: Vec<GlobalRef>,
    rng: ChaCha8Rng,
}

impl Reservoir {
    fn pick(&mut self) -> Option<GlobalRef> {
        if self.refs.is_empty() {
            return None;
        }
        Some(self.refs[self.rng.gen_range(0..self.refs.len())])
    }

    fn remove(&mut self, r: GlobalRef) {
        if let Some(pos) = self.refs.iter().position(|x| *x == r) {
            self.refs.swap_remove(pos);
        }
    }
}

/// Property type used by update operations: the first single-entity fixed
/// u64 type in the catalog, created on demand.
fn update_ptype(db: &Db) -> Result<PropType> {
    for pt in db.catalog().prop_types() {
        let d = db.catalog().prop_desc(pt)?.clone();
        if d.datatype == Datatype::U64 && d.entity == EntityKind::Single && d.size == SizeLimit::Fixed(1)
        {
            return Ok(pt);
        }
    }
    Err(GdiError::NotFound("no fixed u64 property type for updates".into()))
}

fn labels_of(db: &Db) -> Vec<Label> {
    db.catalog().labels()
}

/// Run one mix on a populated database. Collective only in its barriers:
/// every rank issues independent local transactions.
pub fn run_oltp(
    db: &Db,
    mix: OltpMix,
    queries_per_rank: u64,
    warmup_per_rank: u64,
    seed: u64,
) -> Result<OltpOutcome> {
    let me = db.rank().0 as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (me.wrapping_mul(0x9e37_79b9)));
    let mut reservoir = {
        let mut refs = db.live_vertices_all();
        refs.sort();
        refs.shuffle(&mut rng);
        refs.truncate(1 << 16);
        Reservoir { refs, rng: ChaCha8Rng::seed_from_u64(seed ^ me ^ 0xabcd) }
    };
    if reservoir.refs.is_empty() {
        return Err(GdiError::InvalidArgument("OLTP requires a populated database".into()));
    }
    let ptype = update_ptype(db)?;
    let labels = labels_of(db);
    let mut next_vertex = 0u64;

    let mut per_op: BTreeMap<OpKind, OpStats> = BTreeMap::new();
    let mut attempted = 0u64;
    let mut failed = 0u64;

    db.comm().barrier()?;
    for i in 0..warmup_per_rank {
        let kind = mix.sample(&mut rng);
        let _ = execute_op(db, kind, &mut reservoir, ptype, &labels, &mut next_vertex, me, i);
    }
    db.comm().barrier()?;
    let t0 = Instant::now();
    for i in 0..queries_per_rank {
        let kind = mix.sample(&mut rng);
        let q0 = Instant::now();
        let ok =
            execute_op(db, kind, &mut reservoir, ptype, &labels, &mut next_vertex, me, warmup_per_rank + i)?;
        let dt = q0.elapsed();
        attempted += 1;
        if !ok {
            failed += 1;
        }
        let stats = per_op.entry(kind).or_insert_with(|| OpStats {
            attempted: 0,
            failed: 0,
            histogram: LatencyHistogram::new(),
        });
        stats.attempted += 1;
        if !ok {
            stats.failed += 1;
        }
        stats.histogram.record(dt);
    }
    let elapsed = t0.elapsed();
    db.comm().barrier()?;
    Ok(OltpOutcome { per_op, attempted, failed, elapsed })
}

/// One operation as one local transaction. `Ok(true)` means committed;
/// `Ok(false)` means the transaction failed (conflict, stale ref, abort).
#[allow(clippy::too_many_arguments)]
fn execute_op(
    db: &Db,
    kind: OpKind,
    reservoir: &mut Reservoir,
    ptype: PropType,
    labels: &[Label],
    next_vertex: &mut u64,
    rank: u64,
    _op_index: u64,
) -> Result<bool> {
    let mode = if kind.is_update() { TxnMode::Write } else { TxnMode::Read };
    let txn = db.start_transaction(mode);
    let mut deleted: Option<GlobalRef> = None;
    let mut added: Option<GlobalRef> = None;
    let mut picked: Vec<GlobalRef> = Vec::new();
    let pick = |rs: &mut Reservoir, picked: &mut Vec<GlobalRef>| {
        let r = rs.pick().unwrap();
        picked.push(r);
        r
    };
    let body: std::result::Result<(), GdiError> = (|| {
        match kind {
            OpKind::GetVertexProps => {
                let target = pick(reservoir, &mut picked);
                let h = txn.associate_vertex(target)?;
                let _ = txn.get_properties(&h, ptype)?;
                let _ = txn.get_labels(&h)?;
            }
            OpKind::CountEdges => {
                let target = pick(reservoir, &mut picked);
                let h = txn.associate_vertex(target)?;
                let _ = txn.get_edges(&h, EdgeMask::ALL, None)?.len();
            }
            OpKind::GetEdges => {
                let target = pick(reservoir, &mut picked);
                let h = txn.associate_vertex(target)?;
                for uid in txn.get_edges(&h, EdgeMask::ALL, None)? {
                    let _ = txn.get_vertices_of_edge(uid)?;
                }
            }
            OpKind::AddVertex => {
                let id = format!("bench:{rank}:{}", *next_vertex);
                *next_vertex += 1;
                let h = txn.create_vertex(id.as_bytes())?;
                if !labels.is_empty() {
                    txn.add_label(&h, labels[(*next_vertex as usize) % labels.len()])?;
                }
                txn.add_property(&h, ptype, &PropValue::u64(*next_vertex))?;
                added = Some(h.primary);
            }
            OpKind::DeleteVertex => {
                let target = pick(reservoir, &mut picked);
                let h = txn.associate_vertex(target)?;
                txn.free_vertex(&h)?;
                deleted = Some(target);
            }
            OpKind::UpdateProp => {
                let target = pick(reservoir, &mut picked);
                let h = txn.associate_vertex(target)?;
                txn.update_property(&h, ptype, &PropValue::u64(*next_vertex))?;
                *next_vertex += 1;
            }
            OpKind::AddEdge => {
                let a = pick(reservoir, &mut picked);
                let b = pick(reservoir, &mut picked);
                let ha = txn.associate_vertex(a)?;
                if a == b {
                    txn.create_edge(true, &ha, &ha)?;
                } else {
                    let hb = txn.associate_vertex(b)?;
                    txn.create_edge(true, &ha, &hb)?;
                }
            }
        }
        Ok(())
    })();

    let committed = match body {
        Ok(()) => txn.close(Decision::Commit)?.is_committed(),
        Err(e) => {
            // Stale picks were deleted under our feet; drop them.
            if matches!(e, GdiError::Stale) {
                for p in picked {
                    if !db.is_live(p) {
                        reservoir.remove(p);
                    }
                }
            }
            let _ = txn.close(Decision::Commit)?; // forced abort
            false
        }
    };
    if committed {
        if let Some(t) = deleted {
            reservoir.remove(t);
        }
        if let Some(t) = added {
            reservoir.refs.push(t);
        }
    }
    Ok(committed)
}
