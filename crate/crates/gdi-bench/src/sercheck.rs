//! Exhaustive small-instance serializability check.
//!
//! Two ranks each run a sequence of short random write transactions against
//! a 16-vertex graph. Afterwards the committed final state must equal the
//! state produced by applying the committed transactions in SOME serial
//! order consistent with each rank's own program order. The oracle
//! enumerates those orders with a prefix-pair dynamic program over a shadow
//! model: `states[i][j]` holds every distinct shadow state reachable after
//! the first `i` committed transactions of rank 0 interleaved with the
//! first `j` of rank 1.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gdi::db::run_ranks;
use gdi::error::{GdiError, Result};
use gdi::graph::EdgeMask;
use gdi::meta::PropValue;
use gdi::txn::{Decision, TxnMode};
use gdi::{EngineConfig, RankId};

const N_VERTICES: u16 = 16;
const N_AUX_LABELS: u16 = 4;

/// One scripted operation; vertices are named by their setup index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScriptOp {
    SetProp(u16, u64),
    AddLabel(u16, u16),
    RemoveLabel(u16, u16),
    AddEdge(u16, u16),
    DeleteVertex(u16),
}

/// Deterministic script for one transaction.
pub fn script_for(seed: u64, rank: u16, txn_index: usize) -> Vec<ScriptOp> {
    let mut rng = ChaCha8Rng::seed_from_u64(
        seed ^ ((rank as u64) << 32) ^ (txn_index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
    );
    let n_ops = rng.gen_range(1..=4);
    (0..n_ops)
        .map(|_| {
            let v = rng.gen_range(0..N_VERTICES);
            match rng.gen_range(0..100) {
                0..=39 => ScriptOp::SetProp(v, rng.gen_range(0..1000)),
                40..=69 => ScriptOp::AddEdge(v, rng.gen_range(0..N_VERTICES)),
                70..=84 => ScriptOp::AddLabel(v, rng.gen_range(0..N_AUX_LABELS)),
                85..=94 => ScriptOp::RemoveLabel(v, rng.gen_range(0..N_AUX_LABELS)),
                _ => ScriptOp::DeleteVertex(v),
            }
        })
        .collect()
}

/// Canonical graph state used by both the engine extraction and the shadow
/// model.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Debug, Default)]
pub struct ShadowState {
    /// vertex -> (aux labels, prop value).
    pub vertices: BTreeMap<u16, (BTreeSet<u16>, Option<u64>)>,
    /// (origin, target) -> multiplicity, only between live vertices.
    pub edges: BTreeMap<(u16, u16), u32>,
}

impl ShadowState {
    fn initial() -> ShadowState {
        ShadowState {
            vertices: (0..N_VERTICES).map(|v| (v, (BTreeSet::new(), None))).collect(),
            edges: BTreeMap::new(),
        }
    }

    /// Apply one committed transaction; `Err` marks an order in which this
    /// transaction could not have committed.
    fn apply(&self, script: &[ScriptOp]) -> std::result::Result<ShadowState, ()> {
        let mut s = self.clone();
        for op in script {
            match *op {
                ScriptOp::SetProp(v, val) => {
                    let e = s.vertices.get_mut(&v).ok_or(())?;
                    e.1 = Some(val);
                }
                ScriptOp::AddLabel(v, l) => {
                    let e = s.vertices.get_mut(&v).ok_or(())?;
                    if !e.0.insert(l) {
                        return Err(()); // duplicate add aborts
                    }
                }
                ScriptOp::RemoveLabel(v, l) => {
                    let e = s.vertices.get_mut(&v).ok_or(())?;
                    if !e.0.remove(&l) {
                        return Err(()); // absent remove aborts
                    }
                }
                ScriptOp::AddEdge(u, v) => {
                    if !s.vertices.contains_key(&u) || !s.vertices.contains_key(&v) {
                        return Err(());
                    }
                    *s.edges.entry((u, v)).or_default() += 1;
                }
                ScriptOp::DeleteVertex(v) => {
                    if s.vertices.remove(&v).is_none() {
                        return Err(());
                    }
                    s.edges.retain(|(a, b), _| *a != v && *b != v);
                }
            }
        }
        Ok(s)
    }
}

pub struct SerCheckOutcome {
    pub committed: Vec<(u16, usize, u64)>, // (rank, txn index, commit seq)
    pub final_state: ShadowState,
    /// Replay in global commit order reproduced the final state.
    pub commit_order_matches: bool,
    /// Some admissible serial order reproduces the final state.
    pub some_order_matches: bool,
    pub states_explored: usize,
}

/// Run the whole check: execute the transactions on the engine, extract the
/// final state, and compare against the enumerated shadow orders.
pub fn run_serializability_check(txns_per_rank: usize, seed: u64) -> Result<SerCheckOutcome> {
    let cfg = EngineConfig { ranks: 2, blocks_per_rank: 4096, index_capacity: 1 << 12, ..Default::default() };
    let results = run_ranks(&cfg, |db| {
        let base = db.create_label("V")?;
        let mut aux = Vec::new();
        for i in 0..N_AUX_LABELS {
            aux.push(db.create_label(&format!("aux{i}"))?);
        }
        let prop = db.create_property_type(gdi::meta::PropTypeDesc {
            name: "sp".into(),
            entity: gdi::meta::EntityKind::Single,
            datatype: gdi::meta::Datatype::U64,
            size: gdi::meta::SizeLimit::Fixed(1),
        })?;
        if db.rank() == RankId(0) {
            let w = db.start_transaction(TxnMode::Write);
            for v in 0..N_VERTICES {
                let h = w.create_vertex(&v.to_le_bytes())?;
                w.add_label(&h, base)?;
            }
            w.close(Decision::Commit)?;
        }
        db.comm().barrier()?;

        // Run my scripts.
        let mut committed: Vec<(usize, u64)> = Vec::new();
        for t in 0..txns_per_rank {
            let script = script_for(seed, db.rank().0, t);
            let txn = db.start_transaction(TxnMode::Write);
            let ok: std::result::Result<(), GdiError> = (|| {
                for op in &script {
                    match *op {
                        ScriptOp::SetProp(v, val) => {
                            let r = txn.translate_vertex_id(base, &v.to_le_bytes())?;
                            let h = txn.associate_vertex(r)?;
                            txn.update_property(&h, prop, &PropValue::u64(val))?;
                        }
                        ScriptOp::AddLabel(v, l) => {
                            let r = txn.translate_vertex_id(base, &v.to_le_bytes())?;
                            let h = txn.associate_vertex(r)?;
                            txn.add_label(&h, aux[l as usize])?;
                        }
                        ScriptOp::RemoveLabel(v, l) => {
                            let r = txn.translate_vertex_id(base, &v.to_le_bytes())?;
                            let h = txn.associate_vertex(r)?;
                            txn.remove_label(&h, aux[l as usize])?;
                        }
                        ScriptOp::AddEdge(u, v) => {
                            let ru = txn.translate_vertex_id(base, &u.to_le_bytes())?;
                            let hu = txn.associate_vertex(ru)?;
                            if u == v {
                                txn.create_edge(true, &hu, &hu)?;
                            } else {
                                let rv = txn.translate_vertex_id(base, &v.to_le_bytes())?;
                                let hv = txn.associate_vertex(rv)?;
                                txn.create_edge(true, &hu, &hv)?;
                            }
                        }
                        ScriptOp::DeleteVertex(v) => {
                            let r = txn.translate_vertex_id(base, &v.to_le_bytes())?;
                            let h = txn.associate_vertex(r)?;
                            txn.free_vertex(&h)?;
                        }
                    }
                }
                Ok(())
            })();
            match ok {
                Ok(()) => {
                    if let gdi::txn::TxnOutcome::Committed(seq) = txn.close(Decision::Commit)? {
                        committed.push((t, seq));
                    }
                }
                Err(_) => {
                    let _ = txn.close(Decision::Abort)?;
                }
            }
        }
        db.comm().barrier()?;

        // Rank 0 extracts the final canonical state.
        let state = if db.rank() == RankId(0) {
            let txn = db.start_transaction(TxnMode::Read);
            let mut st = ShadowState::default();
            let mut ref_to_idx = BTreeMap::new();
            for v in 0..N_VERTICES {
                let Ok(r) = txn.translate_vertex_id(base, &v.to_le_bytes()) else { continue };
                ref_to_idx.insert(r.raw(), v);
                let h = txn.associate_vertex(r)?;
                let labels: BTreeSet<u16> = txn
                    .get_labels(&h)?
                    .iter()
                    .filter_map(|l| aux.iter().position(|a| a == l))
                    .map(|i| i as u16)
                    .collect();
                let prop_val = txn.get_properties(&h, prop)?.first().map(|p| match p {
                    PropValue::U64(x) => x[0],
                    _ => unreachable!(),
                });
                st.vertices.insert(v, (labels, prop_val));
            }
            // Edges (directed, created by scripts only).
            for v in 0..N_VERTICES {
                let Ok(r) = txn.translate_vertex_id(base, &v.to_le_bytes()) else { continue };
                let h = txn.associate_vertex(r)?;
                for uid in txn.get_edges(&h, EdgeMask::OUT, None)? {
                    let (_, far) = txn.get_vertices_of_edge(uid)?;
                    let to = ref_to_idx[&far.raw()];
                    *st.edges.entry((v, to)).or_default() += 1;
                }
            }
            txn.close(Decision::Commit)?;
            let audit = db.audit()?;
            if !audit.ok() {
                return Err(GdiError::InvalidArgument(format!("audit failed: {audit:?}")));
            }
            Some(st)
        } else {
            None
        };
        db.comm().barrier()?;
        Ok((db.rank().0, committed, state))
    })?;

    let mut committed: Vec<(u16, usize, u64)> = Vec::new();
    let mut final_state = ShadowState::default();
    for (rank, list, state) in results {
        for (t, seq) in list {
            committed.push((rank, t, seq));
        }
        if let Some(s) = state {
            final_state = s;
        }
    }
    committed.sort_by_key(|(_, _, seq)| *seq);

    // Oracle 1: replay in global commit order.
    let mut replay = ShadowState::initial();
    let mut order_ok = true;
    for (rank, t, _) in &committed {
        match replay.apply(&script_for(seed, *rank, *t)) {
            Ok(next) => replay = next,
            Err(()) => {
                order_ok = false;
                break;
            }
        }
    }
    let commit_order_matches = order_ok && replay == final_state;

    // Oracle 2: prefix-pair dynamic program over all admissible serial
    // orders (program order per rank is preserved, transactions from the
    // two ranks interleave freely).
    let seq0: Vec<Vec<ScriptOp>> = committed
        .iter()
        .filter(|(r, _, _)| *r == 0)
        .map(|(_, t, _)| script_for(seed, 0, *t))
        .collect();
    let seq1: Vec<Vec<ScriptOp>> = committed
        .iter()
        .filter(|(r, _, _)| *r == 1)
        .map(|(_, t, _)| script_for(seed, 1, *t))
        .collect();
    let (n0, n1) = (seq0.len(), seq1.len());
    let mut states: Vec<Vec<HashSet<ShadowState>>> = vec![vec![HashSet::new(); n1 + 1]; n0 + 1];
    states[0][0].insert(ShadowState::initial());
    let mut explored = 1usize;
    for i in 0..=n0 {
        for j in 0..=n1 {
            if states[i][j].is_empty() {
                continue;
            }
            if i < n0 {
                let mut out = Vec::new();
                for s in &states[i][j] {
                    if let Ok(next) = s.apply(&seq0[i]) {
                        out.push(next);
                    }
                }
                for next in out {
                    if states[i + 1][j].insert(next) {
                        explored += 1;
                    }
                }
            }
            if j < n1 {
                let mut out = Vec::new();
                for s in &states[i][j] {
                    if let Ok(next) = s.apply(&seq1[j]) {
                        out.push(next);
                    }
                }
                for next in out {
                    if states[i][j + 1].insert(next) {
                        explored += 1;
                    }
                }
            }
        }
    }
    let some_order_matches = states[n0][n1].contains(&final_state);

    Ok(SerCheckOutcome {
        committed,
        final_state,
        commit_order_matches,
        some_order_matches,
        states_explored: explored,
    })
}
