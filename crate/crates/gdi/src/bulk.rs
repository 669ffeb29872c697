//! Bulk data ingestion: collective load of a text edge list with an
//! optional JSON vertex-property document.
//!
//! Line format: `u v [label]` where `u`/`v` are unsigned vertex IDs and the
//! optional label names an edge label (created on first use). Lines
//! starting with `#` and blank lines are skipped. Vertices are distributed
//! round-robin by ID and created in chunked collective write transactions;
//! each rank writes only the holders it owns.

use std::collections::{BTreeMap, BTreeSet};

use crate::blocks::GlobalRef;
use crate::db::Db;
use crate::error::{GdiError, Result};
use crate::graph::EdgeDir;
use crate::meta::{Datatype, Label, PropValue};
use crate::rma::{RankId, ReduceOp};
use crate::txn::{Decision, TxnMode};

#[derive(Debug, Clone)]
pub struct BulkReport {
    pub vertices: u64,
    pub edges: u64,
    pub per_rank_vertices: Vec<u64>,
}

/// Collective: load an edge list. Every rank receives the same `text`;
/// vertices are labeled `vertex_label` so their IDs stay translatable.
pub fn load_edge_list(
    db: &Db,
    text: &str,
    vertex_label: &str,
    vertex_props_json: Option<&str>,
) -> Result<BulkReport> {
    let mut edges: Vec<(u64, u64, Option<String>)> = Vec::new();
    let mut vertices: BTreeSet<u64> = BTreeSet::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let parse = |tok: Option<&str>| -> Result<u64> {
            tok.ok_or_else(|| GdiError::InvalidArgument(format!("line {}: missing field", lineno + 1)))?
                .parse::<u64>()
                .map_err(|e| GdiError::InvalidArgument(format!("line {}: {e}", lineno + 1)))
        };
        let u = parse(it.next())?;
        let v = parse(it.next())?;
        let label = it.next().map(str::to_string);
        vertices.insert(u);
        vertices.insert(v);
        edges.push((u, v, label));
    }

    let props: BTreeMap<u64, BTreeMap<String, serde_json::Value>> = match vertex_props_json {
        Some(json) => {
            let doc: BTreeMap<String, BTreeMap<String, serde_json::Value>> =
                serde_json::from_str(json).map_err(|e| GdiError::InvalidArgument(e.to_string()))?;
            let mut out = BTreeMap::new();
            for (k, v) in doc {
                let id = k
                    .parse::<u64>()
                    .map_err(|e| GdiError::InvalidArgument(format!("vertex key {k:?}: {e}")))?;
                out.insert(id, v);
            }
            out
        }
        None => BTreeMap::new(),
    };

    // Labels are collective metadata; every rank parses identical input so
    // the creation order matches.
    let vlabel = match db.label_from_name(vertex_label) {
        Ok(l) => l,
        Err(_) => db.create_label(vertex_label)?,
    };
    let mut edge_labels: BTreeMap<String, Label> = BTreeMap::new();
    for (_, _, l) in &edges {
        if let Some(name) = l {
            if !edge_labels.contains_key(name) {
                let label = match db.label_from_name(name) {
                    Ok(l) => l,
                    Err(_) => db.create_label(name)?,
                };
                edge_labels.insert(name.clone(), label);
            }
        }
    }

    // Round-robin homes by position in the sorted distinct ID list.
    let nranks = db.nranks() as u64;
    let me = db.rank();
    let ordered: Vec<u64> = vertices.iter().copied().collect();
    let home = |pos: usize| RankId((pos as u64 % nranks) as u16);
    let mut ref_of: BTreeMap<u64, GlobalRef> = BTreeMap::new();

    // Create owned vertices in chunks.
    const CHUNK: usize = 4096;
    for chunk in ordered.chunks(CHUNK) {
        let base = ordered.iter().position(|x| x == &chunk[0]).unwrap();
        let txn = db.start_collective_transaction(TxnMode::Write)?;
        for (i, id) in chunk.iter().enumerate() {
            if home(base + i) != me {
                continue;
            }
            let h = txn.create_vertex(&id.to_le_bytes())?;
            txn.add_label(&h, vlabel)?;
            if let Some(vals) = props.get(id) {
                for (name, value) in vals {
                    let pt = db.prop_from_name(name)?;
                    let dt = db.catalog().prop_desc(pt)?.datatype;
                    let pv = json_to_value(dt, value)?;
                    txn.add_property(&h, pt, &pv)?;
                }
            }
            ref_of.insert(*id, h.primary);
        }
        txn.close(Decision::Commit)?;
    }
    db.comm().barrier()?;

    // Everyone learns every ref (translation against the committed state).
    {
        let txn = db.start_collective_transaction(TxnMode::Read)?;
        for id in &ordered {
            if !ref_of.contains_key(id) {
                let r = txn.translate_vertex_id(vlabel, &id.to_le_bytes())?;
                ref_of.insert(*id, r);
            }
        }
        txn.close(Decision::Commit)?;
    }

    // Apply half-edges by ownership.
    let mut outgoing: BTreeMap<u64, Vec<(GlobalRef, u32)>> = BTreeMap::new();
    let mut incoming: BTreeMap<u64, Vec<(GlobalRef, u32)>> = BTreeMap::new();
    for (u, v, lname) in &edges {
        let lid = lname.as_ref().map(|n| edge_labels[n].int_id).unwrap_or(0);
        if ref_of[u].rank() == me {
            outgoing.entry(*u).or_default().push((ref_of[v], lid));
        }
        if ref_of[v].rank() == me {
            incoming.entry(*v).or_default().push((ref_of[u], lid));
        }
    }
    let mut touched: BTreeSet<u64> = outgoing.keys().chain(incoming.keys()).copied().collect();
    let touched: Vec<u64> = std::mem::take(&mut touched).into_iter().collect();
    for chunk in touched.chunks(CHUNK) {
        let txn = db.start_collective_transaction(TxnMode::Write)?;
        for id in chunk {
            let h = txn.associate_vertex(ref_of[id])?;
            for (far, lid) in outgoing.get(id).into_iter().flatten() {
                txn.bulk_append_edge(&h, *far, EdgeDir::Outgoing, *lid)?;
            }
            for (far, lid) in incoming.get(id).into_iter().flatten() {
                txn.bulk_append_edge(&h, *far, EdgeDir::Incoming, *lid)?;
            }
        }
        txn.close(Decision::Commit)?;
    }
    db.comm().barrier()?;

    let per_rank_vertices: Vec<u64> = (0..db.nranks())
        .map(|r| {
            ordered.iter().enumerate().filter(|(pos, _)| home(*pos) == RankId(r as u16)).count() as u64
        })
        .collect();
    let total_edges = db.comm().allreduce(
        if me == RankId(0) { edges.len() as u64 } else { 0 },
        ReduceOp::Sum,
    )?;
    Ok(BulkReport { vertices: ordered.len() as u64, edges: total_edges, per_rank_vertices })
}

fn json_to_value(dt: Datatype, v: &serde_json::Value) -> Result<PropValue> {
    let bad = || GdiError::DatatypeMismatch(format!("json value {v} does not fit {dt:?}"));
    Ok(match dt {
        Datatype::U64 => PropValue::u64(v.as_u64().ok_or_else(bad)?),
        Datatype::I64 => PropValue::i64(v.as_i64().ok_or_else(bad)?),
        Datatype::F64 => PropValue::f64(v.as_f64().ok_or_else(bad)?),
        Datatype::Utf8 => PropValue::text(v.as_str().ok_or_else(bad)?),
        Datatype::Bytes => PropValue::Bytes(
            v.as_array()
                .ok_or_else(bad)?
                .iter()
                .map(|x| x.as_u64().map(|b| b as u8).ok_or_else(bad))
                .collect::<Result<Vec<u8>>>()?,
        ),
    })
}
