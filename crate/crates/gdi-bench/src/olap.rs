//! Whole-graph analytics over collective read transactions.
//!
//! Each rank snapshots the adjacency of its own vertices once inside a
//! collective read transaction (undirected view: outgoing, incoming and
//! undirected records all count), then the algorithms run rounds of local
//! compute plus all-to-all exchanges. Vertices travel between ranks as raw
//! global refs; results are keyed by application ID so they are comparable
//! across rank counts.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use gdi::blocks::GlobalRef;
use gdi::db::Db;
use gdi::dht::mix64;
use gdi::error::{GdiError, Result};
use gdi::graph::EdgeMask;
use gdi::meta::{Datatype, EntityKind, PropType, PropTypeDesc, PropValue, SizeLimit};
use gdi::rma::{RankId, ReduceOp};
use gdi::txn::{Decision, Transaction, TxnMode};

use crate::exchange::Exchanger;

/// Per-rank adjacency snapshot (undirected view).
pub struct LocalGraph {
    pub verts: Vec<GlobalRef>,
    pub app: Vec<u64>,
    pub adj: Vec<Vec<GlobalRef>>,
    pub index: HashMap<u64, usize>,
    /// Global vertex count.
    pub n_global: u64,
}

fn app_id_of(txn: &Transaction<'_>, h: &gdi::txn::VertexHolder) -> Result<u64> {
    let bytes = txn.get_app_id(h)?;
    bytes
        .try_into()
        .map(u64::from_le_bytes)
        .map_err(|_| GdiError::InvalidArgument("analytics expect u64 application ids".into()))
}

/// Snapshot the calling rank's vertices and adjacency inside a collective
/// read transaction.
pub fn snapshot_local(db: &Db) -> Result<LocalGraph> {
    let txn = db.start_collective_transaction(TxnMode::Read)?;
    let mut verts = db.live_vertices_local();
    verts.sort();
    let mut app = Vec::with_capacity(verts.len());
    let mut adj = Vec::with_capacity(verts.len());
    let mut index = HashMap::with_capacity(verts.len());
    for (i, r) in verts.iter().enumerate() {
        let h = txn.associate_vertex(*r)?;
        app.push(app_id_of(&txn, &h)?);
        adj.push(txn.get_neighbors(&h, EdgeMask::ALL, None)?);
        index.insert(r.raw(), i);
    }
    let n_global = db.comm().allreduce(verts.len() as u64, ReduceOp::Sum)?;
    txn.close(Decision::Commit)?;
    Ok(LocalGraph { verts, app, adj, index, n_global })
}

/// Sum one f64 per rank into an identical total on every rank. Values are
/// combined in rank order, so the result is deterministic.
pub fn allsum_f64(ex: &Exchanger, db: &Db, x: f64) -> Result<f64> {
    let msgs: Vec<(RankId, u64)> =
        (0..db.nranks()).map(|d| (RankId(d as u16), x.to_bits())).collect();
    let got = ex.route(msgs)?;
    Ok(got.into_iter().map(f64::from_bits).sum())
}

/// Breadth-first search from `root_app` over the undirected view. Returns
/// this rank's portion of the depth map, keyed by application ID.
pub fn run_bfs(db: &Db, g: &LocalGraph, ex: &Exchanger, root_app: u64) -> Result<BTreeMap<u64, u64>> {
    let root_here = g.app.iter().position(|a| *a == root_app);
    if db.comm().allreduce(root_here.is_some() as u64, ReduceOp::Max)? == 0 {
        return Err(GdiError::NotFound(format!("bfs root {root_app}")));
    }
    let mut depth = vec![u64::MAX; g.verts.len()];
    let mut frontier: Vec<usize> = Vec::new();
    if let Some(i) = root_here {
        depth[i] = 0;
        frontier.push(i);
    }
    let mut level = 0u64;
    loop {
        let msgs = frontier
            .iter()
            .flat_map(|&i| g.adj[i].iter().map(|nb| (nb.rank(), nb.raw())))
            .collect::<Vec<_>>();
        let received = ex.route(msgs)?;
        level += 1;
        let mut next = Vec::new();
        for raw in received {
            let &i = g.index.get(&raw).expect("routed vertex is local");
            if depth[i] == u64::MAX {
                depth[i] = level;
                next.push(i);
            }
        }
        if db.comm().allreduce(next.len() as u64, ReduceOp::Sum)? == 0 {
            break;
        }
        frontier = next;
    }
    Ok(g.app
        .iter()
        .zip(&depth)
        .filter(|(_, d)| **d != u64::MAX)
        .map(|(a, d)| (*a, *d))
        .collect())
}

/// Vertices within `k` hops of the root (this rank's portion).
pub fn run_khop(db: &Db, g: &LocalGraph, ex: &Exchanger, root_app: u64, k: u64) -> Result<BTreeSet<u64>> {
    let depths = run_bfs(db, g, ex, root_app)?;
    Ok(depths.into_iter().filter(|(_, d)| *d <= k).map(|(a, _)| a).collect())
}

/// Fixed-iteration synchronous PageRank with dangling-mass redistribution
/// over the undirected view. Returns (local scores by app id, final global
/// score sum).
pub fn run_pagerank(
    db: &Db,
    g: &LocalGraph,
    ex: &Exchanger,
    iters: u32,
    damping: f64,
) -> Result<(BTreeMap<u64, f64>, f64)> {
    let n = g.n_global as f64;
    let mut score = vec![1.0 / n; g.verts.len()];
    for _ in 0..iters {
        let dangling_local: f64 =
            g.adj.iter().zip(&score).filter(|(a, _)| a.is_empty()).map(|(_, s)| *s).sum();
        let dangling = allsum_f64(ex, db, dangling_local)?;

        // Contributions as (ref, bits) pairs; pair order survives routing.
        let mut outgoing: Vec<Vec<u64>> = (0..db.nranks()).map(|_| Vec::new()).collect();
        for (i, nbs) in g.adj.iter().enumerate() {
            if nbs.is_empty() {
                continue;
            }
            let c = score[i] / nbs.len() as f64;
            for nb in nbs {
                let out = &mut outgoing[nb.rank().as_usize()];
                out.push(nb.raw());
                out.push(c.to_bits());
            }
        }
        let received = ex.exchange(&outgoing)?;
        let mut incoming = vec![0.0f64; g.verts.len()];
        for stream in received {
            for pair in stream.chunks(2) {
                let i = g.index[&pair[0]];
                incoming[i] += f64::from_bits(pair[1]);
            }
        }
        for (i, s) in score.iter_mut().enumerate() {
            *s = (1.0 - damping) / n + damping * (incoming[i] + dangling / n);
        }
    }
    let total = allsum_f64(ex, db, score.iter().sum())?;
    Ok((g.app.iter().zip(&score).map(|(a, s)| (*a, *s)).collect(), total))
}

/// Min-label propagation rounds shared by WCC (to fixpoint) and CDLP
/// (bounded rounds). Labels start as application IDs.
fn min_label_rounds(
    db: &Db,
    g: &LocalGraph,
    ex: &Exchanger,
    max_rounds: Option<u64>,
) -> Result<BTreeMap<u64, u64>> {
    let mut label: Vec<u64> = g.app.clone();
    let mut round = 0u64;
    loop {
        if max_rounds.is_some_and(|m| round >= m) {
            break;
        }
        let mut outgoing: Vec<Vec<u64>> = (0..db.nranks()).map(|_| Vec::new()).collect();
        for (i, nbs) in g.adj.iter().enumerate() {
            for nb in nbs {
                let out = &mut outgoing[nb.rank().as_usize()];
                out.push(nb.raw());
                out.push(label[i]);
            }
        }
        let received = ex.exchange(&outgoing)?;
        let mut changed = 0u64;
        let mut next = label.clone();
        for stream in received {
            for pair in stream.chunks(2) {
                let i = g.index[&pair[0]];
                if pair[1] < next[i] {
                    next[i] = pair[1];
                }
            }
        }
        for (a, b) in label.iter().zip(&next) {
            if a != b {
                changed += 1;
            }
        }
        label = next;
        round += 1;
        let global_changed = db.comm().allreduce(changed, ReduceOp::Sum)?;
        if max_rounds.is_none() && global_changed == 0 {
            break;
        }
    }
    Ok(g.app.iter().zip(&label).map(|(a, l)| (*a, *l)).collect())
}

/// Weakly connected components: every vertex ends with the minimum
/// application ID of its component.
pub fn run_wcc(db: &Db, g: &LocalGraph, ex: &Exchanger) -> Result<BTreeMap<u64, u64>> {
    min_label_rounds(db, g, ex, None)
}

/// Community detection by synchronous min-label propagation for a fixed
/// number of rounds.
pub fn run_cdlp(db: &Db, g: &LocalGraph, ex: &Exchanger, iters: u64) -> Result<BTreeMap<u64, u64>> {
    min_label_rounds(db, g, ex, Some(iters))
}

/// Local clustering coefficient per vertex: triangles / (d * (d-1) / 2)
/// over the simple undirected view (duplicate edges and self-loops are
/// ignored). Remote adjacency is read through the engine inside one
/// collective read transaction.
pub fn run_lcc(db: &Db, g: &LocalGraph) -> Result<BTreeMap<u64, f64>> {
    let txn = db.start_collective_transaction(TxnMode::Read)?;
    let mut cache: HashMap<u64, Vec<u64>> = HashMap::new();
    let mut out = BTreeMap::new();
    for (i, r) in g.verts.iter().enumerate() {
        let mut own: Vec<u64> =
            g.adj[i].iter().map(|nb| nb.raw()).filter(|raw| *raw != r.raw()).collect();
        own.sort_unstable();
        own.dedup();
        let d = own.len();
        let lcc = if d < 2 {
            0.0
        } else {
            let mut tri = 0u64;
            for nb_raw in &own {
                if !cache.contains_key(nb_raw) {
                    let h = txn.associate_vertex(GlobalRef::from_raw(*nb_raw))?;
                    let mut set: Vec<u64> = txn
                        .get_neighbors(&h, EdgeMask::ALL, None)?
                        .into_iter()
                        .map(|x| x.raw())
                        .filter(|x| *x != *nb_raw)
                        .collect();
                    set.sort_unstable();
                    set.dedup();
                    cache.insert(*nb_raw, set);
                }
                tri += sorted_intersection_len(&own, &cache[nb_raw]);
            }
            // Each triangle is counted twice (once per adjacent pair).
            (tri / 2) as f64 / (d * (d - 1) / 2) as f64
        };
        out.insert(g.app[i], lcc);
    }
    txn.close(Decision::Commit)?;
    Ok(out)
}

fn sorted_intersection_len(a: &[u64], b: &[u64]) -> u64 {
    let (mut i, mut j, mut n) = (0usize, 0usize, 0u64);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// Affine map applied after aggregation in the GCN forward pass.
#[derive(Clone, Copy, Debug)]
pub enum Affine {
    Identity,
    Seeded(u64),
}

impl Affine {
    /// Row-major weight matrix and bias for feature dimension `dim`.
    pub fn materialize(&self, dim: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
        match self {
            Affine::Identity => {
                let mut w = vec![vec![0.0; dim]; dim];
                for (i, row) in w.iter_mut().enumerate() {
                    row[i] = 1.0;
                }
                (w, vec![0.0; dim])
            }
            Affine::Seeded(seed) => {
                let unit = |x: u64| (x as f64 / u64::MAX as f64) - 0.5;
                let w = (0..dim)
                    .map(|i| {
                        (0..dim)
                            .map(|j| unit(mix64(seed ^ ((i as u64) << 32) ^ j as u64)) / dim as f64)
                            .collect()
                    })
                    .collect();
                let b = (0..dim).map(|i| unit(mix64(seed ^ 0xb1a5 ^ i as u64)) / 10.0).collect();
                (w, b)
            }
        }
    }
}

/// Create the feature-vector property type and give every vertex a
/// deterministic initial feature vector derived from its application ID.
pub fn gcn_setup(db: &Db, dim: usize, seed: u64) -> Result<PropType> {
    let ptype = db.create_property_type(PropTypeDesc {
        name: "feature_vec".into(),
        entity: EntityKind::Single,
        datatype: Datatype::F64,
        size: SizeLimit::Fixed(dim as u32),
    })?;
    let txn = db.start_collective_transaction(TxnMode::Write)?;
    for r in db.live_vertices_local() {
        let h = txn.associate_vertex(r)?;
        let app = app_id_of(&txn, &h)?;
        let feats = initial_features(seed, app, dim);
        txn.add_property(&h, ptype, &PropValue::F64(feats))?;
    }
    txn.close(Decision::Commit)?;
    Ok(ptype)
}

pub fn initial_features(seed: u64, app: u64, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|i| (mix64(seed ^ mix64(app) ^ (i as u64) << 8) as f64 / u64::MAX as f64) - 0.5)
        .collect()
}

/// GCN forward pass: per layer, every vertex sums its own and its
/// neighbors' feature vectors, applies the affine map and a ReLU, and
/// writes the result back; one collective write transaction per layer, so
/// all reads see the previous layer. Requires a missing-free feature
/// property.
pub fn run_gcn(
    db: &Db,
    g: &LocalGraph,
    ptype: PropType,
    layers: u32,
    affine: Affine,
    dim: usize,
) -> Result<BTreeMap<u64, Vec<f64>>> {
    let (w, b) = affine.materialize(dim);
    for _ in 0..layers {
        let txn = db.start_collective_transaction(TxnMode::Write)?;
        // Aggregation phase reads only committed (previous layer) state.
        let mut cache: HashMap<u64, Vec<f64>> = HashMap::new();
        let mut fetch = |txn: &Transaction<'_>, r: GlobalRef| -> Result<Vec<f64>> {
            if let Some(v) = cache.get(&r.raw()) {
                return Ok(v.clone());
            }
            let h = txn.associate_vertex(r)?;
            let vals = txn.get_properties(&h, ptype)?;
            let feats = match vals.first() {
                Some(PropValue::F64(f)) => f.clone(),
                _ => return Err(GdiError::NotFound("feature vector property".into())),
            };
            cache.insert(r.raw(), feats.clone());
            Ok(feats)
        };
        let mut updates: Vec<Vec<f64>> = Vec::with_capacity(g.verts.len());
        for (i, r) in g.verts.iter().enumerate() {
            let mut agg = fetch(&txn, *r)?;
            for nb in &g.adj[i] {
                let nf = fetch(&txn, *nb)?;
                for (a, x) in agg.iter_mut().zip(&nf) {
                    *a += x;
                }
            }
            let mut out = vec![0.0; dim];
            for (row, o) in w.iter().zip(out.iter_mut()) {
                *o = row.iter().zip(&agg).map(|(wij, aj)| wij * aj).sum::<f64>();
            }
            for (o, bi) in out.iter_mut().zip(&b) {
                *o = (*o + bi).max(0.0);
            }
            updates.push(out);
        }
        for (r, feats) in g.verts.iter().zip(updates) {
            let h = txn.associate_vertex(*r)?;
            txn.update_property(&h, ptype, &PropValue::F64(feats))?;
        }
        txn.close(Decision::Commit)?;
    }

    // Collect final features.
    let txn = db.start_collective_transaction(TxnMode::Read)?;
    let mut out = BTreeMap::new();
    for (i, r) in g.verts.iter().enumerate() {
        let h = txn.associate_vertex(*r)?;
        match txn.get_properties(&h, ptype)?.into_iter().next() {
            Some(PropValue::F64(f)) => {
                out.insert(g.app[i], f);
            }
            _ => return Err(GdiError::NotFound("feature vector property".into())),
        }
    }
    txn.close(Decision::Commit)?;
    Ok(out)
}
