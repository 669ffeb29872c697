#![allow(dead_code)]

//! Sequential reference implementations used as oracles.
//!
//! They operate on application-ID adjacency lists built from a canonical
//! edge dump and share no code with the distributed implementations they
//! check.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

/// Undirected multigraph adjacency (parallel edges preserved, self-loops
/// dropped) from directed canonical triples.
pub fn undirected_adj(vertices: &[u64], edges: &[(u64, u64, u32)]) -> BTreeMap<u64, Vec<u64>> {
    let mut adj: BTreeMap<u64, Vec<u64>> = vertices.iter().map(|v| (*v, Vec::new())).collect();
    for (u, v, _) in edges {
        if u == v {
            continue;
        }
        adj.get_mut(u).unwrap().push(*v);
        adj.get_mut(v).unwrap().push(*u);
    }
    adj
}

pub fn oracle_bfs(adj: &BTreeMap<u64, Vec<u64>>, root: u64) -> BTreeMap<u64, u64> {
    let mut depth = BTreeMap::new();
    let mut queue = VecDeque::new();
    depth.insert(root, 0u64);
    queue.push_back(root);
    while let Some(v) = queue.pop_front() {
        let d = depth[&v];
        for nb in &adj[&v] {
            if !depth.contains_key(nb) {
                depth.insert(*nb, d + 1);
                queue.push_back(*nb);
            }
        }
    }
    depth
}

pub fn oracle_khop(adj: &BTreeMap<u64, Vec<u64>>, root: u64, k: u64) -> BTreeSet<u64> {
    oracle_bfs(adj, root).into_iter().filter(|(_, d)| *d <= k).map(|(v, _)| v).collect()
}

pub fn oracle_pagerank(
    adj: &BTreeMap<u64, Vec<u64>>,
    iters: u32,
    damping: f64,
) -> BTreeMap<u64, f64> {
    let n = adj.len() as f64;
    let mut score: BTreeMap<u64, f64> = adj.keys().map(|v| (*v, 1.0 / n)).collect();
    for _ in 0..iters {
        let dangling: f64 = adj.iter().filter(|(_, nb)| nb.is_empty()).map(|(v, _)| score[v]).sum();
        let mut incoming: BTreeMap<u64, f64> = adj.keys().map(|v| (*v, 0.0)).collect();
        for (v, nbs) in adj {
            if nbs.is_empty() {
                continue;
            }
            let c = score[v] / nbs.len() as f64;
            for nb in nbs {
                *incoming.get_mut(nb).unwrap() += c;
            }
        }
        for (v, s) in score.iter_mut() {
            *s = (1.0 - damping) / n + damping * (incoming[v] + dangling / n);
        }
    }
    score
}

/// Synchronous min-label propagation; `rounds` of None runs to fixpoint
/// (weakly connected components).
pub fn oracle_min_label(adj: &BTreeMap<u64, Vec<u64>>, rounds: Option<u64>) -> BTreeMap<u64, u64> {
    let mut label: BTreeMap<u64, u64> = adj.keys().map(|v| (*v, *v)).collect();
    let mut round = 0;
    loop {
        if rounds.is_some_and(|m| round >= m) {
            break;
        }
        let mut next = label.clone();
        let mut changed = false;
        for (v, nbs) in adj {
            for nb in nbs {
                if label[nb] < next[v] {
                    *next.get_mut(v).unwrap() = label[nb];
                    changed = true;
                }
            }
        }
        label = next;
        round += 1;
        if rounds.is_none() && !changed {
            break;
        }
    }
    label
}

pub fn oracle_lcc(adj: &BTreeMap<u64, Vec<u64>>) -> BTreeMap<u64, f64> {
    let simple: BTreeMap<u64, BTreeSet<u64>> = adj
        .iter()
        .map(|(v, nbs)| (*v, nbs.iter().copied().filter(|n| n != v).collect()))
        .collect();
    simple
        .iter()
        .map(|(v, set)| {
            let d = set.len();
            if d < 2 {
                return (*v, 0.0);
            }
            let mut tri = 0u64;
            for u in set {
                tri += set.intersection(&simple[u]).count() as u64;
            }
            (*v, (tri / 2) as f64 / (d * (d - 1) / 2) as f64)
        })
        .collect()
}

/// Dense GCN forward reference: agg = own + neighbor sum (with edge
/// multiplicity), out = relu(W agg + b), per layer.
pub fn oracle_gcn_dense(
    adj: &BTreeMap<u64, Vec<u64>>,
    init: &BTreeMap<u64, Vec<f64>>,
    w: &[Vec<f64>],
    b: &[f64],
    layers: u32,
) -> BTreeMap<u64, Vec<f64>> {
    let dim = b.len();
    let mut h = init.clone();
    for _ in 0..layers {
        let mut next = BTreeMap::new();
        for (v, nbs) in adj {
            let mut agg = h[v].clone();
            for nb in nbs {
                for (a, x) in agg.iter_mut().zip(&h[nb]) {
                    *a += x;
                }
            }
            let mut out = vec![0.0; dim];
            for (r, o) in w.iter().zip(out.iter_mut()) {
                *o = r.iter().zip(&agg).map(|(wij, aj)| wij * aj).sum::<f64>();
            }
            for (o, bi) in out.iter_mut().zip(b) {
                *o = (*o + bi).max(0.0);
            }
            next.insert(*v, out);
        }
        h = next;
    }
    h
}
