//! Database facade: wires the communication layer, block pool, internal
//! index, metadata replicas and explicit indexes together, and hands out
//! transactions.
//!
//! One `Db` value exists per rank; structures that scale with the graph are
//! sharded through the windows while catalogs and index descriptors are
//! replicated. Metadata mutations are synchronous collectives, which keeps
//! every replica identical.

use std::cell::{Ref, RefCell};
use std::collections::BTreeSet;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use crate::blocks::{BlockPool, GlobalRef};
use crate::dht::{hash_bytes, DhtTable};
use crate::error::{GdiError, Result};
use crate::graph::{fetch_logical, write_logical, HolderImage};
use crate::meta::{Catalog, Label, PropType, PropTypeDesc, PropValue, SchemaDoc, SizeLimit};
use crate::query::{index_key_label, index_key_ptype, IndexCore};
use crate::rma::{Comm, RankId, ReduceOp, RmaOptions};
use crate::txn::{Transaction, TxnKind, TxnMode};

/// Engine configuration; every rank must use identical values.
#[derive(Clone, Debug)]
pub struct EngineConfig {
    pub ranks: usize,
    /// Power of two, at least 64.
    pub block_size: usize,
    pub blocks_per_rank: usize,
    /// Total entry capacity of the internal application-ID index.
    pub index_capacity: usize,
    pub collective_timeout: Duration,
    /// Uniform simulated per-op transport delay.
    pub net_delay: Option<Duration>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            ranks: 1,
            block_size: 512,
            blocks_per_rank: 4096,
            index_capacity: 1 << 15,
            collective_timeout: Duration::from_secs(120),
            net_delay: None,
        }
    }
}

impl EngineConfig {
    pub fn rma_options(&self) -> RmaOptions {
        RmaOptions { collective_timeout: self.collective_timeout, net_delay: self.net_delay }
    }
}

pub(crate) struct DbShared {
    /// Per-rank sets of live vertex primary refs, maintained at commit.
    pub live: Vec<Mutex<BTreeSet<u64>>>,
    pub indexes: RwLock<Vec<Arc<IndexCore>>>,
    pub create_counter: AtomicU64,
    pub open_local_writers: AtomicU64,
    pub commit_seq: AtomicU64,
}

/// Per-rank database handle.
pub struct Db {
    comm: Comm,
    pool: BlockPool,
    pub(crate) index: DhtTable,
    pub(crate) shared: Arc<DbShared>,
    pub(crate) catalog: RefCell<Catalog>,
    cfg: EngineConfig,
}

impl Db {
    /// Collective: create the database over an existing communicator group.
    pub fn create(comm: Comm, cfg: EngineConfig) -> Result<Db> {
        if comm.nranks() != cfg.ranks {
            return Err(GdiError::InvalidArgument(format!(
                "config names {} ranks but communicator has {}",
                cfg.ranks,
                comm.nranks()
            )));
        }
        let pool = BlockPool::create(&comm, cfg.block_size, cfg.blocks_per_rank)?;
        let index = DhtTable::create(&comm, cfg.index_capacity, cfg.index_capacity)?;
        let shared = {
            let payload = (comm.rank().0 == 0).then(|| {
                Arc::new(DbShared {
                    live: (0..comm.nranks()).map(|_| Mutex::new(BTreeSet::new())).collect(),
                    indexes: RwLock::new(Vec::new()),
                    create_counter: AtomicU64::new(0),
                    open_local_writers: AtomicU64::new(0),
                    commit_seq: AtomicU64::new(0),
                }) as Arc<dyn std::any::Any + Send + Sync>
            });
            comm.share(0xdb_0001, payload)?.downcast::<DbShared>().expect("db shared state")
        };
        Ok(Db { comm, pool, index, shared, catalog: RefCell::new(Catalog::default()), cfg })
    }

    pub fn comm(&self) -> &Comm {
        &self.comm
    }

    pub fn rank(&self) -> RankId {
        self.comm.rank()
    }

    pub fn nranks(&self) -> usize {
        self.comm.nranks()
    }

    pub fn pool(&self) -> &BlockPool {
        &self.pool
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    /// Read view of this rank's catalog replica.
    pub fn catalog(&self) -> Ref<'_, Catalog> {
        self.catalog.borrow()
    }

    // ---- metadata (collective) ------------------------------------------

    fn agree_str(&self, tag: u64, s: &str) -> Result<()> {
        self.comm.agree(hash_bytes(tag, s.as_bytes()))?;
        Ok(())
    }

    /// Collective: create a label, replicated with an identical integer ID
    /// on every rank.
    pub fn create_label(&self, name: &str) -> Result<Label> {
        self.agree_str(0x6c, name)?;
        self.catalog.borrow_mut().add_label(name)
    }

    /// Collective: create a property type.
    pub fn create_property_type(&self, desc: PropTypeDesc) -> Result<PropType> {
        self.agree_str(0x70, &format!("{desc:?}"))?;
        self.catalog.borrow_mut().add_prop(desc)
    }

    /// Collective: ingest a JSON schema document (labels + property types).
    pub fn ingest_schema(&self, json: &str) -> Result<()> {
        let doc: SchemaDoc =
            serde_json::from_str(json).map_err(|e| GdiError::InvalidArgument(e.to_string()))?;
        for name in &doc.labels {
            self.create_label(name)?;
        }
        for prop in &doc.property_types {
            self.create_property_type(prop.to_desc())?;
        }
        Ok(())
    }

    pub fn label_from_name(&self, name: &str) -> Result<Label> {
        self.catalog.borrow().label_from_name(name)
    }

    pub fn name_of_label(&self, label: Label) -> Result<String> {
        self.catalog.borrow().name_of_label(label).map(str::to_string)
    }

    pub fn prop_from_name(&self, name: &str) -> Result<PropType> {
        self.catalog.borrow().prop_from_name(name)
    }

    /// Collective: remove a label from the catalog and eagerly from every
    /// vertex and index that carries it.
    pub fn free_label(&self, label: Label) -> Result<()> {
        self.comm.agree(label.int_id as u64)?;
        if !self.catalog.borrow().has_label_id(label.int_id) {
            // Same catalog state everywhere, so every rank errors alike.
            return Err(GdiError::NotFound(format!("label id {}", label.int_id)));
        }
        let indexes = self.shared.indexes.read().unwrap().clone();
        for raw in self.live_vertices_local_raw() {
            let primary = GlobalRef::from_raw(raw);
            let mut img = HolderImage::parse(&fetch_logical(&self.pool, primary)?)?;
            if !img.has_label(label.int_id) {
                continue;
            }
            img.remove_label(label.int_id)?;
            img.compact();
            for idx in &indexes {
                if idx.label_set().contains(&label.int_id) {
                    idx.table.delete_kv(index_key_label(label.int_id), raw)?;
                }
            }
            // Drop the translation entry for this (label, app id) pair.
            if !img.spill.is_null() {
                let key = internal_key(label.int_id, &img.app_id);
                self.index.delete_kv(key, img.spill.raw())?;
            }
            self.write_back_unlocked(primary, &mut img)?;
        }
        self.comm.barrier()?;
        for idx in &indexes {
            idx.remove_ids(&[label.int_id], &[]);
        }
        self.comm.barrier()?;
        self.catalog.borrow_mut().remove_label(label)
    }

    /// Collective: remove a property type from the catalog and its entries
    /// from every vertex, edge and index.
    pub fn free_property_type(&self, ptype: PropType) -> Result<()> {
        self.comm.agree(ptype.int_id as u64)?;
        if !self.catalog.borrow().has_prop_id(ptype.int_id) {
            return Err(GdiError::NotFound(format!("property type id {}", ptype.int_id)));
        }
        let indexes = self.shared.indexes.read().unwrap().clone();
        let mut holders = self.local_holder_refs()?;
        holders.extend(self.local_edge_holder_refs()?);
        for primary in holders {
            let mut img = HolderImage::parse(&fetch_logical(&self.pool, primary)?)?;
            if img.remove_props(ptype.int_id) == 0 {
                continue;
            }
            img.compact();
            for idx in &indexes {
                if idx.ptype_set().contains(&ptype.int_id) {
                    idx.table.delete_kv(index_key_ptype(ptype.int_id), primary.raw())?;
                }
            }
            self.write_back_unlocked(primary, &mut img)?;
        }
        self.comm.barrier()?;
        for idx in &indexes {
            idx.remove_ids(&[], &[ptype.int_id]);
        }
        self.comm.barrier()?;
        self.catalog.borrow_mut().remove_prop(ptype)
    }

    /// Collective: update a property type's limits; existing values are
    /// padded (or truncated) element-wise with `default`. Changes that
    /// would lose data without a default fail on every rank without
    /// touching any value.
    pub fn update_property_type(
        &self,
        ptype: PropType,
        new: PropTypeDesc,
        default: Option<PropValue>,
    ) -> Result<()> {
        self.agree_str(0x75, &format!("{}:{new:?}", ptype.int_id))?;
        let old = self.catalog.borrow().prop_desc(ptype)?.clone();
        if new.datatype != old.datatype {
            return Err(GdiError::DatatypeMismatch(
                "changing the datatype of a property type is not supported".into(),
            ));
        }
        if let Some(d) = &default {
            if d.datatype() != new.datatype {
                return Err(GdiError::DatatypeMismatch("default value datatype mismatch".into()));
            }
        }

        let mut holders = self.local_holder_refs()?;
        holders.extend(self.local_edge_holder_refs()?);

        // Phase 1: count violations everywhere before changing anything.
        let mut violations = 0u64;
        for primary in &holders {
            let img = HolderImage::parse(&fetch_logical(&self.pool, *primary)?)?;
            let payloads = img.prop_payloads(ptype.int_id);
            if payloads.len() > 1 && new.entity == crate::meta::EntityKind::Single {
                violations += 1;
            }
            for p in payloads {
                let v = PropValue::from_payload(old.datatype, p)?;
                if needs_resize(&v, &new.size) && default.is_none() {
                    violations += 1;
                }
            }
        }
        if self.comm.allreduce(violations, ReduceOp::Sum)? > 0 {
            return Err(GdiError::SizeViolation(
                "existing values violate the new limits and no default was given".into(),
            ));
        }

        // Phase 2: rewrite values, then the catalogs.
        for primary in &holders {
            let mut img = HolderImage::parse(&fetch_logical(&self.pool, *primary)?)?;
            let mut changed = false;
            for e in &mut img.entries {
                if e.marker != ptype.int_id {
                    continue;
                }
                let v = PropValue::from_payload(old.datatype, &e.payload)?;
                if let Some(resized) = resize_value(&v, &new.size, default.as_ref()) {
                    e.payload = resized.to_payload();
                    changed = true;
                }
            }
            if changed {
                self.write_back_unlocked(*primary, &mut img)?;
            }
        }
        self.comm.barrier()?;
        self.catalog.borrow_mut().update_prop(ptype, new)
    }

    /// Rewrite a holder image outside any transaction (collective sweeps
    /// only run while the database is quiescent).
    fn write_back_unlocked(&self, primary: GlobalRef, img: &mut HolderImage) -> Result<()> {
        let released = img.fit_blocks(self.pool.block_size(), || {
            let r = self.pool.acquire_block(primary.rank())?;
            if r.is_null() {
                return Err(GdiError::ResourceExhausted("block pool exhausted".into()));
            }
            Ok(r)
        })?;
        let extra = img.extra_blocks.clone();
        let bytes = img.serialize();
        write_logical(&self.pool, primary, &extra, &bytes)?;
        let mut ranks: Vec<RankId> = std::iter::once(primary.rank()).chain(extra.iter().map(|r| r.rank())).collect();
        ranks.sort();
        ranks.dedup();
        for r in ranks {
            self.pool.flush_data(r)?;
        }
        for r in released {
            self.pool.release_block(r)?;
        }
        Ok(())
    }

    // ---- explicit indexes (collective) ----------------------------------

    /// Collective: create an explicit index over the given label and
    /// property-type sets and populate it from the current graph.
    pub fn index_create(
        &self,
        labels: &[Label],
        ptypes: &[PropType],
        capacity: usize,
    ) -> Result<Arc<IndexCore>> {
        if labels.is_empty() && ptypes.is_empty() {
            return Err(GdiError::InvalidArgument("index needs at least one label or ptype".into()));
        }
        let mut sig = String::new();
        for l in labels {
            sig.push_str(&format!("l{},", l.int_id));
        }
        for p in ptypes {
            sig.push_str(&format!("p{},", p.int_id));
        }
        self.agree_str(0x69, &sig)?;
        self.comm.agree(capacity as u64)?;

        let table = DhtTable::create(&self.comm, capacity, capacity)?;
        let core = {
            let payload = (self.comm.rank().0 == 0).then(|| {
                let id = self.shared.indexes.read().unwrap().len() as u64;
                Arc::new(IndexCore::new(id, table.clone())) as Arc<dyn std::any::Any + Send + Sync>
            });
            self.comm.share(0xdb_0002, payload)?.downcast::<IndexCore>().expect("index core")
        };
        if self.comm.rank().0 == 0 {
            core.add_ids(
                &labels.iter().map(|l| l.int_id).collect::<Vec<_>>(),
                &ptypes.iter().map(|p| p.int_id).collect::<Vec<_>>(),
            );
            self.shared.indexes.write().unwrap().push(core.clone());
        }
        self.comm.barrier()?;
        self.index_populate_local(&core)?;
        self.comm.barrier()?;
        Ok(core)
    }

    /// Collective: extend an index's label/ptype sets and index the newly
    /// matching vertices.
    pub fn index_add(&self, idx: &Arc<IndexCore>, labels: &[Label], ptypes: &[PropType]) -> Result<()> {
        self.comm.agree(idx.id)?;
        if self.comm.rank().0 == 0 {
            idx.add_ids(
                &labels.iter().map(|l| l.int_id).collect::<Vec<_>>(),
                &ptypes.iter().map(|p| p.int_id).collect::<Vec<_>>(),
            );
        }
        self.comm.barrier()?;
        let new_label_keys: Vec<(u32, u64)> =
            labels.iter().map(|l| (l.int_id, index_key_label(l.int_id))).collect();
        let new_ptype_keys: Vec<(u32, u64)> =
            ptypes.iter().map(|p| (p.int_id, index_key_ptype(p.int_id))).collect();
        for raw in self.live_vertices_local_raw() {
            let img = HolderImage::parse(&fetch_logical(&self.pool, GlobalRef::from_raw(raw))?)?;
            let labels_here = img.labels();
            let ptypes_here = live_ptype_ids(&img);
            for (id, key) in &new_label_keys {
                if labels_here.contains(id) {
                    idx.table.insert(*key, raw)?;
                }
            }
            for (id, key) in &new_ptype_keys {
                if ptypes_here.contains(id) {
                    idx.table.insert(*key, raw)?;
                }
            }
        }
        self.comm.barrier()?;
        Ok(())
    }

    fn index_populate_local(&self, idx: &Arc<IndexCore>) -> Result<()> {
        for raw in self.live_vertices_local_raw() {
            let img = HolderImage::parse(&fetch_logical(&self.pool, GlobalRef::from_raw(raw))?)?;
            let labels: BTreeSet<u32> = img.labels().into_iter().collect();
            let ptypes = live_ptype_ids(&img);
            for key in idx.membership_keys(&labels, &ptypes) {
                idx.table.insert(key, raw)?;
            }
        }
        Ok(())
    }

    pub(crate) fn indexes(&self) -> Vec<Arc<IndexCore>> {
        self.shared.indexes.read().unwrap().clone()
    }

    // ---- transactions ----------------------------------------------------

    /// Start a local (single-rank) transaction.
    pub fn start_transaction(&self, mode: TxnMode) -> Transaction<'_> {
        if mode == TxnMode::Write {
            self.shared.open_local_writers.fetch_add(1, Ordering::SeqCst);
        }
        Transaction::new(self, mode, TxnKind::Local)
    }

    /// Collective: start a transaction replicated on every rank. Read-mode
    /// collective transactions take no locks; all participants promise not
    /// to write.
    pub fn start_collective_transaction(&self, mode: TxnMode) -> Result<Transaction<'_>> {
        self.comm.agree(match mode {
            TxnMode::Read => 1,
            TxnMode::Write => 2,
        })?;
        debug_assert_eq!(
            self.shared.open_local_writers.load(Ordering::SeqCst),
            0,
            "collective transactions require quiescence"
        );
        Ok(Transaction::new(self, mode, TxnKind::Collective))
    }

    // ---- scans & audits ---------------------------------------------------

    pub(crate) fn live_vertices_local_raw(&self) -> Vec<u64> {
        self.shared.live[self.rank().as_usize()].lock().unwrap().iter().copied().collect()
    }

    /// Whether a vertex ref currently names a live (committed) vertex.
    pub fn is_live(&self, r: GlobalRef) -> bool {
        self.shared.live[r.rank().as_usize()].lock().unwrap().contains(&r.raw())
    }

    /// Live vertices homed on the calling rank.
    pub fn live_vertices_local(&self) -> Vec<GlobalRef> {
        self.live_vertices_local_raw().into_iter().map(GlobalRef::from_raw).collect()
    }

    /// Live vertices across all ranks (quiescent use).
    pub fn live_vertices_all(&self) -> Vec<GlobalRef> {
        let mut out = Vec::new();
        for set in &self.shared.live {
            out.extend(set.lock().unwrap().iter().copied().map(GlobalRef::from_raw));
        }
        out
    }

    fn local_holder_refs(&self) -> Result<Vec<GlobalRef>> {
        Ok(self.live_vertices_local())
    }

    /// Heavyweight edge holders stored on this rank, discovered via the
    /// escalated slots of local vertices.
    fn local_edge_holder_refs(&self) -> Result<Vec<GlobalRef>> {
        let mut seen = BTreeSet::new();
        for v in self.live_vertices_all() {
            let img = HolderImage::parse(&fetch_logical(&self.pool, v)?)?;
            for (_, e) in img.live_edges(crate::graph::EdgeMask::ALL) {
                if e.escalated && e.neighbor.rank() == self.rank() {
                    seen.insert(e.neighbor.raw());
                }
            }
        }
        Ok(seen.into_iter().map(GlobalRef::from_raw).collect())
    }

    /// Quiescent audit: lock hygiene, block conservation and index reuse
    /// safety.
    pub fn audit(&self) -> Result<AuditReport> {
        let lock_violations = self.pool.lock_hygiene_violations()?;
        let free_blocks = self.pool.total_free()?;

        let mut reachable = BTreeSet::new();
        let mut edge_holders = BTreeSet::new();
        for v in self.live_vertices_all() {
            let img = HolderImage::parse(&fetch_logical(&self.pool, v)?)?;
            reachable.insert(v.raw());
            for b in &img.extra_blocks {
                reachable.insert(b.raw());
            }
            if !img.spill.is_null() {
                reachable.insert(img.spill.raw());
            }
            for (_, e) in img.live_edges(crate::graph::EdgeMask::ALL) {
                if e.escalated {
                    edge_holders.insert(e.neighbor.raw());
                }
            }
        }
        for h in edge_holders {
            let r = GlobalRef::from_raw(h);
            let img = HolderImage::parse(&fetch_logical(&self.pool, r)?)?;
            reachable.insert(h);
            for b in &img.extra_blocks {
                reachable.insert(b.raw());
            }
        }

        self.index.audit_reuse_safety()?;
        for idx in self.indexes() {
            idx.table.audit_reuse_safety()?;
        }

        Ok(AuditReport {
            lock_violations,
            free_blocks,
            reachable_blocks: reachable.len(),
            capacity: self.pool.capacity(),
        })
    }
}

/// Outcome of [`Db::audit`].
#[derive(Debug)]
pub struct AuditReport {
    pub lock_violations: Vec<GlobalRef>,
    pub free_blocks: usize,
    pub reachable_blocks: usize,
    pub capacity: usize,
}

impl AuditReport {
    pub fn ok(&self) -> bool {
        self.lock_violations.is_empty() && self.free_blocks + self.reachable_blocks == self.capacity
    }
}

/// Internal-index key for a (label, application id) pair.
pub(crate) fn internal_key(label_int_id: u32, app_id: &[u8]) -> u64 {
    hash_bytes(0x1d ^ ((label_int_id as u64) << 8), app_id) % crate::dht::RESERVED_KEY
}

/// Live property-type ids present on an image.
pub(crate) fn live_ptype_ids(img: &HolderImage) -> BTreeSet<u32> {
    img.entries
        .iter()
        .filter(|e| e.marker >= crate::meta::FIRST_INT_ID)
        .map(|e| e.marker)
        .collect()
}

fn needs_resize(v: &PropValue, size: &SizeLimit) -> bool {
    let n = v.element_count() as u32;
    match size {
        SizeLimit::None => false,
        SizeLimit::Max(m) => n > *m,
        SizeLimit::Fixed(m) => n != *m,
    }
}

/// Pad or truncate `v` to satisfy `size`, element-wise with `default`.
/// Returns None when the value already conforms.
fn resize_value(v: &PropValue, size: &SizeLimit, default: Option<&PropValue>) -> Option<PropValue> {
    if !needs_resize(v, size) {
        return None;
    }
    let target = match size {
        SizeLimit::Max(m) | SizeLimit::Fixed(m) => *m as usize,
        SizeLimit::None => return None,
    };
    fn adjust<T: Clone>(items: &[T], target: usize, pad: Option<T>) -> Vec<T> {
        let mut out: Vec<T> = items.iter().take(target).cloned().collect();
        if let Some(p) = pad {
            while out.len() < target {
                out.push(p.clone());
            }
        }
        out
    }
    Some(match v {
        PropValue::U64(xs) => PropValue::U64(adjust(
            xs,
            target,
            default.and_then(|d| match d {
                PropValue::U64(d) => d.first().copied(),
                _ => None,
            }),
        )),
        PropValue::I64(xs) => PropValue::I64(adjust(
            xs,
            target,
            default.and_then(|d| match d {
                PropValue::I64(d) => d.first().copied(),
                _ => None,
            }),
        )),
        PropValue::F64(xs) => PropValue::F64(adjust(
            xs,
            target,
            default.and_then(|d| match d {
                PropValue::F64(d) => d.first().copied(),
                _ => None,
            }),
        )),
        PropValue::Utf8(s) => {
            let pad = default.and_then(|d| match d {
                PropValue::Utf8(d) => d.bytes().next(),
                _ => None,
            });
            let bytes = adjust(s.as_bytes(), target, pad);
            PropValue::Utf8(String::from_utf8_lossy(&bytes).into_owned())
        }
        PropValue::Bytes(b) => PropValue::Bytes(adjust(
            b,
            target,
            default.and_then(|d| match d {
                PropValue::Bytes(d) => d.first().copied(),
                _ => None,
            }),
        )),
    })
}

/// Spawn one thread per rank, build a database on each, and run `f`.
/// Panics from rank threads are re-raised on the caller.
pub fn run_ranks<T, F>(cfg: &EngineConfig, f: F) -> Result<Vec<T>>
where
    F: Fn(Db) -> Result<T> + Send + Sync,
    T: Send,
{
    let comms = Comm::split(cfg.ranks, cfg.rma_options());
    let results: Vec<std::thread::Result<Result<T>>> = std::thread::scope(|s| {
        let f = &f;
        let handles: Vec<_> = comms
            .into_iter()
            .map(|c| {
                let cfg = cfg.clone();
                s.spawn(move || -> Result<T> {
                    let db = Db::create(c, cfg)?;
                    f(db)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join()).collect()
    });
    let mut out = Vec::with_capacity(results.len());
    for r in results {
        match r {
            Ok(v) => out.push(v?),
            Err(panic) => std::panic::resume_unwind(panic),
        }
    }
    Ok(out)
}
