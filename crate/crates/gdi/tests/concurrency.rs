//! Cross-rank transaction behavior: no-wait conflicts, lock hygiene and
//! block conservation under concurrent churn.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gdi::db::run_ranks;
use gdi::error::GdiError;
use gdi::graph::EdgeMask;
use gdi::meta::{Datatype, EntityKind, PropTypeDesc, PropValue, SizeLimit};
use gdi::txn::{Decision, TxnMode, TxnOutcome};
use gdi::{EngineConfig, RankId};

fn cfg(ranks: usize) -> EngineConfig {
    EngineConfig { ranks, blocks_per_rank: 4096, index_capacity: 1 << 13, ..Default::default() }
}

#[test]
fn busy_lock_fails_the_transaction_immediately() {
    run_ranks(&cfg(2), |db| {
        let label = db.create_label("L")?;
        if db.rank() == RankId(0) {
            let w = db.start_transaction(TxnMode::Write);
            let v = w.create_vertex(b"shared")?;
            w.add_label(&v, label)?;
            w.close(Decision::Commit)?;
        }
        db.comm().barrier()?;
        let target = {
            let r = db.start_transaction(TxnMode::Read);
            let v = r.translate_vertex_id(label, b"shared")?;
            r.close(Decision::Commit)?;
            v
        };

        if db.rank() == RankId(0) {
            let w = db.start_transaction(TxnMode::Write);
            let _h = w.associate_vertex(target)?;
            db.comm().barrier()?; // lock held
            db.comm().barrier()?; // other rank done probing
            w.close(Decision::Abort)?;
        } else {
            db.comm().barrier()?;
            // Writer vs writer: busy.
            let w = db.start_transaction(TxnMode::Write);
            assert!(matches!(w.associate_vertex(target), Err(GdiError::Busy)));
            assert!(w.is_failed());
            assert_eq!(w.close(Decision::Commit)?, TxnOutcome::Aborted);
            // Reader vs writer: also busy (write lock excludes readers).
            let r = db.start_transaction(TxnMode::Read);
            assert!(matches!(r.associate_vertex(target), Err(GdiError::Busy)));
            r.close(Decision::Abort)?;
            db.comm().barrier()?;
        }
        db.comm().barrier()?;
        // After release, everyone can read.
        let r = db.start_transaction(TxnMode::Read);
        let h = r.associate_vertex(target)?;
        assert_eq!(r.get_labels(&h)?, vec![label]);
        r.close(Decision::Commit)?;
        db.comm().barrier()?;
        if db.rank() == RankId(0) {
            assert!(db.audit()?.ok());
        }
        db.comm().barrier()?;
        Ok(())
    })
    .unwrap();
}

#[test]
fn concurrent_readers_share_the_lock() {
    let failures = run_ranks(&cfg(4), |db| {
        let label = db.create_label("L")?;
        if db.rank() == RankId(0) {
            let w = db.start_transaction(TxnMode::Write);
            let v = w.create_vertex(b"hot")?;
            w.add_label(&v, label)?;
            w.close(Decision::Commit)?;
        }
        db.comm().barrier()?;
        let target = {
            let r = db.start_transaction(TxnMode::Read);
            let v = r.translate_vertex_id(label, b"hot")?;
            r.close(Decision::Commit)?;
            v
        };
        db.comm().barrier()?;
        let mut failed = 0u64;
        for _ in 0..200 {
            let r = db.start_transaction(TxnMode::Read);
            match r.associate_vertex(target) {
                Ok(h) => {
                    let _ = r.get_labels(&h)?;
                }
                Err(_) => failed += 1,
            }
            r.close(Decision::Commit)?;
        }
        db.comm().barrier()?;
        Ok(failed)
    })
    .unwrap();
    assert_eq!(failures.iter().sum::<u64>(), 0, "read-read never conflicts");
}

#[test]
fn random_churn_preserves_locks_and_blocks() {
    let n_seed = 32u32;
    run_ranks(&cfg(4), |db| {
        let label = db.create_label("Node")?;
        let score = db.create_property_type(PropTypeDesc {
            name: "score".into(),
            entity: EntityKind::Single,
            datatype: Datatype::U64,
            size: SizeLimit::Fixed(1),
        })?;
        // Seed graph from rank 0.
        if db.rank() == RankId(0) {
            let w = db.start_transaction(TxnMode::Write);
            for i in 0..n_seed {
                let v = w.create_vertex(format!("seed{i}").as_bytes())?;
                w.add_label(&v, label)?;
                w.add_property(&v, score, &PropValue::u64(0))?;
            }
            w.close(Decision::Commit)?;
        }
        db.comm().barrier()?;
        let seeds = {
            let mut s = db.live_vertices_all();
            s.sort();
            s
        };

        let mut rng = ChaCha8Rng::seed_from_u64(5000 + db.rank().0 as u64);
        let mut committed = 0u64;
        let mut failed = 0u64;
        let mut next_id = 0u64;
        for _ in 0..300 {
            let txn = db.start_transaction(TxnMode::Write);
            let op = rng.gen_range(0..5);
            let target = seeds[rng.gen_range(0..seeds.len())];
            let result: Result<(), GdiError> = (|| {
                match op {
                    0 => {
                        let h = txn.associate_vertex(target)?;
                        txn.update_property(&h, score, &PropValue::u64(rng.gen()))?;
                    }
                    1 => {
                        let h = txn.associate_vertex(target)?;
                        let _ = txn.get_properties(&h, score)?;
                    }
                    2 => {
                        let a = txn.associate_vertex(target)?;
                        let other = seeds[rng.gen_range(0..seeds.len())];
                        if other != target {
                            let b = txn.associate_vertex(other)?;
                            txn.create_edge(rng.gen_bool(0.5), &a, &b)?;
                        }
                    }
                    3 => {
                        let v = txn.create_vertex(
                            format!("r{}:{}", db.rank(), next_id).as_bytes(),
                        )?;
                        next_id += 1;
                        txn.add_label(&v, label)?;
                    }
                    _ => {
                        let h = txn.associate_vertex(target)?;
                        let _ = txn.get_edges(&h, EdgeMask::ALL, None)?;
                    }
                }
                Ok(())
            })();
            match result {
                Ok(()) => {
                    if txn.close(Decision::Commit)?.is_committed() {
                        committed += 1;
                    } else {
                        failed += 1;
                    }
                }
                Err(_) => {
                    failed += 1;
                    txn.close(Decision::Commit)?; // forced abort
                }
            }
        }
        db.comm().barrier()?;
        let committed = db.comm().allreduce(committed, gdi::ReduceOp::Sum)?;
        let failed = db.comm().allreduce(failed, gdi::ReduceOp::Sum)?;
        if db.rank() == RankId(0) {
            assert!(committed > 0, "some transactions must commit");
            // Contention exists but must not dominate at this scale.
            assert!(failed < committed, "failed {failed} vs committed {committed}");
            let audit = db.audit()?;
            assert!(audit.ok(), "{audit:?}");
        }
        db.comm().barrier()?;
        Ok(())
    })
    .unwrap();
}

#[test]
fn delete_create_churn_conserves_capacity() {
    run_ranks(&cfg(4), |db| {
        let label = db.create_label("T")?;
        let mut rng = ChaCha8Rng::seed_from_u64(77 + db.rank().0 as u64);
        let me = db.rank().0 as u64;
        let mut alive: Vec<Vec<u8>> = Vec::new();
        let mut next = 0u64;
        for _ in 0..150 {
            if alive.is_empty() || rng.gen_bool(0.6) {
                let id = format!("{me}:{next}").into_bytes();
                next += 1;
                let w = db.start_transaction(TxnMode::Write);
                let v = w.create_vertex(&id)?;
                w.add_label(&v, label)?;
                if w.close(Decision::Commit)?.is_committed() {
                    alive.push(id);
                }
            } else {
                let id = alive.swap_remove(rng.gen_range(0..alive.len()));
                let w = db.start_transaction(TxnMode::Write);
                let ok = (|| -> Result<(), GdiError> {
                    let vref = w.translate_vertex_id(label, &id)?;
                    let h = w.associate_vertex(vref)?;
                    w.free_vertex(&h)?;
                    Ok(())
                })();
                match ok {
                    Ok(()) => {
                        if !w.close(Decision::Commit)?.is_committed() {
                            alive.push(id);
                        }
                    }
                    Err(_) => {
                        w.close(Decision::Abort)?;
                        alive.push(id);
                    }
                }
            }
        }
        db.comm().barrier()?;
        let my_alive = db.comm().allreduce(alive.len() as u64, gdi::ReduceOp::Sum)?;
        if db.rank() == RankId(0) {
            assert_eq!(db.live_vertices_all().len() as u64, my_alive);
            let audit = db.audit()?;
            assert!(audit.ok(), "{audit:?}");
        }
        db.comm().barrier()?;
        Ok(())
    })
    .unwrap();
}

#[test]
fn vertex_deletion_tombstones_mirror_edges_under_contention() {
    run_ranks(&cfg(2), |db| {
        let label = db.create_label("N")?;
        if db.rank() == RankId(0) {
            let w = db.start_transaction(TxnMode::Write);
            let hub = w.create_vertex(b"hub")?;
            w.add_label(&hub, label)?;
            for i in 0..6u8 {
                let s = w.create_vertex(&[b's', i])?;
                w.add_label(&s, label)?;
                w.create_edge(true, &hub, &s)?;
                w.create_edge(false, &s, &hub)?;
            }
            w.close(Decision::Commit)?;
        }
        db.comm().barrier()?;
        if db.rank() == RankId(1) {
            let w = db.start_transaction(TxnMode::Write);
            let hub = w.translate_vertex_id(label, b"hub")?;
            let h = w.associate_vertex(hub)?;
            w.free_vertex(&h)?;
            assert!(w.close(Decision::Commit)?.is_committed());
        }
        db.comm().barrier()?;
        // Every spoke lost its edges to the hub.
        let r = db.start_transaction(TxnMode::Read);
        for i in 0..6u8 {
            let s = r.translate_vertex_id(label, &[b's', i])?;
            let h = r.associate_vertex(s)?;
            assert!(r.get_edges(&h, EdgeMask::ALL, None)?.is_empty());
        }
        r.close(Decision::Commit)?;
        db.comm().barrier()?;
        if db.rank() == RankId(0) {
            assert!(db.audit()?.ok());
        }
        db.comm().barrier()?;
        Ok(())
    })
    .unwrap();
}

#[test]
fn collective_read_transactions_are_deterministic() {
    let sums = run_ranks(&cfg(4), |db| {
        let label = db.create_label("V")?;
        let txn = db.start_collective_transaction(TxnMode::Write)?;
        for i in 0..16u32 {
            let v = txn.create_vertex(format!("{}:{i}", db.rank()).as_bytes())?;
            txn.add_label(&v, label)?;
        }
        txn.close(Decision::Commit)?;
        db.comm().barrier()?;

        // Two identical collective reads over the static graph.
        let mut sums = Vec::new();
        for _ in 0..2 {
            let txn = db.start_collective_transaction(TxnMode::Read)?;
            let mut local = 0u64;
            for vref in db.live_vertices_local() {
                let h = txn.associate_vertex(vref)?;
                local += txn.get_labels(&h)?.len() as u64;
            }
            txn.close(Decision::Commit)?;
            sums.push(db.comm().allreduce(local, gdi::ReduceOp::Sum)?);
        }
        assert_eq!(sums[0], sums[1]);
        Ok(sums[0])
    })
    .unwrap();
    assert!(sums.iter().all(|s| *s == 64));
}
