//! Business-intelligence style aggregation: count persons over 30 that own
//! a red car.
//!
//! The query plan follows the storage-level control flow directly: fetch
//! the locally indexed Person vertices, filter on the age property, expand
//! along OWN-labeled outgoing edges, check the Car label and the color
//! property, then reduce the per-rank counts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gdi::db::Db;
use gdi::error::Result;
use gdi::graph::EdgeMask;
use gdi::meta::{Datatype, EntityKind, PropTypeDesc, PropValue, SizeLimit};
use gdi::query::{CmpOp, Constraint, IndexCore, LabelOp, Subconstraint};
use gdi::rma::{RankId, ReduceOp};
use gdi::txn::{Decision, TxnMode};
use std::sync::Arc;

pub struct BiSchema {
    pub person: gdi::meta::Label,
    pub car: gdi::meta::Label,
    pub own: gdi::meta::Label,
    pub age: gdi::meta::PropType,
    pub color: gdi::meta::PropType,
    pub person_index: Arc<IndexCore>,
}

/// Collective: build a Person/Car dataset. When `planted` is given,
/// exactly that many persons qualify (age > 30 and a red car); otherwise
/// ages, colors and ownership are random. Returns the ground-truth count.
pub fn build_dataset(db: &Db, persons: u64, cars: u64, seed: u64, planted: Option<u64>) -> Result<(BiSchema, u64)> {
    let person = db.create_label("Person")?;
    let car = db.create_label("Car")?;
    let own = db.create_label("OWN")?;
    let age = db.create_property_type(PropTypeDesc {
        name: "age".into(),
        entity: EntityKind::Single,
        datatype: Datatype::U64,
        size: SizeLimit::Fixed(1),
    })?;
    let color = db.create_property_type(PropTypeDesc {
        name: "color".into(),
        entity: EntityKind::Single,
        datatype: Datatype::Utf8,
        size: SizeLimit::Max(16),
    })?;

    // Rank 0 creates everything in one collective round; the other ranks
    // participate with empty shares (placement is round-robin anyway).
    let mut truth = 0u64;
    let txn = db.start_collective_transaction(TxnMode::Write)?;
    if db.rank() == RankId(0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Planted mode: the first half of the cars is red, the rest blue.
        let red_cars = cars / 2;
        let mut car_handles = Vec::new();
        for c in 0..cars {
            let h = txn.create_vertex(format!("car{c}").as_bytes())?;
            txn.add_label(&h, car)?;
            let is_red = match planted {
                Some(_) => c < red_cars,
                None => rng.gen_bool(0.3),
            };
            txn.add_property(&h, color, &PropValue::text(if is_red { "red" } else { "blue" }))?;
            car_handles.push((h, is_red));
        }
        for p in 0..persons {
            let h = txn.create_vertex(format!("person{p}").as_bytes())?;
            txn.add_label(&h, person)?;
            let qualifies = match planted {
                Some(k) => p < k && red_cars > 0,
                None => rng.gen_bool(0.4),
            };
            let age_v = match (planted.is_some(), qualifies) {
                (true, true) => 40,
                (true, false) => 25,
                _ => rng.gen_range(10..70),
            };
            txn.add_property(&h, age, &PropValue::u64(age_v))?;
            if !car_handles.is_empty() {
                let idx = match planted {
                    Some(_) if qualifies => (p % red_cars) as usize,
                    Some(_) => (red_cars + p % (cars - red_cars)) as usize,
                    None => rng.gen_range(0..car_handles.len()),
                };
                let (ch, red) = &car_handles[idx];
                let uid = txn.create_edge(true, &h, ch)?;
                txn.add_edge_label(uid, own)?;
                if age_v > 30 && *red {
                    truth += 1;
                }
            }
        }
    }
    txn.close(Decision::Commit)?;
    db.comm().barrier()?;
    let truth = db.comm().allreduce(truth, ReduceOp::Sum)?;
    let person_index = db.index_create(&[person], &[], 1 << 12)?;
    Ok((BiSchema { person, car, own, age, color, person_index }, truth))
}

/// Collective: run the count query; every rank returns the global count.
pub fn run_bi(db: &Db, schema: &BiSchema) -> Result<u64> {
    let mut local_count = 0u64;
    let txn = db.start_collective_transaction(TxnMode::Read)?;
    let persons = txn.index_get_local_vertices(&schema.person_index, &Constraint::new())?;
    let own_edge = Constraint::has_label(schema.own);
    let over_30 = Constraint::new().with_sub(
        Subconstraint::new().with_prop(schema.age, CmpOp::Gt, PropValue::u64(30)),
    );
    let red_car = Constraint::new().with_sub(
        Subconstraint::new()
            .with_label(schema.car, LabelOp::Has)
            .with_prop(schema.color, CmpOp::Eq, PropValue::text("red")),
    );
    for p in persons {
        let ph = txn.associate_vertex(p)?;
        if !txn.eval_constraint(&over_30, &ph)? {
            continue;
        }
        let things = txn.get_neighbors(&ph, EdgeMask::OUT, Some(&own_edge))?;
        for thing in things {
            let th = txn.associate_vertex(thing)?;
            if txn.eval_constraint(&red_car, &th)? {
                local_count += 1;
                break;
            }
        }
    }
    txn.close(Decision::Commit)?;
    db.comm().allreduce(local_count, ReduceOp::Sum)
}

/// Sequential full-scan oracle for the same predicate; ignores indexes and
/// the collective machinery entirely.
pub fn bi_full_scan_oracle(db: &Db, schema: &BiSchema) -> Result<u64> {
    let txn = db.start_transaction(TxnMode::Read);
    let mut count = 0u64;
    for vref in db.live_vertices_all() {
        let h = txn.associate_vertex(vref)?;
        if !txn.get_labels(&h)?.contains(&schema.person) {
            continue;
        }
        let age_ok = txn
            .get_properties(&h, schema.age)?
            .first()
            .is_some_and(|v| matches!(v, PropValue::U64(x) if x[0] > 30));
        if !age_ok {
            continue;
        }
        let mut owns_red = false;
        for uid in txn.get_edges(&h, EdgeMask::OUT, None)? {
            if !txn.get_edge_labels(uid)?.contains(&schema.own) {
                continue;
            }
            let (_, far) = txn.get_vertices_of_edge(uid)?;
            let fh = txn.associate_vertex(far)?;
            if txn.get_labels(&fh)?.contains(&schema.car)
                && txn
                    .get_properties(&fh, schema.color)?
                    .first()
                    .is_some_and(|v| matches!(v, PropValue::Utf8(s) if s == "red"))
            {
                owns_red = true;
                break;
            }
        }
        if owns_red {
            count += 1;
        }
    }
    txn.close(Decision::Commit)?;
    Ok(count)
}
