//! DNF constraints and explicit indexes.
//!
//! A constraint is a disjunction of subconstraints; a subconstraint is a
//! conjunction of label conditions (`has` / `has-not`) and property
//! comparisons. The empty constraint matches everything. Property
//! conditions on multi-entity types use existential semantics: the
//! condition holds if any entry satisfies the comparison.
//!
//! An explicit index associates a label set and a property-type set with a
//! backing hash table that maps each label/property-type key to the refs of
//! member vertices. A vertex is indexed iff it carries at least one label
//! or one property type from the associated sets.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::sync::RwLock;

use crate::blocks::GlobalRef;
use crate::dht::{hash_bytes, DhtTable};
use crate::error::{GdiError, Result};
use crate::graph::HolderImage;
use crate::meta::{Catalog, Label, PropType, PropValue};

/// Label condition operator.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum LabelOp {
    Has,
    HasNot,
}

/// Property comparison operator.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl CmpOp {
    fn admits(self, ord: Ordering) -> bool {
        match self {
            CmpOp::Eq => ord == Ordering::Equal,
            CmpOp::Ne => ord != Ordering::Equal,
            CmpOp::Lt => ord == Ordering::Less,
            CmpOp::Le => ord != Ordering::Greater,
            CmpOp::Gt => ord == Ordering::Greater,
            CmpOp::Ge => ord != Ordering::Less,
        }
    }
}

/// A conjunction of conditions.
#[derive(Clone, Debug, Default)]
pub struct Subconstraint {
    pub label_conds: Vec<(Label, LabelOp)>,
    pub prop_conds: Vec<(PropType, CmpOp, PropValue)>,
}

impl Subconstraint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_label(mut self, label: Label, op: LabelOp) -> Self {
        self.label_conds.push((label, op));
        self
    }

    pub fn with_prop(mut self, ptype: PropType, op: CmpOp, value: PropValue) -> Self {
        self.prop_conds.push((ptype, op, value));
        self
    }
}

/// Disjunction of subconstraints; empty matches every object.
#[derive(Clone, Debug, Default)]
pub struct Constraint {
    pub subs: Vec<Subconstraint>,
}

impl Constraint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_sub(mut self, sub: Subconstraint) -> Self {
        self.subs.push(sub);
        self
    }

    /// Single-subconstraint convenience: `has label`.
    pub fn has_label(label: Label) -> Self {
        Constraint::new().with_sub(Subconstraint::new().with_label(label, LabelOp::Has))
    }

    /// A constraint referencing freed metadata is stale and must not be
    /// evaluated.
    pub fn is_stale(&self, cat: &Catalog) -> bool {
        for sub in &self.subs {
            for (l, _) in &sub.label_conds {
                if !cat.has_label_id(l.int_id) {
                    return true;
                }
            }
            for (p, _, _) in &sub.prop_conds {
                if !cat.has_prop_id(p.int_id) {
                    return true;
                }
            }
        }
        false
    }
}

/// Object view a constraint can be evaluated against: a full holder image
/// or a bare label list (lightweight edges).
#[derive(Clone, Copy)]
pub enum ObjView<'a> {
    Image(&'a HolderImage),
    Labels(&'a [u32]),
}

impl ObjView<'_> {
    fn has_label(&self, int_id: u32) -> bool {
        match self {
            ObjView::Image(img) => img.has_label(int_id),
            ObjView::Labels(ls) => ls.contains(&int_id),
        }
    }

    fn prop_payloads(&self, ptype_id: u32) -> Vec<&[u8]> {
        match self {
            ObjView::Image(img) => img.prop_payloads(ptype_id),
            ObjView::Labels(_) => Vec::new(),
        }
    }
}

/// Pure DNF evaluation of a constraint over an object's labels and
/// properties.
pub fn eval_constraint(c: &Constraint, cat: &Catalog, obj: ObjView<'_>) -> Result<bool> {
    if c.is_stale(cat) {
        return Err(GdiError::StaleConstraint);
    }
    if c.subs.is_empty() {
        return Ok(true);
    }
    'subs: for sub in &c.subs {
        for (label, op) in &sub.label_conds {
            let has = obj.has_label(label.int_id);
            let want = match op {
                LabelOp::Has => has,
                LabelOp::HasNot => !has,
            };
            if !want {
                continue 'subs;
            }
        }
        for (ptype, op, value) in &sub.prop_conds {
            let desc = cat.prop_desc(*ptype)?;
            if value.datatype() != desc.datatype {
                return Err(GdiError::DatatypeMismatch(format!(
                    "constraint compares {:?} against {:?} property {:?}",
                    value.datatype(),
                    desc.datatype,
                    desc.name
                )));
            }
            // Existential: any entry of the type may satisfy the comparison.
            let mut any = false;
            for payload in obj.prop_payloads(ptype.int_id) {
                let stored = PropValue::from_payload(desc.datatype, payload)?;
                if stored.compare(value).is_some_and(|ord| op.admits(ord)) {
                    any = true;
                    break;
                }
            }
            if !any {
                continue 'subs;
            }
        }
        return Ok(true);
    }
    Ok(false)
}

/// Key under which vertices with a given label are indexed.
pub fn index_key_label(int_id: u32) -> u64 {
    hash_bytes(0x11, &int_id.to_le_bytes()) % crate::dht::RESERVED_KEY
}

/// Key under which vertices carrying a given property type are indexed.
pub fn index_key_ptype(int_id: u32) -> u64 {
    hash_bytes(0x22, &int_id.to_le_bytes()) % crate::dht::RESERVED_KEY
}

/// Shared state of one explicit index. The label/property-type sets only
/// change inside collective calls.
pub struct IndexCore {
    pub id: u64,
    sets: RwLock<(BTreeSet<u32>, BTreeSet<u32>)>,
    pub table: DhtTable,
}

impl IndexCore {
    pub fn new(id: u64, table: DhtTable) -> Self {
        IndexCore { id, sets: RwLock::new((BTreeSet::new(), BTreeSet::new())), table }
    }

    pub fn label_set(&self) -> BTreeSet<u32> {
        self.sets.read().unwrap().0.clone()
    }

    pub fn ptype_set(&self) -> BTreeSet<u32> {
        self.sets.read().unwrap().1.clone()
    }

    pub fn add_ids(&self, labels: &[u32], ptypes: &[u32]) {
        let mut s = self.sets.write().unwrap();
        s.0.extend(labels.iter().copied());
        s.1.extend(ptypes.iter().copied());
    }

    pub fn remove_ids(&self, labels: &[u32], ptypes: &[u32]) {
        let mut s = self.sets.write().unwrap();
        for l in labels {
            s.0.remove(l);
        }
        for p in ptypes {
            s.1.remove(p);
        }
    }

    /// Index keys a vertex with the given live labels/ptypes belongs under.
    pub fn membership_keys(&self, labels: &BTreeSet<u32>, ptypes: &BTreeSet<u32>) -> Vec<u64> {
        let s = self.sets.read().unwrap();
        let mut keys = Vec::new();
        for l in s.0.intersection(labels) {
            keys.push(index_key_label(*l));
        }
        for p in s.1.intersection(ptypes) {
            keys.push(index_key_ptype(*p));
        }
        keys
    }

    /// All member vertex refs, deduplicated; optionally restricted to one
    /// home rank.
    pub fn member_refs(&self, only_rank: Option<crate::rma::RankId>) -> Result<Vec<GlobalRef>> {
        let s = self.sets.read().unwrap();
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        let keys: Vec<u64> = s
            .0
            .iter()
            .map(|l| index_key_label(*l))
            .chain(s.1.iter().map(|p| index_key_ptype(*p)))
            .collect();
        drop(s);
        for key in keys {
            for raw in self.table.lookup_all(key)? {
                let r = GlobalRef::from_raw(raw);
                if only_rank.is_some_and(|rk| r.rank() != rk) {
                    continue;
                }
                if seen.insert(raw) {
                    out.push(r);
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meta::{Datatype, EntityKind, PropTypeDesc, SizeLimit};

    fn catalog() -> (Catalog, Label, Label, PropType) {
        let mut cat = Catalog::default();
        let person = cat.add_label("Person").unwrap();
        let car = cat.add_label("Car").unwrap();
        let age = cat
            .add_prop(PropTypeDesc {
                name: "age".into(),
                entity: EntityKind::Single,
                datatype: Datatype::U64,
                size: SizeLimit::Fixed(1),
            })
            .unwrap();
        (cat, person, car, age)
    }

    #[test]
    fn empty_constraint_matches_everything() {
        let (cat, ..) = catalog();
        let img = HolderImage::new_vertex(b"v");
        assert!(eval_constraint(&Constraint::new(), &cat, ObjView::Image(&img)).unwrap());
    }

    #[test]
    fn person_and_age_over_30() {
        let (cat, person, _, age) = catalog();
        let c = Constraint::new().with_sub(
            Subconstraint::new()
                .with_label(person, LabelOp::Has)
                .with_prop(age, CmpOp::Gt, PropValue::u64(30)),
        );
        let mut img = HolderImage::new_vertex(b"v");
        img.add_label(person.int_id).unwrap();
        img.add_prop(age.int_id, PropValue::u64(31).to_payload());
        assert!(eval_constraint(&c, &cat, ObjView::Image(&img)).unwrap());

        let mut young = HolderImage::new_vertex(b"w");
        young.add_label(person.int_id).unwrap();
        young.add_prop(age.int_id, PropValue::u64(30).to_payload());
        assert!(!eval_constraint(&c, &cat, ObjView::Image(&young)).unwrap());
    }

    #[test]
    fn disjunction_and_negation() {
        let (cat, person, car, _) = catalog();
        let c = Constraint::new()
            .with_sub(Subconstraint::new().with_label(car, LabelOp::Has))
            .with_sub(Subconstraint::new().with_label(person, LabelOp::HasNot));
        let mut p = HolderImage::new_vertex(b"p");
        p.add_label(person.int_id).unwrap();
        assert!(!eval_constraint(&c, &cat, ObjView::Image(&p)).unwrap());
        p.add_label(car.int_id).unwrap();
        assert!(eval_constraint(&c, &cat, ObjView::Image(&p)).unwrap());
        let empty = HolderImage::new_vertex(b"e");
        assert!(eval_constraint(&c, &cat, ObjView::Image(&empty)).unwrap());
    }

    #[test]
    fn multi_entity_props_are_existential() {
        let (mut cat, ..) = catalog();
        let tags = cat
            .add_prop(PropTypeDesc {
                name: "score".into(),
                entity: EntityKind::Multi,
                datatype: Datatype::U64,
                size: SizeLimit::None,
            })
            .unwrap();
        let c = Constraint::new()
            .with_sub(Subconstraint::new().with_prop(tags, CmpOp::Ge, PropValue::u64(10)));
        let mut img = HolderImage::new_vertex(b"v");
        img.add_prop(tags.int_id, PropValue::u64(3).to_payload());
        assert!(!eval_constraint(&c, &cat, ObjView::Image(&img)).unwrap());
        img.add_prop(tags.int_id, PropValue::u64(12).to_payload());
        assert!(eval_constraint(&c, &cat, ObjView::Image(&img)).unwrap());
    }

    #[test]
    fn stale_and_mismatched_constraints_error() {
        let (mut cat, person, _, age) = catalog();
        let c = Constraint::has_label(person);
        cat.remove_label(person).unwrap();
        assert!(c.is_stale(&cat));
        let img = HolderImage::new_vertex(b"v");
        assert!(matches!(
            eval_constraint(&c, &cat, ObjView::Image(&img)),
            Err(GdiError::StaleConstraint)
        ));

        let bad = Constraint::new()
            .with_sub(Subconstraint::new().with_prop(age, CmpOp::Eq, PropValue::text("x")));
        assert!(matches!(
            eval_constraint(&bad, &cat, ObjView::Image(&img)),
            Err(GdiError::DatatypeMismatch(_))
        ));
    }

    #[test]
    fn dnf_agrees_with_truth_table_oracle() {
        use rand::{Rng, SeedableRng};
        let mut cat = Catalog::default();
        let labels: Vec<Label> = (0..4).map(|i| cat.add_label(&format!("L{i}")).unwrap()).collect();
        let props: Vec<PropType> = (0..3)
            .map(|i| {
                cat.add_prop(PropTypeDesc {
                    name: format!("p{i}"),
                    entity: EntityKind::Single,
                    datatype: Datatype::I64,
                    size: SizeLimit::Fixed(1),
                })
                .unwrap()
            })
            .collect();

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for _ in 0..1000 {
            // Random object.
            let mut img = HolderImage::new_vertex(b"o");
            let mut have_labels = Vec::new();
            for l in &labels {
                if rng.gen_bool(0.5) {
                    img.add_label(l.int_id).unwrap();
                    have_labels.push(l.int_id);
                }
            }
            let mut vals = Vec::new();
            for p in &props {
                let v = rng.gen_range(-5i64..5);
                img.add_prop(p.int_id, PropValue::i64(v).to_payload());
                vals.push(v);
            }
            // Random formula.
            let mut c = Constraint::new();
            let n_subs = rng.gen_range(0..3);
            let mut expect = n_subs == 0;
            for _ in 0..n_subs {
                let mut sub = Subconstraint::new();
                let mut sub_true = true;
                for _ in 0..rng.gen_range(0..3usize) {
                    let l = labels[rng.gen_range(0..labels.len())];
                    let op = if rng.gen_bool(0.5) { LabelOp::Has } else { LabelOp::HasNot };
                    let has = have_labels.contains(&l.int_id);
                    sub_true &= match op {
                        LabelOp::Has => has,
                        LabelOp::HasNot => !has,
                    };
                    sub = sub.with_label(l, op);
                }
                for _ in 0..rng.gen_range(0..3usize) {
                    let pi = rng.gen_range(0..props.len());
                    let cmp = [CmpOp::Eq, CmpOp::Ne, CmpOp::Lt, CmpOp::Le, CmpOp::Gt, CmpOp::Ge]
                        [rng.gen_range(0..6)];
                    let rhs = rng.gen_range(-5i64..5);
                    sub_true &= cmp.admits(vals[pi].cmp(&rhs));
                    sub = sub.with_prop(props[pi], cmp, PropValue::i64(rhs));
                }
                expect |= sub_true;
                c = c.with_sub(sub);
            }
            assert_eq!(
                eval_constraint(&c, &cat, ObjView::Image(&img)).unwrap(),
                expect,
                "formula {c:?} on labels {have_labels:?} vals {vals:?}"
            );
        }
    }
}
