//! Graph metadata: labels and property types, replicated on every rank.
//!
//! Each rank keeps an identical catalog replica; mutations only happen
//! inside collective calls, which keeps the replicas byte-identical. The
//! catalog stores items in a slab-backed doubly linked list (insertion
//! order) with name and integer-ID hash maps for O(1) membership.
//!
//! Integer IDs 0, 1 and 2 are reserved entry markers (unused, end-of-entries
//! and label); labels and property types share one ID space starting at 3.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{GdiError, Result};

pub const MARKER_UNUSED: u32 = 0;
pub const MARKER_LAST: u32 = 1;
pub const MARKER_LABEL: u32 = 2;
pub const FIRST_INT_ID: u32 = 3;

const NIL: u32 = u32::MAX;

/// Handle to a label; the integer ID is unique within a run and never
/// reused.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub struct Label {
    pub int_id: u32,
}

/// Handle to a property type.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub struct PropType {
    pub int_id: u32,
}

/// Whether a vertex/edge may carry at most one entry of this property type
/// or arbitrarily many.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityKind {
    Single,
    Multi,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Datatype {
    U64,
    I64,
    F64,
    Utf8,
    Bytes,
}

/// Element-count limitation of a property type. For `Utf8`/`Bytes` an
/// element is one byte.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "size", content = "limit")]
pub enum SizeLimit {
    None,
    Max(u32),
    Fixed(u32),
}

#[derive(Clone, PartialEq, Debug)]
pub struct PropTypeDesc {
    pub name: String,
    pub entity: EntityKind,
    pub datatype: Datatype,
    pub size: SizeLimit,
}

impl PropTypeDesc {
    fn validate(&self) -> Result<()> {
        if let SizeLimit::Fixed(0) | SizeLimit::Max(0) = self.size {
            return Err(GdiError::SizeViolation(format!(
                "property type {:?} declares a zero size limit",
                self.name
            )));
        }
        Ok(())
    }
}

/// A property value: a vector of elements of the declared datatype.
#[derive(Clone, PartialEq, Debug)]
pub enum PropValue {
    U64(Vec<u64>),
    I64(Vec<i64>),
    F64(Vec<f64>),
    Utf8(String),
    Bytes(Vec<u8>),
}

impl PropValue {
    pub fn u64(v: u64) -> Self {
        PropValue::U64(vec![v])
    }

    pub fn i64(v: i64) -> Self {
        PropValue::I64(vec![v])
    }

    pub fn f64(v: f64) -> Self {
        PropValue::F64(vec![v])
    }

    pub fn text(s: impl Into<String>) -> Self {
        PropValue::Utf8(s.into())
    }

    pub fn datatype(&self) -> Datatype {
        match self {
            PropValue::U64(_) => Datatype::U64,
            PropValue::I64(_) => Datatype::I64,
            PropValue::F64(_) => Datatype::F64,
            PropValue::Utf8(_) => Datatype::Utf8,
            PropValue::Bytes(_) => Datatype::Bytes,
        }
    }

    pub fn element_count(&self) -> usize {
        match self {
            PropValue::U64(v) => v.len(),
            PropValue::I64(v) => v.len(),
            PropValue::F64(v) => v.len(),
            PropValue::Utf8(s) => s.len(),
            PropValue::Bytes(b) => b.len(),
        }
    }

    pub fn to_payload(&self) -> Vec<u8> {
        match self {
            PropValue::U64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            PropValue::I64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            PropValue::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            PropValue::Utf8(s) => s.as_bytes().to_vec(),
            PropValue::Bytes(b) => b.clone(),
        }
    }

    pub fn from_payload(dt: Datatype, bytes: &[u8]) -> Result<PropValue> {
        let words = |bytes: &[u8]| -> Result<Vec<[u8; 8]>> {
            if !bytes.len().is_multiple_of(8) {
                return Err(GdiError::DatatypeMismatch(format!(
                    "payload of {} bytes is not 8-byte elements",
                    bytes.len()
                )));
            }
            Ok(bytes.chunks(8).map(|c| c.try_into().unwrap()).collect())
        };
        Ok(match dt {
            Datatype::U64 => PropValue::U64(words(bytes)?.into_iter().map(u64::from_le_bytes).collect()),
            Datatype::I64 => PropValue::I64(words(bytes)?.into_iter().map(i64::from_le_bytes).collect()),
            Datatype::F64 => PropValue::F64(words(bytes)?.into_iter().map(f64::from_le_bytes).collect()),
            Datatype::Utf8 => PropValue::Utf8(
                String::from_utf8(bytes.to_vec())
                    .map_err(|e| GdiError::DatatypeMismatch(e.to_string()))?,
            ),
            Datatype::Bytes => PropValue::Bytes(bytes.to_vec()),
        })
    }

    /// Check this value against a property type's datatype and size limits.
    pub fn conforms_to(&self, desc: &PropTypeDesc) -> Result<()> {
        if self.datatype() != desc.datatype {
            return Err(GdiError::DatatypeMismatch(format!(
                "value of type {:?} stored under {:?} ({:?})",
                self.datatype(),
                desc.name,
                desc.datatype
            )));
        }
        let n = self.element_count() as u32;
        match desc.size {
            SizeLimit::None => {}
            SizeLimit::Max(m) if n <= m => {}
            SizeLimit::Fixed(m) if n == m => {}
            _ => {
                return Err(GdiError::SizeViolation(format!(
                    "{} elements violate {:?} limit of {:?}",
                    n, desc.size, desc.name
                )))
            }
        }
        Ok(())
    }

    /// Order used by constraint comparisons: element-wise lexicographic.
    /// NaN comparisons and cross-datatype comparisons yield `None`.
    pub fn compare(&self, other: &PropValue) -> Option<std::cmp::Ordering> {
        use PropValue::*;
        match (self, other) {
            (U64(a), U64(b)) => Some(a.cmp(b)),
            (I64(a), I64(b)) => Some(a.cmp(b)),
            (F64(a), F64(b)) => a.partial_cmp(b),
            (Utf8(a), Utf8(b)) => Some(a.cmp(b)),
            (Bytes(a), Bytes(b)) => Some(a.cmp(b)),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
enum CatalogItem {
    Label { name: String, int_id: u32 },
    Prop { desc: PropTypeDesc, int_id: u32 },
}

impl CatalogItem {
    fn name(&self) -> &str {
        match self {
            CatalogItem::Label { name, .. } => name,
            CatalogItem::Prop { desc, .. } => &desc.name,
        }
    }

    fn int_id(&self) -> u32 {
        match self {
            CatalogItem::Label { int_id, .. } | CatalogItem::Prop { int_id, .. } => *int_id,
        }
    }
}

#[derive(Clone, Debug)]
struct Slot {
    prev: u32,
    next: u32,
    item: CatalogItem,
}

/// One rank's catalog replica.
#[derive(Clone, Debug)]
pub struct Catalog {
    slots: Vec<Option<Slot>>,
    free_slots: Vec<u32>,
    label_head: u32,
    label_tail: u32,
    prop_head: u32,
    prop_tail: u32,
    by_name: HashMap<String, u32>,
    by_id: HashMap<u32, u32>,
    next_int_id: u32,
}

impl Default for Catalog {
    fn default() -> Self {
        Catalog {
            slots: Vec::new(),
            free_slots: Vec::new(),
            label_head: NIL,
            label_tail: NIL,
            prop_head: NIL,
            prop_tail: NIL,
            by_name: HashMap::new(),
            by_id: HashMap::new(),
            next_int_id: FIRST_INT_ID,
        }
    }
}

impl Catalog {
    fn alloc_slot(&mut self, item: CatalogItem) -> u32 {
        let slot = Slot { prev: NIL, next: NIL, item };
        if let Some(idx) = self.free_slots.pop() {
            self.slots[idx as usize] = Some(slot);
            idx
        } else {
            self.slots.push(Some(slot));
            (self.slots.len() - 1) as u32
        }
    }

    fn push_back(&mut self, idx: u32, is_label: bool) {
        let (head, tail) = if is_label {
            (&mut self.label_head, &mut self.label_tail)
        } else {
            (&mut self.prop_head, &mut self.prop_tail)
        };
        let old_tail = *tail;
        if old_tail == NIL {
            *head = idx;
        }
        *tail = idx;
        if old_tail != NIL {
            self.slots[old_tail as usize].as_mut().unwrap().next = idx;
        }
        self.slots[idx as usize].as_mut().unwrap().prev = old_tail;
    }

    fn unlink(&mut self, idx: u32, is_label: bool) {
        let (prev, next) = {
            let s = self.slots[idx as usize].as_ref().unwrap();
            (s.prev, s.next)
        };
        if prev != NIL {
            self.slots[prev as usize].as_mut().unwrap().next = next;
        }
        if next != NIL {
            self.slots[next as usize].as_mut().unwrap().prev = prev;
        }
        let (head, tail) = if is_label {
            (&mut self.label_head, &mut self.label_tail)
        } else {
            (&mut self.prop_head, &mut self.prop_tail)
        };
        if *head == idx {
            *head = next;
        }
        if *tail == idx {
            *tail = prev;
        }
    }

    fn check_name_free(&self, name: &str) -> Result<()> {
        if self.by_name.contains_key(name) {
            return Err(GdiError::Duplicate(format!("metadata name {name:?} already exists")));
        }
        Ok(())
    }

    pub fn add_label(&mut self, name: &str) -> Result<Label> {
        self.check_name_free(name)?;
        let int_id = self.next_int_id;
        self.next_int_id += 1;
        let idx = self.alloc_slot(CatalogItem::Label { name: name.to_string(), int_id });
        self.push_back(idx, true);
        self.by_name.insert(name.to_string(), idx);
        self.by_id.insert(int_id, idx);
        Ok(Label { int_id })
    }

    pub fn add_prop(&mut self, desc: PropTypeDesc) -> Result<PropType> {
        desc.validate()?;
        self.check_name_free(&desc.name)?;
        let int_id = self.next_int_id;
        self.next_int_id += 1;
        let name = desc.name.clone();
        let idx = self.alloc_slot(CatalogItem::Prop { desc, int_id });
        self.push_back(idx, false);
        self.by_name.insert(name, idx);
        self.by_id.insert(int_id, idx);
        Ok(PropType { int_id })
    }

    pub fn remove_label(&mut self, label: Label) -> Result<()> {
        let idx = *self
            .by_id
            .get(&label.int_id)
            .ok_or_else(|| GdiError::NotFound(format!("label id {}", label.int_id)))?;
        if !matches!(self.slots[idx as usize].as_ref().unwrap().item, CatalogItem::Label { .. }) {
            return Err(GdiError::NotFound(format!("id {} is not a label", label.int_id)));
        }
        self.unlink(idx, true);
        let slot = self.slots[idx as usize].take().unwrap();
        self.by_name.remove(slot.item.name());
        self.by_id.remove(&label.int_id);
        self.free_slots.push(idx);
        Ok(())
    }

    pub fn remove_prop(&mut self, ptype: PropType) -> Result<()> {
        let idx = *self
            .by_id
            .get(&ptype.int_id)
            .ok_or_else(|| GdiError::NotFound(format!("property type id {}", ptype.int_id)))?;
        if !matches!(self.slots[idx as usize].as_ref().unwrap().item, CatalogItem::Prop { .. }) {
            return Err(GdiError::NotFound(format!("id {} is not a property type", ptype.int_id)));
        }
        self.unlink(idx, false);
        let slot = self.slots[idx as usize].take().unwrap();
        self.by_name.remove(slot.item.name());
        self.by_id.remove(&ptype.int_id);
        self.free_slots.push(idx);
        Ok(())
    }

    pub fn update_prop(&mut self, ptype: PropType, new: PropTypeDesc) -> Result<()> {
        new.validate()?;
        let idx = *self
            .by_id
            .get(&ptype.int_id)
            .ok_or_else(|| GdiError::NotFound(format!("property type id {}", ptype.int_id)))?;
        let slot = self.slots[idx as usize].as_mut().unwrap();
        match &mut slot.item {
            CatalogItem::Prop { desc, .. } => {
                if new.name != desc.name {
                    return Err(GdiError::InvalidArgument("property type rename not supported".into()));
                }
                *desc = new;
                Ok(())
            }
            CatalogItem::Label { .. } => {
                Err(GdiError::NotFound(format!("id {} is not a property type", ptype.int_id)))
            }
        }
    }

    pub fn label_from_name(&self, name: &str) -> Result<Label> {
        match self.by_name.get(name).map(|&i| &self.slots[i as usize].as_ref().unwrap().item) {
            Some(CatalogItem::Label { int_id, .. }) => Ok(Label { int_id: *int_id }),
            _ => Err(GdiError::NotFound(format!("label {name:?}"))),
        }
    }

    pub fn prop_from_name(&self, name: &str) -> Result<PropType> {
        match self.by_name.get(name).map(|&i| &self.slots[i as usize].as_ref().unwrap().item) {
            Some(CatalogItem::Prop { int_id, .. }) => Ok(PropType { int_id: *int_id }),
            _ => Err(GdiError::NotFound(format!("property type {name:?}"))),
        }
    }

    pub fn name_of_label(&self, label: Label) -> Result<&str> {
        match self.by_id.get(&label.int_id).map(|&i| &self.slots[i as usize].as_ref().unwrap().item)
        {
            Some(CatalogItem::Label { name, .. }) => Ok(name),
            _ => Err(GdiError::NotFound(format!("label id {}", label.int_id))),
        }
    }

    pub fn prop_desc(&self, ptype: PropType) -> Result<&PropTypeDesc> {
        match self.by_id.get(&ptype.int_id).map(|&i| &self.slots[i as usize].as_ref().unwrap().item)
        {
            Some(CatalogItem::Prop { desc, .. }) => Ok(desc),
            _ => Err(GdiError::NotFound(format!("property type id {}", ptype.int_id))),
        }
    }

    pub fn has_label_id(&self, int_id: u32) -> bool {
        matches!(
            self.by_id.get(&int_id).map(|&i| &self.slots[i as usize].as_ref().unwrap().item),
            Some(CatalogItem::Label { .. })
        )
    }

    pub fn has_prop_id(&self, int_id: u32) -> bool {
        matches!(
            self.by_id.get(&int_id).map(|&i| &self.slots[i as usize].as_ref().unwrap().item),
            Some(CatalogItem::Prop { .. })
        )
    }

    /// Labels in insertion order.
    pub fn labels(&self) -> Vec<Label> {
        self.walk(self.label_head)
            .map(|item| match item {
                CatalogItem::Label { int_id, .. } => Label { int_id: *int_id },
                CatalogItem::Prop { .. } => unreachable!(),
            })
            .collect()
    }

    /// Property types in insertion order.
    pub fn prop_types(&self) -> Vec<PropType> {
        self.walk(self.prop_head)
            .map(|item| match item {
                CatalogItem::Prop { int_id, .. } => PropType { int_id: *int_id },
                CatalogItem::Label { .. } => unreachable!(),
            })
            .collect()
    }

    fn walk(&self, head: u32) -> impl Iterator<Item = &CatalogItem> {
        let mut cur = head;
        std::iter::from_fn(move || {
            if cur == NIL {
                return None;
            }
            let slot = self.slots[cur as usize].as_ref().unwrap();
            cur = slot.next;
            Some(&slot.item)
        })
    }

    /// Canonical byte serialization of the replica; identical replicas
    /// serialize identically.
    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for item in self.walk(self.label_head).chain(self.walk(self.prop_head)) {
            out.extend_from_slice(&item.int_id().to_le_bytes());
            let name = item.name();
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            if let CatalogItem::Prop { desc, .. } = item {
                out.push(match desc.entity {
                    EntityKind::Single => 0,
                    EntityKind::Multi => 1,
                });
                out.push(desc.datatype as u8);
                match desc.size {
                    SizeLimit::None => out.extend_from_slice(&[0, 0, 0, 0, 0]),
                    SizeLimit::Max(m) => {
                        out.push(1);
                        out.extend_from_slice(&m.to_le_bytes());
                    }
                    SizeLimit::Fixed(m) => {
                        out.push(2);
                        out.extend_from_slice(&m.to_le_bytes());
                    }
                }
            }
            out.push(b';');
        }
        out.extend_from_slice(&self.next_int_id.to_le_bytes());
        out
    }

    /// Structural consistency: every list member is in the maps and vice
    /// versa, and the links are well formed.
    pub fn check_structure(&self) -> Result<()> {
        let mut seen = 0usize;
        for (head, is_label) in [(self.label_head, true), (self.prop_head, false)] {
            let mut cur = head;
            let mut prev = NIL;
            while cur != NIL {
                let slot = self.slots[cur as usize]
                    .as_ref()
                    .ok_or_else(|| GdiError::InvalidArgument("list points at a free slot".into()))?;
                if slot.prev != prev {
                    return Err(GdiError::InvalidArgument("broken prev link".into()));
                }
                if matches!(slot.item, CatalogItem::Label { .. }) != is_label {
                    return Err(GdiError::InvalidArgument("item in wrong list".into()));
                }
                if self.by_name.get(slot.item.name()) != Some(&cur)
                    || self.by_id.get(&slot.item.int_id()) != Some(&cur)
                {
                    return Err(GdiError::InvalidArgument("list and maps disagree".into()));
                }
                seen += 1;
                prev = cur;
                cur = slot.next;
            }
        }
        if seen != self.by_name.len() || seen != self.by_id.len() {
            return Err(GdiError::InvalidArgument("maps hold items not on a list".into()));
        }
        Ok(())
    }
}

/// Bulk schema document consumed at startup.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SchemaDoc {
    #[serde(default)]
    pub labels: Vec<String>,
    #[serde(default)]
    pub property_types: Vec<SchemaProp>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SchemaProp {
    pub name: String,
    pub entity: EntityKind,
    pub datatype: Datatype,
    #[serde(flatten)]
    pub size: SizeLimit,
}

impl SchemaProp {
    pub fn to_desc(&self) -> PropTypeDesc {
        PropTypeDesc {
            name: self.name.clone(),
            entity: self.entity,
            datatype: self.datatype,
            size: self.size,
        }
    }
}
