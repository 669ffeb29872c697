//! Embedded, in-memory, distributed labeled-property-graph storage and
//! transaction engine.
//!
//! The engine is layered bottom-up:
//!
//! * [`rma`] — one-sided communication (windows, puts/gets/atomics,
//!   collectives) over a simulated multi-rank backend,
//! * [`blocks`] — fixed-size block pools with lock-free free lists and
//!   per-block reader-writer lock words,
//! * [`dht`] — a lock-free chained distributed hash table used for internal
//!   and explicit indexing,
//! * [`meta`] — replicated label / property-type catalogs,
//! * [`graph`] — vertex/edge holders, lightweight edges, label and property
//!   entries,
//! * [`query`] — DNF constraints and explicit indexes,
//! * [`txn`] — local and collective transactions with strict two-phase
//!   no-wait locking,
//! * [`db`] — the database facade tying the layers together.

pub mod blocks;
pub mod bulk;
pub mod db;
pub mod dht;
pub mod error;
pub mod graph;
pub mod meta;
pub mod query;
pub mod rma;
pub mod txn;

pub use db::{Db, EngineConfig};
pub use error::{GdiError, Result};
pub use rma::{Comm, RankId, ReduceOp, RmaOptions, Window};
