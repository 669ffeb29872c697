//! Workload harness for the graph engine: OLTP mixes, whole-graph
//! analytics, a business-intelligence count query, metric reports and a
//! serializability checker.

pub mod bi;
pub mod exchange;
pub mod mixes;
pub mod olap;
pub mod oltp;
pub mod report;
pub mod sercheck;

pub use exchange::Exchanger;
pub use mixes::{chi_square, chi_square_q999, MixName, OltpMix, OpKind, OP_KINDS};
pub use report::{AuditSummary, MetricsReport, ReportFormat, RunConfig};
