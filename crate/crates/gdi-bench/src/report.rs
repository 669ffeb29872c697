//! Metrics collection and report emission.
//!
//! Latencies land in log-spaced buckets, four per decade from 100 ns to
//! 1 s, with a final overflow bucket. Reports serialize to JSON (field
//! order fixed by struct declaration, maps sorted) or a flat CSV.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use gdi::error::{GdiError, Result};

/// Four buckets per decade over [100 ns, 1 s) plus one overflow bucket.
pub const HISTOGRAM_BUCKETS: usize = 29;

fn bucket_floor_ns(i: usize) -> u64 {
    (100.0 * 10f64.powf(i as f64 / 4.0)).round() as u64
}

#[derive(Clone, Debug, Serialize, Deserialize, Default, PartialEq)]
pub struct LatencyHistogram {
    pub counts: Vec<u64>,
}

impl LatencyHistogram {
    pub fn new() -> Self {
        LatencyHistogram { counts: vec![0; HISTOGRAM_BUCKETS] }
    }

    pub fn record(&mut self, d: Duration) {
        let ns = d.as_nanos() as u64;
        let idx = if ns < 100 {
            0
        } else {
            // log10(ns/100) * 4 buckets per decade.
            let i = (4.0 * ((ns as f64) / 100.0).log10()).floor() as usize;
            i.min(HISTOGRAM_BUCKETS - 1)
        };
        self.counts[idx] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn merge(&mut self, other: &LatencyHistogram) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// (floor ns, count) pairs for non-empty buckets.
    pub fn rows(&self) -> Vec<(u64, u64)> {
        self.counts
            .iter()
            .enumerate()
            .filter(|(_, c)| **c > 0)
            .map(|(i, c)| (bucket_floor_ns(i), *c))
            .collect()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, Default)]
pub struct OpStats {
    pub attempted: u64,
    pub failed: u64,
    pub histogram: LatencyHistogram,
}

impl OpStats {
    pub fn merge(&mut self, other: &OpStats) {
        self.attempted += other.attempted;
        self.failed += other.failed;
        self.histogram.merge(&other.histogram);
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    pub workload: String,
    pub ranks: usize,
    pub scale: u32,
    pub edge_factor: u32,
    pub queries_per_rank: u64,
    pub warmup_per_rank: u64,
    pub seed: u64,
    pub block_size: usize,
    pub blocks_per_rank: usize,
    pub index_capacity: usize,
    pub net_delay_us: u64,
    pub labels: u32,
    pub ptypes: u32,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RankStats {
    pub rank: u16,
    pub attempted: u64,
    pub failed: u64,
    pub elapsed_ms: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AuditSummary {
    pub ok: bool,
    pub lock_violations: usize,
    pub free_blocks: usize,
    pub reachable_blocks: usize,
    pub capacity: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config: RunConfig,
    pub elapsed_ms: f64,
    pub attempted: u64,
    pub failed: u64,
    pub failed_fraction: f64,
    pub throughput_qps: f64,
    pub per_op: BTreeMap<String, OpStats>,
    pub per_rank: Vec<RankStats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generator: Option<serde_json::Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub workload_output: Option<serde_json::Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub audit: Option<AuditSummary>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str("key,value\n");
        out.push_str(&format!("workload,{}\n", self.config.workload));
        out.push_str(&format!("ranks,{}\n", self.config.ranks));
        out.push_str(&format!("scale,{}\n", self.config.scale));
        out.push_str(&format!("edge_factor,{}\n", self.config.edge_factor));
        out.push_str(&format!("queries_per_rank,{}\n", self.config.queries_per_rank));
        out.push_str(&format!("seed,{}\n", self.config.seed));
        out.push_str(&format!("elapsed_ms,{}\n", self.elapsed_ms));
        out.push_str(&format!("attempted,{}\n", self.attempted));
        out.push_str(&format!("failed,{}\n", self.failed));
        out.push_str(&format!("failed_fraction,{}\n", self.failed_fraction));
        out.push_str(&format!("throughput_qps,{}\n", self.throughput_qps));
        out.push_str("op,attempted,failed\n");
        for (name, stats) in &self.per_op {
            out.push_str(&format!("{name},{},{}\n", stats.attempted, stats.failed));
        }
        out.push_str("hist_op,bucket_floor_ns,count\n");
        for (name, stats) in &self.per_op {
            for (floor, count) in stats.histogram.rows() {
                out.push_str(&format!("{name},{floor},{count}\n"));
            }
        }
        out
    }

    pub fn write_to(&self, path: &std::path::Path, format: ReportFormat) -> Result<()> {
        let body = match format {
            ReportFormat::Json => self.to_json(),
            ReportFormat::Csv => self.to_csv(),
        };
        let mut f = std::fs::File::create(path).map_err(|e| GdiError::Io(e.to_string()))?;
        f.write_all(body.as_bytes()).map_err(|e| GdiError::Io(e.to_string()))?;
        Ok(())
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ReportFormat {
    Json,
    Csv,
}

/// JSON Schema for emitted reports; shipped with the crate and enforced in
/// the test suite.
pub const REPORT_SCHEMA: &str = include_str!("../schema/report.schema.json");

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_report() -> MetricsReport {
        let mut per_op = BTreeMap::new();
        let mut stats =
            OpStats { attempted: 3, failed: 0, histogram: LatencyHistogram::new() };
        stats.histogram.record(Duration::from_nanos(150));
        stats.histogram.record(Duration::from_micros(20));
        stats.histogram.record(Duration::from_millis(5));
        per_op.insert("get_edges".to_string(), stats);
        MetricsReport {
            config: RunConfig {
                workload: "rm".into(),
                ranks: 2,
                scale: 10,
                edge_factor: 16,
                queries_per_rank: 100,
                warmup_per_rank: 100,
                seed: 1,
                block_size: 512,
                blocks_per_rank: 4096,
                index_capacity: 1 << 14,
                net_delay_us: 0,
                labels: 20,
                ptypes: 13,
            },
            elapsed_ms: 12.5,
            attempted: 3,
            failed: 0,
            failed_fraction: 0.0,
            throughput_qps: 240.0,
            per_op,
            per_rank: vec![RankStats { rank: 0, attempted: 3, failed: 0, elapsed_ms: 12.5 }],
            generator: None,
            workload_output: None,
            audit: None,
        }
    }

    #[test]
    fn histogram_buckets_are_log_spaced_and_conserve_counts() {
        let mut h = LatencyHistogram::new();
        h.record(Duration::from_nanos(99)); // clamps into the first bucket
        h.record(Duration::from_nanos(100));
        h.record(Duration::from_nanos(999));
        h.record(Duration::from_micros(1));
        h.record(Duration::from_secs(2)); // clamps into the overflow bucket
        assert_eq!(h.total(), 5);
        assert_eq!(h.counts[0], 2);
        assert!(h.counts[HISTOGRAM_BUCKETS - 1] >= 1);
        assert_eq!(bucket_floor_ns(0), 100);
        assert_eq!(bucket_floor_ns(4), 1000);
        assert_eq!(bucket_floor_ns(28), 1_000_000_000);
    }

    #[test]
    fn json_roundtrip_and_totals() {
        let r = sample_report();
        let json = r.to_json();
        let back: MetricsReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.attempted, 3);
        let op = &back.per_op["get_edges"];
        assert_eq!(op.histogram.total(), op.attempted);
        // Deterministic field order.
        assert_eq!(json, back.to_json());
    }

    #[test]
    fn csv_contains_op_and_histogram_rows() {
        let csv = sample_report().to_csv();
        assert!(csv.contains("workload,rm"));
        assert!(csv.contains("get_edges,3,0"));
        assert!(csv.contains("get_edges,100,1"));
    }
}
