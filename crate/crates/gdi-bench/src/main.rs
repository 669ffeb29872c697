//! Benchmark CLI: populates an engine instance with a Kronecker graph (or
//! a bulk-loaded edge list) and drives OLTP mixes, whole-graph analytics,
//! the BI count query, or bulk ingestion, emitting a JSON/CSV report.
//!
//! Exit codes: 0 on success, 2 when `--audit` detects an invariant
//! violation.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use clap::{Parser, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gdi::db::{run_ranks, Db};
use gdi::error::{GdiError, Result};
use gdi::rma::{RankId, ReduceOp};
use gdi::EngineConfig;
use gdi_bench::mixes::{MixName, OltpMix};
use gdi_bench::olap::{self, Affine};
use gdi_bench::oltp::run_oltp;
use gdi_bench::report::{
    AuditSummary, LatencyHistogram, MetricsReport, OpStats, RankStats, RunConfig,
};
use gdi_bench::Exchanger;
use gdi_gen::{generate, suggested_config, GenSpec};

#[derive(Clone, Copy, PartialEq, Eq, Debug, ValueEnum)]
enum Workload {
    Rm,
    Ri,
    Wi,
    Lb,
    Bfs,
    Khop,
    Pr,
    Wcc,
    Cdlp,
    Lcc,
    Gcn,
    Bi,
    Bulk,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, ValueEnum)]
enum Fmt {
    Json,
    Csv,
}

#[derive(Parser, Debug, Clone)]
#[command(name = "gdi-bench", about = "graph engine workload driver")]
struct Args {
    /// Simulated rank (process) count.
    #[arg(long, default_value_t = 1)]
    ranks: usize,
    /// Kronecker scale: the generated graph has 2^scale vertices.
    #[arg(long, default_value_t = 12)]
    scale: u32,
    #[arg(long, default_value_t = 16)]
    edge_factor: u32,
    #[arg(long, value_enum)]
    workload: Workload,
    /// Measured queries per rank (OLTP mixes).
    #[arg(long, default_value_t = 1000)]
    queries: u64,
    /// Unmeasured warmup queries per rank.
    #[arg(long, default_value_t = 100)]
    warmup: u64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 512)]
    block_size: usize,
    /// Blocks per rank; sized from the graph when omitted.
    #[arg(long)]
    blocks_per_rank: Option<usize>,
    #[arg(long)]
    index_capacity: Option<usize>,
    /// Generator label catalog size.
    #[arg(long, default_value_t = 20)]
    labels: u32,
    /// Generator property-type catalog size.
    #[arg(long, default_value_t = 13)]
    ptypes: u32,
    /// Report path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Fmt::Json)]
    format: Fmt,
    /// Hop bound for the k-hop workload.
    #[arg(long, default_value_t = 2)]
    k: u64,
    /// Iterations for PageRank / CDLP.
    #[arg(long, default_value_t = 20)]
    iters: u64,
    /// Layers for the GCN forward pass.
    #[arg(long, default_value_t = 2)]
    layers: u32,
    /// Feature dimension for the GCN workload.
    #[arg(long, default_value_t = 8)]
    gcn_dim: usize,
    /// Run invariant audits after the workload; exit 2 on violation.
    #[arg(long)]
    audit: bool,
    /// Uniform simulated per-op transport delay in microseconds.
    #[arg(long, default_value_t = 0)]
    net_delay_us: u64,
    /// Edge-list file for the bulk workload (`u v [label]` per line).
    #[arg(long)]
    input: Option<PathBuf>,
    /// Optional JSON vertex-property file for the bulk workload.
    #[arg(long)]
    vertex_props: Option<PathBuf>,
    #[arg(long, default_value = "Node")]
    vertex_label: String,
}

struct RankResult {
    attempted: u64,
    failed: u64,
    elapsed: Duration,
    per_op: BTreeMap<String, OpStats>,
    generator: Option<serde_json::Value>,
    output: Option<serde_json::Value>,
    audit: Option<AuditSummary>,
}

fn engine_config(args: &Args) -> EngineConfig {
    let spec = gen_spec(args);
    let mut cfg = suggested_config(&spec, args.ranks);
    cfg.block_size = args.block_size;
    if let Some(b) = args.blocks_per_rank {
        cfg.blocks_per_rank = b;
    }
    if let Some(c) = args.index_capacity {
        cfg.index_capacity = c;
    }
    if args.net_delay_us > 0 {
        cfg.net_delay = Some(Duration::from_micros(args.net_delay_us));
    }
    cfg
}

fn gen_spec(args: &Args) -> GenSpec {
    GenSpec {
        scale: args.scale,
        edge_factor: args.edge_factor,
        labels: args.labels,
        ptypes: args.ptypes,
        seed: args.seed,
        ..Default::default()
    }
}

fn digest_u64_map(m: &BTreeMap<u64, u64>) -> u64 {
    let mut h = 0u64;
    for (k, v) in m {
        h = gdi::dht::mix64(h ^ gdi::dht::mix64(*k) ^ *v);
    }
    h
}

fn run_workload(args: &Args, db: &Db) -> Result<RankResult> {
    let me = db.rank();
    let mut result = RankResult {
        attempted: 0,
        failed: 0,
        elapsed: Duration::ZERO,
        per_op: BTreeMap::new(),
        generator: None,
        output: None,
        audit: None,
    };

    // Populate.
    match args.workload {
        Workload::Bi | Workload::Bulk => {}
        _ => {
            let report = generate(&gen_spec(args), db)?;
            if me == RankId(0) {
                result.generator = Some(serde_json::to_value(&report).unwrap());
            }
        }
    }

    let t0 = Instant::now();
    match args.workload {
        Workload::Rm | Workload::Ri | Workload::Wi | Workload::Lb => {
            let mix = OltpMix::by_name(match args.workload {
                Workload::Rm => MixName::Rm,
                Workload::Ri => MixName::Ri,
                Workload::Wi => MixName::Wi,
                _ => MixName::Lb,
            });
            let out = run_oltp(db, mix, args.queries, args.warmup, args.seed)?;
            result.attempted = out.attempted;
            result.failed = out.failed;
            result.elapsed = out.elapsed;
            for (kind, stats) in out.per_op {
                result.per_op.insert(kind.name().to_string(), stats);
            }
        }
        Workload::Bfs | Workload::Khop => {
            let g = olap::snapshot_local(db)?;
            let ex = Exchanger::create(db.comm(), 1 << 14)?;
            let mut rng = ChaCha8Rng::seed_from_u64(args.seed ^ 0xb0075);
            let n = 1u64 << args.scale;
            let roots: Vec<u64> = (0..10).map(|_| rng.gen_range(0..n)).collect();
            let mut digest = 0u64;
            let mut reached_total = 0u64;
            for root in &roots {
                if args.workload == Workload::Bfs {
                    let depths = olap::run_bfs(db, &g, &ex, *root)?;
                    reached_total += db.comm().allreduce(depths.len() as u64, ReduceOp::Sum)?;
                    digest = gdi::dht::mix64(digest ^ digest_u64_map(&depths));
                } else {
                    let set = olap::run_khop(db, &g, &ex, *root, args.k)?;
                    reached_total += db.comm().allreduce(set.len() as u64, ReduceOp::Sum)?;
                }
            }
            result.attempted = roots.len() as u64;
            result.elapsed = t0.elapsed();
            if me == RankId(0) {
                result.output = Some(serde_json::json!({
                    "roots": roots, "reached_total": reached_total, "local_digest": digest,
                }));
            }
        }
        Workload::Pr => {
            let g = olap::snapshot_local(db)?;
            let ex = Exchanger::create(db.comm(), 1 << 14)?;
            let (scores, total) = olap::run_pagerank(db, &g, &ex, args.iters as u32, 0.85)?;
            result.attempted = 1;
            result.elapsed = t0.elapsed();
            if me == RankId(0) {
                result.output = Some(serde_json::json!({
                    "iters": args.iters, "score_sum": total, "local_scores": scores.len(),
                }));
            }
        }
        Workload::Wcc | Workload::Cdlp => {
            let g = olap::snapshot_local(db)?;
            let ex = Exchanger::create(db.comm(), 1 << 14)?;
            let map = if args.workload == Workload::Wcc {
                olap::run_wcc(db, &g, &ex)?
            } else {
                olap::run_cdlp(db, &g, &ex, args.iters)?
            };
            let distinct: std::collections::BTreeSet<u64> = map.values().copied().collect();
            let local_components = distinct.len() as u64;
            result.attempted = 1;
            result.elapsed = t0.elapsed();
            if me == RankId(0) {
                result.output = Some(serde_json::json!({
                    "local_labels": local_components, "digest": digest_u64_map(&map),
                }));
            }
        }
        Workload::Lcc => {
            let g = olap::snapshot_local(db)?;
            let coeffs = olap::run_lcc(db, &g)?;
            let local_sum: f64 = coeffs.values().sum();
            result.attempted = 1;
            result.elapsed = t0.elapsed();
            if me == RankId(0) {
                result.output = Some(serde_json::json!({
                    "local_vertices": coeffs.len(), "local_lcc_sum": local_sum,
                }));
            }
        }
        Workload::Gcn => {
            let ptype = olap::gcn_setup(db, args.gcn_dim, args.seed)?;
            let g = olap::snapshot_local(db)?;
            let feats =
                olap::run_gcn(db, &g, ptype, args.layers, Affine::Seeded(args.seed), args.gcn_dim)?;
            let checksum: f64 = feats.values().flat_map(|v| v.iter()).sum();
            result.attempted = 1;
            result.elapsed = t0.elapsed();
            if me == RankId(0) {
                result.output = Some(serde_json::json!({
                    "layers": args.layers, "dim": args.gcn_dim, "local_feature_sum": checksum,
                }));
            }
        }
        Workload::Bi => {
            let n = 1u64 << args.scale.min(16);
            let (schema, truth) = gdi_bench::bi::build_dataset(db, n, n / 2, args.seed, None)?;
            let count = gdi_bench::bi::run_bi(db, &schema)?;
            result.attempted = 1;
            result.failed = (count != truth) as u64;
            result.elapsed = t0.elapsed();
            if me == RankId(0) {
                result.output = Some(serde_json::json!({ "count": count, "expected": truth }));
            }
        }
        Workload::Bulk => {
            let input = args
                .input
                .as_ref()
                .ok_or_else(|| GdiError::InvalidArgument("--input required for bulk".into()))?;
            let text = std::fs::read_to_string(input)?;
            let props = match &args.vertex_props {
                Some(p) => Some(std::fs::read_to_string(p)?),
                None => None,
            };
            let report = gdi::bulk::load_edge_list(db, &text, &args.vertex_label, props.as_deref())?;
            result.attempted = report.edges;
            result.elapsed = t0.elapsed();
            if me == RankId(0) {
                result.output = Some(serde_json::json!({
                    "vertices": report.vertices,
                    "edges": report.edges,
                    "per_rank_vertices": report.per_rank_vertices,
                }));
            }
        }
    }

    db.comm().barrier()?;
    if args.audit && me == RankId(0) {
        let audit = db.audit()?;
        result.audit = Some(AuditSummary {
            ok: audit.ok(),
            lock_violations: audit.lock_violations.len(),
            free_blocks: audit.free_blocks,
            reachable_blocks: audit.reachable_blocks,
            capacity: audit.capacity,
        });
    }
    db.comm().barrier()?;
    Ok(result)
}

fn assemble(args: &Args, cfg: &EngineConfig, ranks: Vec<RankResult>) -> MetricsReport {
    let mut per_op: BTreeMap<String, OpStats> = BTreeMap::new();
    let mut per_rank = Vec::new();
    let mut attempted = 0u64;
    let mut failed = 0u64;
    let mut max_elapsed = Duration::ZERO;
    let mut generator = None;
    let mut output = None;
    let mut audit = None;
    for (i, r) in ranks.iter().enumerate() {
        attempted += r.attempted;
        failed += r.failed;
        max_elapsed = max_elapsed.max(r.elapsed);
        per_rank.push(RankStats {
            rank: i as u16,
            attempted: r.attempted,
            failed: r.failed,
            elapsed_ms: r.elapsed.as_secs_f64() * 1e3,
        });
        for (name, stats) in &r.per_op {
            per_op
                .entry(name.clone())
                .or_insert_with(|| OpStats {
                    attempted: 0,
                    failed: 0,
                    histogram: LatencyHistogram::new(),
                })
                .merge(stats);
        }
        generator = generator.or_else(|| r.generator.clone());
        output = output.or_else(|| r.output.clone());
        audit = audit.or_else(|| r.audit.clone());
    }
    let secs = max_elapsed.as_secs_f64();
    MetricsReport {
        config: RunConfig {
            workload: format!("{:?}", args.workload).to_lowercase(),
            ranks: args.ranks,
            scale: args.scale,
            edge_factor: args.edge_factor,
            queries_per_rank: args.queries,
            warmup_per_rank: args.warmup,
            seed: args.seed,
            block_size: cfg.block_size,
            blocks_per_rank: cfg.blocks_per_rank,
            index_capacity: cfg.index_capacity,
            net_delay_us: args.net_delay_us,
            labels: args.labels,
            ptypes: args.ptypes,
        },
        elapsed_ms: secs * 1e3,
        attempted,
        failed,
        failed_fraction: if attempted > 0 { failed as f64 / attempted as f64 } else { 0.0 },
        throughput_qps: if secs > 0.0 { attempted as f64 / secs } else { 0.0 },
        per_op,
        per_rank,
        generator,
        workload_output: output,
        audit: audit.map(|a: AuditSummary| a),
    }
}

fn main() {
    let args = Args::parse();
    let cfg = engine_config(&args);
    let results = run_ranks(&cfg, |db| run_workload(&args, &db));
    let ranks = match results {
        Ok(r) => r,
        Err(e) => {
            eprintln!("gdi-bench: {e}");
            std::process::exit(1);
        }
    };
    let report = assemble(&args, &cfg, ranks);
    let body = match args.format {
        Fmt::Json => report.to_json(),
        Fmt::Csv => report.to_csv(),
    };
    match &args.out {
        Some(path) => {
            if let Err(e) = std::fs::write(path, &body) {
                eprintln!("gdi-bench: cannot write {}: {e}", path.display());
                std::process::exit(1);
            }
            println!(
                "{} workload={} ranks={} attempted={} failed={} qps={:.0}",
                path.display(),
                report.config.workload,
                report.config.ranks,
                report.attempted,
                report.failed,
                report.throughput_qps
            );
        }
        None => println!("{body}"),
    }
    if args.audit {
        match &report.audit {
            Some(a) if a.ok => {}
            _ => {
                eprintln!("gdi-bench: audit violation");
                std::process::exit(2);
            }
        }
    }
}
