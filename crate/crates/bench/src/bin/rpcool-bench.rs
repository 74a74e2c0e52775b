use std::path::PathBuf;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use rpcool_bench::harness::Harness;
use rpcool_bench::noop::{self, NoopConfig, Via};
use rpcool_bench::report::{emit_report, BenchReport, Format, DEFAULT_MIN_SAMPLES};
use rpcool_bench::ycsb::Workload;
use rpcool_bench::{e2e, micro, peer};

#[derive(Parser)]
#[command(name = "rpcool-bench", about = "rpcool benchmarks and demo")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Output {
    /// Write the report here instead of printing markdown.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "md")]
    format: Format,
    /// Also save the report as JSON, for `report --from`.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// No-op round trips against an echo server.
    Noop {
        #[arg(long, value_enum, default_value = "shm")]
        transport: Via,
        /// Seal and sandbox every call.
        #[arg(long)]
        secure: bool,
        #[arg(long, default_value_t = 100_000)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        clients: usize,
        /// Concurrent callers per connection.
        #[arg(long, default_value_t = 1)]
        depth: usize,
        #[command(flatten)]
        output: Output,
    },
    /// Sandbox, seal and copy micro-benchmarks.
    Micro {
        #[arg(long, default_value_t = 100_000)]
        n: usize,
        /// Samples for the 1024-page rows; defaults to `--n`.
        #[arg(long)]
        n_large: Option<usize>,
        #[command(flatten)]
        output: Output,
    },
    /// Load CoolDB with generated documents, check range search against a
    /// flat scan, and optionally run YCSB workloads.
    Cooldb {
        #[arg(long, default_value_t = 10_000)]
        docs: u64,
        #[arg(long, default_value_t = 1000)]
        queries: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// YCSB workloads to run after the search check, e.g. `a,b,c,d`.
        #[arg(long, value_enum, value_delimiter = ',')]
        ycsb: Vec<Workload>,
        /// Measured operations per YCSB workload.
        #[arg(long, default_value_t = 100_000)]
        ops: u64,
        #[command(flatten)]
        output: Output,
    },
    /// Run the benchmark suite, or merge saved reports, and write one report.
    Report {
        #[arg(long, default_value = "md")]
        format: Format,
        #[arg(long)]
        out: PathBuf,
        /// Write a report with no rows instead of failing.
        #[arg(long)]
        allow_empty: bool,
        /// Merge these JSON reports instead of running the suite.
        #[arg(long, num_args = 1..)]
        from: Vec<PathBuf>,
        /// Samples per latency row when running the suite.
        #[arg(long, default_value_t = 100_000)]
        n: usize,
        /// Reject rows with fewer samples than this.
        #[arg(long, default_value_t = DEFAULT_MIN_SAMPLES)]
        min_samples: u64,
    },
    #[command(hide = true)]
    Peer { role: String, args: Vec<String> },
}

fn output(r: &BenchReport, o: &Output) -> anyhow::Result<()> {
    if let Some(p) = &o.json {
        std::fs::write(p, serde_json::to_string_pretty(r)?).with_context(|| format!("writing {}", p.display()))?;
    }
    match &o.out {
        Some(p) => emit_report(r, o.format, p, false)?,
        None => print!("{}", r.render(o.format)?),
    }
    Ok(())
}

fn harness() -> anyhow::Result<Harness> {
    Harness::from_env(std::env::current_exe()?)
}

fn suite(n: usize) -> anyhow::Result<BenchReport> {
    let h = harness()?;
    let mut r = BenchReport::with_host_metadata();
    for via in [Via::Shm, Via::Fallback] {
        for secure in [false, true] {
            log::info!("no-op {} secure={secure}", via.name());
            let cfg = NoopConfig {
                via,
                secure,
                n,
                ..Default::default()
            };
            r.extend(noop::run(&h, &cfg)?);
        }
    }
    log::info!("micro");
    let cfg = micro::MicroConfig {
        n,
        n_large: n,
        ..Default::default()
    };
    r.extend(micro::run(&cfg)?);
    log::info!("ycsb");
    r.extend(e2e::ycsb(&h, &Workload::ALL, 10_000, n as u64, 1)?);
    Ok(r)
}

fn main() -> anyhow::Result<()> {
    env_logger::init();
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Noop {
            transport,
            secure,
            n,
            clients,
            depth,
            output: o,
        } => {
            let cfg = NoopConfig {
                via: transport,
                secure,
                n,
                clients,
                depth,
            };
            output(&noop::run(&harness()?, &cfg)?, &o)?;
        }
        Cmd::Micro { n, n_large, output: o } => {
            let cfg = micro::MicroConfig {
                n,
                n_large: n_large.unwrap_or(n),
                ..Default::default()
            };
            output(&micro::run(&cfg)?, &o)?;
        }
        Cmd::Cooldb {
            docs,
            queries,
            seed,
            ycsb,
            ops,
            output: o,
        } => {
            let h = harness()?;
            let res = e2e::cooldb_search(&h, docs, queries, seed)?;
            eprintln!(
                "cooldb: {} docs, {} queries, {} hits, {} mismatches vs flat scan",
                res.docs, res.queries, res.hits, res.mismatches
            );
            let mut r = e2e::cooldb_rows(&res);
            if !ycsb.is_empty() {
                r.extend(e2e::ycsb(&h, &ycsb, docs, ops, seed)?);
            }
            output(&r, &o)?;
            anyhow::ensure!(res.ok(), "search disagreed with the flat scan: {res:?}");
        }
        Cmd::Report {
            format,
            out,
            allow_empty,
            from,
            n,
            min_samples,
        } => {
            let r = if from.is_empty() {
                suite(n)?
            } else {
                let mut r = BenchReport::new();
                for p in &from {
                    let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                    r.extend(serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?);
                }
                r
            };
            r.check_samples(min_samples)?;
            emit_report(&r, format, &out, allow_empty)?;
        }
        Cmd::Peer { role, args } => peer::run(&role, &args)?,
    }
    Ok(())
}
