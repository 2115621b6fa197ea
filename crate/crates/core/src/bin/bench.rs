//! Experiment driver.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use vsense::harness::{self, oracle, report, storage_bench, RunOptions, TopologySpec};

#[derive(Parser)]
#[command(name = "bench", version, about = "Runs experiments over local node processes")]
struct Cli {
    /// Node binary to spawn; defaults to `vsense-node` next to this one.
    #[arg(long, global = true)]
    node_bin: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its report.
    Run {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a topology once with persistent streams and once with push.
    CompareModes {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value = "compare-modes")]
        out: PathBuf,
    },
    /// Simulate window growth for one sensor.
    Storage {
        #[arg(long)]
        history: usize,
        /// Simulated seconds.
        #[arg(long)]
        duration: u64,
        #[arg(long, default_value_t = 1000)]
        interval_ms: u64,
        #[arg(long, value_enum, default_value_t = StorageSource::RandomWalk)]
        source: StorageSource,
        /// Seed for `random-walk`.
        #[arg(long, default_value_t = 1)]
        seed: i64,
        /// Writes the series as `t_ms,bytes` here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute the average time per request and the completion shares
    /// from an event log.
    Recompute {
        #[arg(long)]
        log: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum StorageSource {
    RandomWalk,
    /// Same payload in every element.
    Constant,
}

fn fail(code: &str, e: &dyn std::fmt::Display) -> ExitCode {
    eprintln!("{code}: {e}");
    ExitCode::FAILURE
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let opts = |dir: PathBuf| RunOptions {
        node_bin: cli.node_bin.clone(),
        ..RunOptions::in_dir(dir)
    };
    match cli.command {
        Command::Run { ref spec, ref out } => {
            let spec = match TopologySpec::load(spec) {
                Ok(s) => s,
                Err(e) => return fail(e.code(), &e),
            };
            let r = match harness::run_experiment(&spec, &opts(out.clone())).await {
                Ok(r) => r,
                Err(e) => return fail(e.code(), &e),
            };
            if let Err(e) = harness::emit_report(&r, out) {
                return fail(e.code(), &e);
            }
            print!("{}", report::summary_text(&r));
            if r.complete {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(3)
            }
        }
        Command::CompareModes { ref spec, ref out } => {
            let spec = match TopologySpec::load(spec) {
                Ok(s) => s,
                Err(e) => return fail(e.code(), &e),
            };
            let pair = match harness::compare_modes(&spec, &opts(out.clone())).await {
                Ok(p) => p,
                Err(e) => return fail(e.code(), &e),
            };
            if let Err(e) = harness::emit_paired(&pair, out) {
                return fail(e.code(), &e);
            }
            print!("{}", report::comparison_text(&pair));
            ExitCode::SUCCESS
        }
        Command::Storage {
            history,
            duration,
            interval_ms,
            source,
            seed,
            out,
        } => {
            if history == 0 || interval_ms == 0 {
                return fail("BAD_REQUEST", &"history and interval must be positive");
            }
            let source = match source {
                StorageSource::RandomWalk => storage_bench::random_walk(seed),
                StorageSource::Constant => storage_bench::fixed_width(),
            };
            let b = storage_bench::simulate(history, duration, interval_ms, &source);
            let mut csv = String::from("t_ms,bytes\n");
            for p in &b.points {
                csv.push_str(&format!("{},{}\n", p.t_ms, p.bytes));
            }
            match out {
                Some(path) => {
                    if let Err(e) = std::fs::write(&path, csv) {
                        return fail("IO_UNWRITABLE", &format!("{}: {e}", path.display()));
                    }
                }
                None => print!("{csv}"),
            }
            let show = |v: Option<String>| v.unwrap_or_else(|| "undefined".into());
            eprintln!("saturated_at_ms = {}", show(b.saturated_at_ms.map(|t| t.to_string())));
            eprintln!("linear_fit_residual = {}", show(b.linear_fit_residual().map(|r| format!("{r:.6}"))));
            eprintln!(
                "post_saturation_range_bytes = {}",
                show(b.post_saturation_range().map(|r| r.to_string()))
            );
            eprintln!("max_element_bytes = {}", b.max_element_bytes);
            ExitCode::SUCCESS
        }
        Command::Recompute { log } => match oracle::recompute_file(&log) {
            Ok(r) => {
                match r.avg_time_per_request_ms {
                    Some(v) => println!("avg_time_per_request_ms = {v}"),
                    None => println!("avg_time_per_request_ms = undefined"),
                }
                println!("stream,completions,share_pct");
                for ((s, c), p) in r.streams.iter().zip(&r.completions).zip(&r.shares) {
                    println!("{s},{c},{p}");
                }
                ExitCode::SUCCESS
            }
            Err(e) => fail("BAD_REQUEST", &e),
        },
    }
}
