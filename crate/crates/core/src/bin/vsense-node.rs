//! Runs one node.
//!
//! Prints `listening <addr>` on stdout once the listener is up, then runs
//! until interrupted.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vsense::node::{Node, NodeConfig};
use vsense::wire::LISTEN_ENV;

#[derive(Parser)]
#[command(name = "vsense-node", version, about = "Sensor stream node")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Start a node from a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's listen address.
        #[arg(long)]
        listen: Option<String>,
    },
    /// Validate a config file without starting anything.
    Check {
        #[arg(long)]
        config: PathBuf,
    },
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Run { config, listen } => {
            let mut cfg = match NodeConfig::load(&config) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("{e}");
                    return ExitCode::from(2);
                }
            };
            if let Some(l) = listen.or_else(|| std::env::var(LISTEN_ENV).ok()) {
                cfg.listen = l;
            }
            let node = match Node::start(cfg).await {
                Ok(n) => n,
                Err(e) => {
                    eprintln!("{}: {e}", e.code());
                    return ExitCode::from(1);
                }
            };
            println!("listening {}", node.address());
            let _ = std::io::stdout().flush();
            let _ = tokio::signal::ctrl_c().await;
            node.shutdown();
            ExitCode::SUCCESS
        }
        Command::Check { config } => match NodeConfig::load(&config) {
            Ok(cfg) => {
                println!("{}: {} sensors", cfg.node_id, cfg.sensors.len());
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("{e}");
                ExitCode::from(2)
            }
        },
    }
}
