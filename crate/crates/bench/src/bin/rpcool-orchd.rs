//! Pool orchestrator daemon.

use std::path::PathBuf;

use anyhow::Context;
use clap::Parser;
use rpcool::config::{DEFAULT_ORCH_ENDPOINT, ENV_ORCH};
use rpcool::orchestrator::OrchestratorServer;
use rpcool::OrchestratorConfig;

#[derive(Parser)]
#[command(name = "rpcool-orchd", about = "rpcool pool orchestrator")]
struct Cli {
    /// Admin TOML file: pool range, quotas, lease timing.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Listen address; defaults to $RPCOOL_ORCH, then 127.0.0.1:7470.
    #[arg(long)]
    listen: Option<String>,
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = match &cli.config {
        Some(p) => OrchestratorConfig::from_file(p).with_context(|| format!("loading {}", p.display()))?,
        None => OrchestratorConfig::default(),
    };
    let listen = cli
        .listen
        .or_else(|| std::env::var(ENV_ORCH).ok())
        .unwrap_or_else(|| DEFAULT_ORCH_ENDPOINT.to_string());
    let srv = OrchestratorServer::bind(&listen, cfg.clone()).with_context(|| format!("binding {listen}"))?;
    log::info!(
        "pool {:#x}+{:#x}, lease term {:?}",
        cfg.pool_base,
        cfg.pool_span,
        cfg.lease_term()
    );
    // Printed for scripts that start the daemon on port 0.
    println!("{}", srv.local_addr());
    srv.wait();
    Ok(())
}
