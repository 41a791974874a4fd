use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::Parser;
use edgetwin_core::config::load_config;
use edgetwin_core::{Clock, WallClock};
use edgetwin_messaging::{Broker, BrokerServer, Bus};
use edgetwin_runtime::cloud::{CloudNode, CloudOptions};
use edgetwin_runtime::offload::{Agent, TaskRegistry};

/// Run the cloud node: message broker, ingestion, offload agent and HTTP API.
#[derive(Parser)]
#[command(version)]
struct Args {
    #[arg(long)]
    config: PathBuf,
    /// Serve the HTTP API here.
    #[arg(long)]
    http: Option<SocketAddr>,
    /// Accept edge connections here.
    #[arg(long, default_value = "127.0.0.1:7450")]
    broker: SocketAddr,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("cloud: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(args: Args) -> Result<(), String> {
    let config = load_config(&args.config).map_err(|e| format!("{}: {e}", args.config.display()))?;
    let broker = Broker::new();
    let server = BrokerServer::bind(args.broker, broker.clone()).map_err(|e| format!("{}: {e}", args.broker))?;
    log::info!("broker listening on {}", server.local_addr());
    let bus: Arc<dyn Bus> = Arc::new(broker);
    let clock: Arc<dyn Clock> = Arc::new(WallClock);
    let agent = Agent::new(
        &config.global.label,
        config.global.slots,
        Arc::new(TaskRegistry::with_builtins()),
        Some(bus.clone()),
        clock.clone(),
    )
    .map_err(|e| e.to_string())?;
    let options = CloudOptions {
        agent: Some(agent),
        http: args.http,
    };
    let _cloud = CloudNode::start(config, bus, clock, options).map_err(|e| e.to_string())?;
    // serves until the process is terminated
    loop {
        std::thread::park();
    }
}
