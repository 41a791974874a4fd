use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::Parser;
use edgetwin_core::config::load_config;
use edgetwin_core::{Clock, VirtualClock, WallClock};
use edgetwin_messaging::{Bus, RemoteBus};
use edgetwin_runtime::edge::{Connector, EdgeNode, EdgeOptions};
use edgetwin_runtime::offload::{Agent, TaskRegistry};

/// Run an edge node from its JSON configuration.
#[derive(Parser)]
#[command(version)]
struct Args {
    #[arg(long)]
    config: PathBuf,
    /// Stop after this many seconds; runs until killed otherwise.
    #[arg(long)]
    duration: Option<f64>,
    /// Advance time as fast as events can be processed. Requires --duration.
    #[arg(long)]
    virtual_clock: bool,
    /// Broker to publish to. Without it the node runs standalone.
    #[arg(long)]
    broker: Option<SocketAddr>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("edge: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(args: Args) -> Result<(), String> {
    let config = load_config(&args.config).map_err(|e| format!("{}: {e}", args.config.display()))?;
    let duration = match args.duration {
        Some(s) if s.is_finite() && s > 0.0 => Some(Duration::from_secs_f64(s)),
        Some(s) => return Err(format!("--duration must be positive, got {s}")),
        None if args.virtual_clock => return Err("--virtual-clock needs --duration".into()),
        None => None,
    };
    let clock: Arc<dyn Clock> = if args.virtual_clock {
        Arc::new(VirtualClock::new(WallClock.now()))
    } else {
        Arc::new(WallClock)
    };

    let mut options = EdgeOptions::default();
    if let Some(addr) = args.broker {
        let connector: Connector = Arc::new(move || Ok(Arc::new(RemoteBus::connect(addr)?) as Arc<dyn Bus>));
        let agent_bus: Arc<dyn Bus> = Arc::new(
            RemoteBus::connect_with_retry(addr, 5, Duration::from_millis(200)).map_err(|e| e.to_string())?,
        );
        let agent = Agent::new(
            &config.global.label,
            config.global.slots,
            Arc::new(TaskRegistry::with_builtins()),
            Some(agent_bus),
            clock.clone(),
        )
        .map_err(|e| e.to_string())?;
        options.connector = Some(connector);
        options.agent = Some(agent);
    }
    let mut node = EdgeNode::new(config, None, clock, options).map_err(|e| e.to_string())?;
    let report = node.run(duration).map_err(|e| e.to_string())?;
    println!("{}", serde_json::to_string_pretty(&report).map_err(|e| e.to_string())?);
    Ok(())
}
