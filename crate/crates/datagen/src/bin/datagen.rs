use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use edgetwin_datagen::{explore, write_outputs, Expansion, ExplorationConfig, Sampler, StabilityOracle, TaskCost};

#[derive(Clone, Copy, ValueEnum)]
enum ExpansionArg {
    Full,
    Margin,
}

#[derive(Clone, Copy, ValueEnum)]
enum CostArg {
    Work,
    Sleep,
}

#[derive(Clone, Copy, ValueEnum)]
enum SamplerArg {
    Uniform,
    Lhs,
}

/// Explore a unit-box operational space and write a labeled dataset.
#[derive(Parser)]
#[command(version)]
struct Args {
    #[arg(long)]
    dims: usize,
    #[arg(long)]
    depth: u32,
    #[arg(long)]
    branch: usize,
    #[arg(long)]
    points: usize,
    #[arg(long, value_enum, default_value = "full")]
    expansion: ExpansionArg,
    /// Entropy above which a region is subdivided in margin mode.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long)]
    workers: Option<usize>,
    /// Synthetic cost of one oracle evaluation in milliseconds.
    #[arg(long, default_value_t = 20.0)]
    task_cost: f64,
    #[arg(long, value_enum, default_value = "work")]
    cost_model: CostArg,
    #[arg(long, value_enum, default_value = "uniform")]
    sampler: SamplerArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let config = ExplorationConfig {
        bounds: vec![(0.0, 1.0); args.dims],
        depth: args.depth,
        branch: args.branch,
        points: args.points,
        entropy_threshold: args.threshold,
        seed: args.seed,
        expansion: match args.expansion {
            ExpansionArg::Full => Expansion::Full,
            ExpansionArg::Margin => Expansion::MarginOnly,
        },
        sampler: match args.sampler {
            SamplerArg::Uniform => Sampler::Uniform,
            SamplerArg::Lhs => Sampler::Lhs,
        },
    };
    let workers = args
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let cost = match (args.task_cost, args.cost_model) {
        (ms, _) if ms <= 0.0 => TaskCost::Free,
        (ms, CostArg::Work) => TaskCost::Work(ms),
        (ms, CostArg::Sleep) => TaskCost::Sleep(ms),
    };
    if let Err(e) = config.validate() {
        eprintln!("datagen: {e}");
        return ExitCode::from(2);
    }
    let oracle = StabilityOracle::new(&config.bounds, config.seed).with_cost(cost);
    let result = explore(&config, &oracle, workers).and_then(|(dataset, metrics)| {
        write_outputs(&args.out, &config, &dataset, &metrics)?;
        Ok(metrics)
    });
    match result {
        Ok(m) => {
            log::info!(
                "{} tasks over {} regions in {:.2} s with {} workers",
                m.tasks,
                m.regions,
                m.makespan_s,
                m.workers
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("datagen: {e}");
            ExitCode::FAILURE
        }
    }
}
