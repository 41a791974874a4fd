use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use edgetwin_bench::exp1::{run_exp1, Exp1Spec};
use edgetwin_bench::exp2::{run_exp2, Exp2Spec};
use edgetwin_bench::exp3::{reference_cluster, run_exp3, Exp3Spec, DEFAULT_DISPATCH_OVERHEAD_S};
use edgetwin_bench::BenchError;
use edgetwin_core::AggregateKind;
use edgetwin_datagen::TaskCost;
use edgetwin_runtime::offload::ExecMode;

#[derive(Parser)]
#[command(version, about = "Run the bandwidth, response-time and scaling experiments")]
struct Cli {
    #[command(subcommand)]
    experiment: Experiment,
}

#[derive(Subcommand)]
enum Experiment {
    /// Sensor bandwidth over a Ts x Ta grid.
    Exp1(Exp1Args),
    /// Response time of a triggered blocked matrix multiplication.
    Exp2(Exp2Args),
    /// Strong scaling of the dataset generator.
    Exp3(Exp3Args),
}

#[derive(Args)]
struct Exp1Args {
    #[arg(long, value_delimiter = ',', default_value = "1,10,100,1000")]
    ts: Vec<u64>,
    #[arg(long, value_delimiter = ',', default_value = "1,10,100,1000,10000")]
    ta: Vec<u64>,
    #[arg(long, value_delimiter = ',', default_value = "all,phasor")]
    methods: Vec<String>,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Exp2Args {
    #[arg(long, value_delimiter = ',', default_value = "4")]
    m: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32,64,128")]
    b: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "sequential,local-parallel,offload")]
    modes: Vec<String>,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Exp3Args {
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    workers: Vec<usize>,
    #[arg(long, default_value_t = 6)]
    dims: usize,
    #[arg(long, default_value_t = 3)]
    depth: u32,
    #[arg(long, default_value_t = 4)]
    branch: usize,
    #[arg(long, default_value_t = 20)]
    points: usize,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    /// Milliseconds of synthetic work per oracle call.
    #[arg(long, default_value_t = 20.0)]
    task_cost: f64,
    /// Sleep instead of computing; measures coordination overhead only.
    #[arg(long)]
    sleep: bool,
    /// Per-task dispatch overhead of the simulated cluster, in seconds.
    #[arg(long, default_value_t = DEFAULT_DISPATCH_OVERHEAD_S)]
    dispatch_overhead: f64,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32,64")]
    nodes: Vec<u64>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_method(s: &str) -> Result<AggregateKind, BenchError> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| BenchError::Spec(format!("unknown aggregation method {s:?}")))
}

fn parse_mode(s: &str) -> Result<ExecMode, BenchError> {
    ExecMode::ALL
        .into_iter()
        .find(|m| m.as_str() == s)
        .ok_or_else(|| BenchError::Spec(format!("unknown mode {s:?}")))
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<(), BenchError> {
    fs::write(dir.join(name), text)?;
    Ok(())
}

fn exp1(a: Exp1Args) -> Result<(), BenchError> {
    let spec = Exp1Spec {
        ts_ms: a.ts,
        ta_ms: a.ta,
        methods: a.methods.iter().map(|m| parse_method(m)).collect::<Result<_, _>>()?,
        repeats: a.repeats,
        ..Exp1Spec::default()
    };
    fs::create_dir_all(&a.out)?;
    let tables = run_exp1(&spec)?;
    let mut text = String::new();
    for t in &tables {
        let grid = t.grid();
        grid.write_csv(File::create(a.out.join(format!("exp1_{}.csv", t.method.as_str())))?)?;
        text.push_str(&grid.render());
        text.push('\n');
    }
    write_text(&a.out, "exp1.txt", &text)?;
    fs::write(a.out.join("exp1.json"), serde_json::to_string_pretty(&tables)?)?;
    print!("{text}");
    Ok(())
}

fn exp2(a: Exp2Args) -> Result<(), BenchError> {
    if a.repeats < 5 {
        return Err(BenchError::Spec("exp2 needs at least 5 repeats per cell".into()));
    }
    let spec = Exp2Spec {
        m: a.m,
        b: a.b,
        modes: a.modes.iter().map(|m| parse_mode(m)).collect::<Result<_, _>>()?,
        repeats: a.repeats,
        ..Exp2Spec::default()
    };
    fs::create_dir_all(&a.out)?;
    let result = run_exp2(&spec)?;
    result.write_csv(File::create(a.out.join("exp2.csv"))?)?;
    let text = result.render();
    write_text(&a.out, "exp2.txt", &text)?;
    fs::write(a.out.join("exp2.json"), serde_json::to_string_pretty(&result)?)?;
    print!("{text}");
    if !result.checksums_agree {
        return Err(BenchError::Run("modes disagree on the product checksum".into()));
    }
    Ok(())
}

fn exp3(a: Exp3Args) -> Result<(), BenchError> {
    let spec = Exp3Spec {
        dims: a.dims,
        depth: a.depth,
        branch: a.branch,
        points: a.points,
        workers: a.workers,
        repeats: a.repeats,
        task_cost: if a.sleep {
            TaskCost::Sleep(a.task_cost)
        } else {
            TaskCost::Work(a.task_cost)
        },
        cluster: reference_cluster(a.dispatch_overhead),
        nodes: a.nodes,
        ..Exp3Spec::default()
    };
    fs::create_dir_all(&a.out)?;
    let result = run_exp3(&spec)?;
    result.measured.write_csv(File::create(a.out.join("exp3_scaling.csv"))?)?;
    result.write_simulated_csv(File::create(a.out.join("exp3_simulated.csv"))?)?;
    let text = result.render();
    write_text(&a.out, "exp3.txt", &text)?;
    fs::write(a.out.join("exp3.json"), serde_json::to_string_pretty(&result)?)?;
    print!("{text}");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let started = std::time::Instant::now();
    let result = match Cli::parse().experiment {
        Experiment::Exp1(a) => exp1(a),
        Experiment::Exp2(a) => exp2(a),
        Experiment::Exp3(a) => exp3(a),
    };
    match result {
        Ok(()) => {
            eprintln!("done in {:.1?}", Duration::from_secs_f64(started.elapsed().as_secs_f64()));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("bench: {e}");
            ExitCode::FAILURE
        }
    }
}
