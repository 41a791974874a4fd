//! Response time of a sensor-triggered blocked matrix multiplication,
//! executed sequentially, on the edge's own slots, or offloaded to a cloud
//! agent over TCP loopback.
//!
//! A change of the trigger sensor fires an asynchronous function that runs
//! the graph and then actuates an alert sink, which records when the alert
//! went out. The response time is that instant minus the timestamp of the
//! triggering measurement.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use edgetwin_core::config::parse_config;
use edgetwin_core::{Clock, Timestamp, WallClock};
use edgetwin_messaging::{command, Broker, BrokerServer, Bus, RemoteBus};
use edgetwin_runtime::edge::{EdgeNode, EdgeOptions, EdgeShared, MsgAlertDriver, RunReport};
use edgetwin_runtime::functions::{Actuators, FunctionError, FunctionRegistry, Params, Sensors};
use edgetwin_runtime::offload::matmul::{blocked_matmul_graph, result_checksum};
use edgetwin_runtime::offload::{Agent, ExecMode, TaskGraph, TaskRegistry};
use serde::Serialize;
use serde_json::{json, Value};

use crate::report::median;
use crate::BenchError;

pub const TRIGGER: &str = "TRIG";
pub const ALERT: &str = "ALERT";
const PROBE: &str = "ResponseProbe";

#[derive(Debug, Clone)]
pub struct Exp2Spec {
    pub m: Vec<usize>,
    pub b: Vec<usize>,
    pub modes: Vec<ExecMode>,
    pub repeats: usize,
    pub seed: u64,
    pub edge_slots_parallel: usize,
    pub cloud_slots: usize,
    /// Give up on a single response after this long.
    pub timeout: Duration,
}

impl Default for Exp2Spec {
    fn default() -> Self {
        Self {
            m: vec![4],
            b: vec![1, 2, 4, 8, 16, 32, 64, 128],
            modes: ExecMode::ALL.to_vec(),
            repeats: 5,
            seed: 7,
            edge_slots_parallel: 2,
            cloud_slots: 4,
            timeout: Duration::from_secs(300),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ResponseCell {
    pub mode: ExecMode,
    pub m: usize,
    pub b: usize,
    pub times_ms: Vec<f64>,
    pub median_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub checksum: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Exp2Result {
    pub repeats: usize,
    pub cells: Vec<ResponseCell>,
    /// Per `m`: smallest `b` at which offloading beats sequential execution.
    pub crossover: BTreeMap<usize, Option<usize>>,
    /// Whether every mode produced the same checksum for each `(m, b)`.
    pub checksums_agree: bool,
}

impl Exp2Result {
    pub fn median(&self, mode: ExecMode, m: usize, b: usize) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.mode == mode && c.m == m && c.b == b)
            .map(|c| c.median_ms)
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["mode", "m", "b", "repeats", "median_ms", "min_ms", "max_ms", "checksum"])?;
        for c in &self.cells {
            w.write_record([
                c.mode.as_str().to_string(),
                c.m.to_string(),
                c.b.to_string(),
                c.times_ms.len().to_string(),
                format!("{:.3}", c.median_ms),
                format!("{:.3}", c.min_ms),
                format!("{:.3}", c.max_ms),
                c.checksum.clone(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut s = String::from("Median response time (ms)\n");
        s.push_str(&format!("{:>4} {:>5}", "m", "b"));
        let modes: Vec<ExecMode> = ExecMode::ALL
            .into_iter()
            .filter(|&mo| self.cells.iter().any(|c| c.mode == mo))
            .collect();
        for mo in &modes {
            s.push_str(&format!(" {:>15}", mo.as_str()));
        }
        s.push('\n');
        let mut keys: Vec<(usize, usize)> = self.cells.iter().map(|c| (c.m, c.b)).collect();
        keys.sort();
        keys.dedup();
        for (m, b) in keys {
            s.push_str(&format!("{m:>4} {b:>5}"));
            for &mo in &modes {
                match self.median(mo, m, b) {
                    Some(v) => s.push_str(&format!(" {v:>15.3}")),
                    None => s.push_str(&format!(" {:>15}", "-")),
                }
            }
            s.push('\n');
        }
        for (m, b) in &self.crossover {
            match b {
                Some(b) => s.push_str(&format!("m={m}: offloading first beats sequential at b={b}\n")),
                None => s.push_str(&format!("m={m}: offloading never beat sequential\n")),
            }
        }
        s
    }
}

/// Smallest `b` whose offload median is below the sequential median.
pub fn crossover(cells: &[ResponseCell], m: usize) -> Option<usize> {
    let mut bs: Vec<usize> = cells.iter().filter(|c| c.m == m).map(|c| c.b).collect();
    bs.sort();
    bs.dedup();
    let med = |mode: ExecMode, b: usize| {
        cells
            .iter()
            .find(|c| c.mode == mode && c.m == m && c.b == b)
            .map(|c| c.median_ms)
    };
    bs.into_iter().find(|&b| match (med(ExecMode::Offload, b), med(ExecMode::Sequential, b)) {
        (Some(o), Some(s)) => o < s,
        _ => false,
    })
}

/// Broker, cloud agent and a wall-clock edge node wired for one mode.
pub struct Rig {
    mode: ExecMode,
    server: BrokerServer,
    cloud: Agent,
    edge: Option<JoinHandle<Result<RunReport, BenchError>>>,
    shared: Arc<EdgeShared>,
    workload: Arc<Mutex<Option<Arc<TaskGraph>>>>,
    advertiser: Option<JoinHandle<()>>,
    stop: Arc<std::sync::atomic::AtomicBool>,
    trigger_value: f64,
}

fn edge_config() -> Result<edgetwin_core::config::NodeConfig, BenchError> {
    let text = json!({
        "global-properties": {"type": "edge", "label": "edge1", "heartbeat-interval": 1000},
        "devices": [
            {
                "label": TRIGGER,
                "driver": "synthetic.Sensor",
                "properties": {
                    "sampling-interval": 5,
                    "aggregation-interval": 1000,
                    "aggregate": "last",
                    "signal": {"amplitude": 0.0},
                }
            },
            {"label": ALERT, "driver": "MsgAlert"}
        ],
        "funcs": [{
            "label": PROBE,
            "lang": "Rust",
            "type": "asynchronous",
            "method-name": PROBE,
            "parameters": {"sensors": [TRIGGER], "actuators": [ALERT]},
            "trigger": {"type": "onChange", "parameters": {"trigger-sensor": [TRIGGER]}}
        }]
    });
    Ok(parse_config(&text.to_string())?)
}

impl Rig {
    pub fn start(mode: ExecMode, spec: &Exp2Spec) -> Result<Self, BenchError> {
        let server = BrokerServer::bind("127.0.0.1:0", Broker::new())?;
        let addr = server.local_addr();
        let clock: Arc<dyn Clock> = Arc::new(WallClock);
        let tasks = Arc::new(TaskRegistry::with_builtins());

        let cloud_bus: Arc<dyn Bus> = Arc::new(RemoteBus::connect(addr)?);
        let cloud = Agent::new("cloud", spec.cloud_slots, tasks.clone(), Some(cloud_bus), clock.clone())?;

        let edge_slots = match mode {
            ExecMode::LocalParallel => spec.edge_slots_parallel,
            _ => 1,
        };
        let edge_bus: Arc<dyn Bus> = Arc::new(RemoteBus::connect(addr)?);
        let agent = Agent::new("edge1", edge_slots, tasks, Some(edge_bus.clone()), clock.clone())?;

        let stop = Arc::new(std::sync::atomic::AtomicBool::new(false));
        let advertiser = {
            let cloud = cloud.clone();
            let stop = stop.clone();
            std::thread::spawn(move || {
                while !stop.load(std::sync::atomic::Ordering::SeqCst) {
                    if let Err(e) = cloud.advertise() {
                        log::warn!("cloud advertise: {e}");
                    }
                    std::thread::sleep(Duration::from_millis(500));
                }
            })
        };
        if !agent.wait_for_peer("cloud", Duration::from_secs(10)) {
            return Err(BenchError::Run("cloud agent never advertised".into()));
        }

        let workload: Arc<Mutex<Option<Arc<TaskGraph>>>> = Arc::new(Mutex::new(None));
        let mut functions = FunctionRegistry::new();
        {
            let workload = workload.clone();
            let agent = agent.clone();
            functions.register(
                PROBE,
                Arc::new(move |sensors: &Sensors, actuators: &Actuators, _: &Params| {
                    probe(sensors, actuators, &agent, mode, &workload)
                }),
            );
        }
        let options = EdgeOptions {
            functions,
            agent: Some(agent),
            ..EdgeOptions::default()
        };
        let mut node = EdgeNode::new(edge_config()?, Some(edge_bus), clock, options)?;
        let shared = node.shared();
        node.deploy()?;
        let edge = std::thread::Builder::new()
            .name("exp2-edge".into())
            .spawn(move || node.run(None).map_err(BenchError::from))?;
        // onChange needs a baseline reading before the first trigger
        let deadline = Instant::now() + Duration::from_secs(10);
        while shared.report().samples < 2 {
            if Instant::now() > deadline {
                return Err(BenchError::Run("edge node did not start sampling".into()));
            }
            std::thread::sleep(Duration::from_millis(2));
        }
        Ok(Self {
            mode,
            server,
            cloud,
            edge: Some(edge),
            shared,
            workload,
            advertiser: Some(advertiser),
            stop,
            trigger_value: 0.0,
        })
    }

    fn alerts(&self) -> Vec<(Timestamp, Value)> {
        self.shared
            .with_driver(ALERT, |d| {
                d.as_any()
                    .downcast_ref::<MsgAlertDriver>()
                    .map(|m| {
                        m.records()
                            .iter()
                            .map(|r| (r.emitted, Value::Object(r.command.clone().into_iter().collect())))
                            .collect()
                    })
                    .unwrap_or_default()
            })
            .unwrap_or_default()
    }

    /// Triggers one response and returns `(milliseconds, checksum)`.
    pub fn respond(&mut self, graph: Arc<TaskGraph>, timeout: Duration) -> Result<(f64, String), BenchError> {
        *self.workload.lock().unwrap() = Some(graph);
        let before = self.alerts().len();
        self.trigger_value += 1.0;
        self.shared.set_override(TRIGGER, vec![self.trigger_value]);
        let deadline = Instant::now() + timeout;
        loop {
            let alerts = self.alerts();
            if alerts.len() > before {
                let (emitted, cmd) = &alerts[before];
                if let Some(err) = cmd.get("error").and_then(Value::as_str) {
                    return Err(BenchError::Run(format!("{}: {err}", self.mode)));
                }
                let measured = cmd
                    .get("measured_at")
                    .and_then(Value::as_i64)
                    .ok_or_else(|| BenchError::Run("alert without measured_at".into()))?;
                let ms = Timestamp(emitted.as_nanos() - measured).as_nanos() as f64 / 1e6;
                let sum = cmd.get("checksum").and_then(Value::as_str).unwrap_or_default().to_string();
                return Ok((ms, sum));
            }
            if Instant::now() > deadline {
                return Err(BenchError::Run(format!("{}: no response within {timeout:?}", self.mode)));
            }
            std::thread::sleep(Duration::from_micros(200));
        }
    }

    pub fn cloud(&self) -> &Agent {
        &self.cloud
    }

    pub fn broker_addr(&self) -> std::net::SocketAddr {
        self.server.local_addr()
    }
}

impl Drop for Rig {
    fn drop(&mut self) {
        self.stop.store(true, std::sync::atomic::Ordering::SeqCst);
        self.shared.stop();
        if let Some(h) = self.edge.take() {
            let _ = h.join();
        }
        if let Some(h) = self.advertiser.take() {
            let _ = h.join();
        }
        self.server.shutdown();
    }
}

fn probe(
    sensors: &Sensors,
    actuators: &Actuators,
    agent: &Agent,
    mode: ExecMode,
    workload: &Mutex<Option<Arc<TaskGraph>>>,
) -> Result<Option<Value>, FunctionError> {
    let measured = sensors
        .get(TRIGGER)
        .and_then(|s| s.latest())
        .ok_or_else(|| FunctionError::Failed("no trigger reading".into()))?
        .timestamp;
    let graph = workload
        .lock()
        .unwrap()
        .clone()
        .ok_or_else(|| FunctionError::Failed("no workload".into()))?;
    // keeping the edge's own slots busy sends the whole graph to the cloud
    let _held = (mode == ExecMode::Offload).then(|| agent.reserve(agent.total_slots()));
    let mut cmd = command("alert");
    cmd.insert("measured_at".into(), json!(measured.as_nanos()));
    match agent.run(&graph, mode) {
        Ok(report) => {
            cmd.insert("checksum".into(), json!(result_checksum(&report.results).unwrap_or_default()));
        }
        Err(e) => {
            cmd.insert("error".into(), json!(e.to_string()));
        }
    }
    actuators.actuate(ALERT, cmd)?;
    Ok(None)
}

pub fn run_exp2(spec: &Exp2Spec) -> Result<Exp2Result, BenchError> {
    if spec.repeats == 0 {
        return Err(BenchError::Spec("repeats must be at least 1".into()));
    }
    let mut cells = Vec::new();
    for &mode in &spec.modes {
        let mut rig = Rig::start(mode, spec)?;
        for &m in &spec.m {
            for &b in &spec.b {
                let graph = Arc::new(blocked_matmul_graph(m, b, spec.seed).graph);
                // one untimed warm-up per cell
                rig.respond(graph.clone(), spec.timeout)?;
                let mut times = Vec::with_capacity(spec.repeats);
                let mut checksum = String::new();
                for _ in 0..spec.repeats {
                    let (ms, sum) = rig.respond(graph.clone(), spec.timeout)?;
                    times.push(ms);
                    checksum = sum;
                }
                let median_ms = median(&times);
                log::info!("exp2 {mode} m={m} b={b}: median {median_ms:.3} ms");
                cells.push(ResponseCell {
                    mode,
                    m,
                    b,
                    min_ms: times.iter().copied().fold(f64::INFINITY, f64::min),
                    max_ms: times.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                    times_ms: times,
                    median_ms,
                    checksum,
                });
            }
        }
    }
    let crossover = spec.m.iter().map(|&m| (m, crossover(&cells, m))).collect();
    let mut checksums_agree = true;
    for c in &cells {
        if cells.iter().any(|o| o.m == c.m && o.b == c.b && o.checksum != c.checksum) {
            checksums_agree = false;
        }
    }
    Ok(Exp2Result {
        repeats: spec.repeats,
        cells,
        crossover,
        checksums_agree,
    })
}
