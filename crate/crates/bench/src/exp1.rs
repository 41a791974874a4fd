//! Bandwidth of one edge sensor as a function of sampling interval `Ts`
//! and aggregation interval `Ta`, metered at the broker on the virtual
//! clock.

use std::sync::Arc;
use std::time::Duration;

use edgetwin_core::config::parse_config;
use edgetwin_core::{AggregateKind, Timestamp, VirtualClock};
use edgetwin_messaging::{Broker, Bus, KeyPattern};
use edgetwin_runtime::edge::{EdgeNode, EdgeOptions};
use serde::Serialize;
use serde_json::json;

use crate::report::Grid;
use crate::BenchError;

#[derive(Debug, Clone)]
pub struct Exp1Spec {
    pub ts_ms: Vec<u64>,
    pub ta_ms: Vec<u64>,
    pub methods: Vec<AggregateKind>,
    pub repeats: usize,
    /// Each run lasts `max(min_duration, cycles * Ta)` of virtual time.
    pub min_duration: Duration,
    pub cycles: u32,
    pub seed: u64,
}

impl Default for Exp1Spec {
    fn default() -> Self {
        Self {
            ts_ms: vec![1, 10, 100, 1000],
            ta_ms: vec![1, 10, 100, 1000, 10_000],
            methods: vec![AggregateKind::All, AggregateKind::Phasor],
            repeats: 5,
            min_duration: Duration::from_secs(10),
            cycles: 10,
            seed: 1,
        }
    }
}

/// `all` needs `Ta >= Ts`; the other methods need more than one sample
/// per window, so `Ta > Ts` (and enough samples for the method).
pub fn applicable(kind: AggregateKind, ts_ms: u64, ta_ms: u64) -> bool {
    match kind {
        AggregateKind::All => ta_ms >= ts_ms,
        _ => ta_ms > ts_ms && (ta_ms / ts_ms) as usize >= kind.min_samples(),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BandwidthCell {
    pub ts_ms: u64,
    pub ta_ms: u64,
    /// Bytes per virtual second, one per repeat.
    pub runs: Vec<f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BandwidthTable {
    pub method: AggregateKind,
    pub repeats: usize,
    pub ts_ms: Vec<u64>,
    pub ta_ms: Vec<u64>,
    pub cells: Vec<Vec<Option<BandwidthCell>>>,
}

impl BandwidthTable {
    pub fn get(&self, ts_ms: u64, ta_ms: u64) -> Option<f64> {
        let i = self.ts_ms.iter().position(|&t| t == ts_ms)?;
        let j = self.ta_ms.iter().position(|&t| t == ta_ms)?;
        self.cells[i][j].as_ref().map(|c| c.mean)
    }

    pub fn grid(&self) -> Grid {
        Grid {
            title: format!(
                "Required bandwidth (bytes/s), {} aggregation, mean of {} runs",
                self.method.as_str(),
                self.repeats
            ),
            corner: "Ts\\Ta (ms)".into(),
            rows: self.ts_ms.iter().map(u64::to_string).collect(),
            cols: self.ta_ms.iter().map(u64::to_string).collect(),
            cells: self
                .cells
                .iter()
                .map(|row| row.iter().map(|c| c.as_ref().map(|c| c.mean)).collect())
                .collect(),
        }
    }
}

fn edge_config(kind: AggregateKind, ts_ms: u64, ta_ms: u64, seed: u64) -> Result<edgetwin_core::config::NodeConfig, BenchError> {
    let text = json!({
        "global-properties": {"type": "edge", "label": "edge1", "heartbeat-interval": 1000},
        "devices": [{
            "label": "V1",
            "driver": "synthetic.Voltmeter",
            "properties": {
                "sampling-interval": ts_ms,
                "aggregation-interval": ta_ms,
                "aggregate": kind.as_str(),
                "signal": {"amplitude": 325.0, "frequency": 50.0, "noise-std": 1.0, "seed": seed},
            }
        }],
        "funcs": [],
    });
    Ok(parse_config(&text.to_string())?)
}

/// One run: bytes per second of sensor traffic seen by the broker.
pub fn measure(kind: AggregateKind, ts_ms: u64, ta_ms: u64, duration: Duration, seed: u64) -> Result<f64, BenchError> {
    let broker = Broker::new();
    let start = Timestamp::from_secs_f64(1_000.0);
    let clock = VirtualClock::new(start);
    let pattern: KeyPattern = "edge.*.sensors.*".parse()?;
    let meter = broker.attach_meter(pattern, Duration::from_secs(1), start);
    let bus: Arc<dyn Bus> = Arc::new(broker);
    let mut node = EdgeNode::new(
        edge_config(kind, ts_ms, ta_ms, seed)?,
        Some(bus),
        Arc::new(clock.clone()),
        EdgeOptions::default(),
    )?;
    let report = node.run(Some(duration))?;
    if report.aggregation_errors > 0 || report.publish_errors > 0 {
        return Err(BenchError::Run(format!("Ts={ts_ms} Ta={ta_ms}: {report:?}")));
    }
    let end = Timestamp(start.as_nanos() + duration.as_nanos() as i64);
    let rate = meter.lock().mean_rate(end).map_err(|e| BenchError::Run(e.to_string()))?;
    Ok(rate)
}

pub fn run_exp1(spec: &Exp1Spec) -> Result<Vec<BandwidthTable>, BenchError> {
    if spec.repeats == 0 {
        return Err(BenchError::Spec("repeats must be at least 1".into()));
    }
    let mut tables = Vec::new();
    for &kind in &spec.methods {
        let mut cells = Vec::new();
        for &ts in &spec.ts_ms {
            let mut row = Vec::new();
            for &ta in &spec.ta_ms {
                if !applicable(kind, ts, ta) {
                    row.push(None);
                    continue;
                }
                let duration = spec.min_duration.max(Duration::from_millis(ta) * spec.cycles);
                let runs = (0..spec.repeats)
                    .map(|r| measure(kind, ts, ta, duration, spec.seed + r as u64))
                    .collect::<Result<Vec<f64>, _>>()?;
                let mean = runs.iter().sum::<f64>() / runs.len() as f64;
                log::info!("exp1 {} Ts={ts} Ta={ta}: {mean:.1} B/s", kind.as_str());
                row.push(Some(BandwidthCell {
                    ts_ms: ts,
                    ta_ms: ta,
                    runs,
                    mean,
                }));
            }
            cells.push(row);
        }
        tables.push(BandwidthTable {
            method: kind,
            repeats: spec.repeats,
            ts_ms: spec.ts_ms.clone(),
            ta_ms: spec.ta_ms.clone(),
            cells,
        });
    }
    Ok(tables)
}
