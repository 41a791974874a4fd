use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use crossbeam_channel::{bounded, RecvTimeoutError, Sender, TrySendError};
use edgetwin_core::aggregation::aggregate;
use edgetwin_core::config::{validate, NodeConfig, NodeType, Violation};
use edgetwin_core::{
    AggregateKind, Clock, DeviceDescriptor, Measurement, MeasurementWindow, Severity, Timestamp,
};
use edgetwin_messaging::{
    AlarmEvent, AppliedAck, Bus, BusError, Command, Frame, FrameType, HeartbeatPayload,
    MeasurementPayload, RoutingKey, Subscription,
};
use log::{debug, info, warn};
use parking_lot::{Mutex, RwLock};
use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

use super::drivers::{Driver, DriverRegistry};
use crate::functions::{
    AsyncSpawner, FunctionEngine, FunctionRegistry, NodeServices, RegistrationError, SensorView, Sensors,
    ThreadSpawner,
};
use crate::offload::Agent;

const DEFAULT_SAMPLING_MS: f64 = 1000.0;
const MAX_BACKOFF: Duration = Duration::from_secs(30);

#[derive(Debug, Error)]
pub enum EdgeError {
    #[error("invalid config: {0:?}")]
    Config(Vec<Violation>),
    #[error("not an edge config")]
    NotEdge,
    #[error("device {device:?}: {reason}")]
    Device { device: String, reason: String },
    #[error(transparent)]
    Registration(#[from] RegistrationError),
    #[error(transparent)]
    Bus(#[from] BusError),
}

/// Produces a fresh bus connection; used to reconnect after a failure.
pub type Connector = Arc<dyn Fn() -> Result<Arc<dyn Bus>, BusError> + Send + Sync>;

pub struct EdgeOptions {
    pub functions: FunctionRegistry,
    pub drivers: Option<DriverRegistry>,
    pub spawner: Arc<dyn AsyncSpawner>,
    /// Capacity of the sampler-to-publisher queue in wall-clock mode.
    pub publish_queue: usize,
    pub connector: Option<Connector>,
    /// Advertised on every heartbeat when present.
    pub agent: Option<Agent>,
}

impl Default for EdgeOptions {
    fn default() -> Self {
        Self {
            functions: FunctionRegistry::with_builtins(),
            drivers: None,
            spawner: Arc::new(ThreadSpawner),
            publish_queue: 1024,
            connector: None,
            agent: None,
        }
    }
}

#[derive(Debug, Default)]
struct Counters {
    samples: AtomicU64,
    publishes: AtomicU64,
    dropped_publishes: AtomicU64,
    publish_errors: AtomicU64,
    aggregation_errors: AtomicU64,
    dispatches: AtomicU64,
    actuations: AtomicU64,
    failed_actuations: AtomicU64,
    heartbeats: AtomicU64,
    reconnects: AtomicU64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SensorReport {
    pub samples: u64,
    pub publishes: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct RunReport {
    pub samples: u64,
    pub publishes: u64,
    pub dropped_publishes: u64,
    pub publish_errors: u64,
    pub aggregation_errors: u64,
    pub dispatches: u64,
    pub actuations: u64,
    pub failed_actuations: u64,
    pub heartbeats: u64,
    pub reconnects: u64,
    pub sensors: BTreeMap<String, SensorReport>,
}

struct Device {
    descriptor: DeviceDescriptor,
    driver: Mutex<Box<dyn Driver>>,
    sensor_key: Option<RoutingKey>,
}

/// State shared between the ingestion loop, function threads and the
/// publisher.
pub struct EdgeShared {
    label: String,
    clock: Arc<dyn Clock>,
    bus: RwLock<Option<Arc<dyn Bus>>>,
    devices: BTreeMap<String, Device>,
    overrides: Mutex<BTreeMap<String, Vec<f64>>>,
    queue: Mutex<Option<Sender<Frame>>>,
    counters: Counters,
    stop: AtomicBool,
    origin: Mutex<Timestamp>,
}

impl EdgeShared {
    pub fn label(&self) -> &str {
        &self.label
    }

    fn publish(&self, frame: Frame) {
        if let Some(tx) = self.queue.lock().as_ref() {
            match tx.try_send(frame) {
                Ok(()) => {}
                Err(TrySendError::Full(_)) | Err(TrySendError::Disconnected(_)) => {
                    self.counters.dropped_publishes.fetch_add(1, Ordering::Relaxed);
                }
            }
            return;
        }
        self.publish_now(frame);
    }

    fn publish_now(&self, frame: Frame) {
        let bus = self.bus.read().clone();
        let Some(bus) = bus else {
            self.counters.publish_errors.fetch_add(1, Ordering::Relaxed);
            return;
        };
        if let Err(e) = bus.publish(frame) {
            self.counters.publish_errors.fetch_add(1, Ordering::Relaxed);
            if matches!(e, BusError::Unreachable(_)) {
                warn!("{}: broker lost ({e}), continuing locally", self.label);
                *self.bus.write() = None;
            }
        }
    }

    /// Applies `command` to an actuator and publishes the outcome on the
    /// device's sensor key when it has one.
    pub fn apply_actuation(&self, actuator: &str, command: Command) -> AppliedAck {
        let result = match self.devices.get(actuator) {
            None => Err(format!("unknown device {actuator:?}")),
            Some(d) if !d.descriptor.is_actuator() => Err(format!("{actuator:?} is not an actuator")),
            Some(d) => d.driver.lock().actuate(&command),
        };
        let ack = match result {
            Ok(state) => {
                self.counters.actuations.fetch_add(1, Ordering::Relaxed);
                AppliedAck {
                    actuator: actuator.to_string(),
                    command,
                    ok: true,
                    state: Some(state),
                    error: None,
                }
            }
            Err(e) => {
                self.counters.failed_actuations.fetch_add(1, Ordering::Relaxed);
                AppliedAck {
                    actuator: actuator.to_string(),
                    command,
                    ok: false,
                    state: None,
                    error: Some(e),
                }
            }
        };
        if let Some(key) = self.devices.get(actuator).and_then(|d| d.sensor_key.clone()) {
            self.publish(Frame::with(key, self.clock.now(), FrameType::Ack, &ack));
        }
        ack
    }

    /// Replaces the readings of `sensor` (after channel selection) until
    /// cleared.
    pub fn set_override(&self, sensor: &str, values: Vec<f64>) {
        self.overrides.lock().insert(sensor.to_string(), values);
    }

    pub fn clear_override(&self, sensor: &str) {
        self.overrides.lock().remove(sensor);
    }

    pub fn stop(&self) {
        self.stop.store(true, Ordering::SeqCst);
    }

    pub fn is_connected(&self) -> bool {
        self.bus.read().is_some()
    }

    pub fn device_state(&self, label: &str) -> Option<Value> {
        self.devices.get(label).and_then(|d| d.driver.lock().state())
    }

    /// Runs `f` on the driver of `label`, e.g. to downcast and inspect it.
    pub fn with_driver<R>(&self, label: &str, f: impl FnOnce(&dyn Driver) -> R) -> Option<R> {
        self.devices.get(label).map(|d| f(d.driver.lock().as_ref()))
    }

    pub fn descriptors(&self) -> Vec<DeviceDescriptor> {
        self.devices.values().map(|d| d.descriptor.clone()).collect()
    }

    pub fn now(&self) -> Timestamp {
        self.clock.now()
    }

    pub fn report(&self) -> RunReport {
        let c = &self.counters;
        let get = |a: &AtomicU64| a.load(Ordering::Relaxed);
        RunReport {
            samples: get(&c.samples),
            publishes: get(&c.publishes),
            dropped_publishes: get(&c.dropped_publishes),
            publish_errors: get(&c.publish_errors),
            aggregation_errors: get(&c.aggregation_errors),
            dispatches: get(&c.dispatches),
            actuations: get(&c.actuations),
            failed_actuations: get(&c.failed_actuations),
            heartbeats: get(&c.heartbeats),
            reconnects: get(&c.reconnects),
            sensors: BTreeMap::new(),
        }
    }
}

impl NodeServices for EdgeShared {
    fn actuate(&self, actuator: &str, command: Command) -> Result<AppliedAck, String> {
        let ack = self.apply_actuation(actuator, command);
        if ack.ok {
            Ok(ack)
        } else {
            Err(ack.error.clone().unwrap_or_default())
        }
    }

    fn alarm(&self, severity: Severity, device: Option<&str>, message: &str) {
        let event = AlarmEvent {
            severity,
            node: self.label.clone(),
            device: device.map(str::to_string),
            message: message.to_string(),
        };
        match RoutingKey::alarms(&self.label) {
            Ok(key) => self.publish(Frame::with(key, self.clock.now(), FrameType::Alarm, &event)),
            Err(e) => warn!("alarm not sent: {e}"),
        }
    }

    fn now(&self) -> Timestamp {
        self.clock.now()
    }
}

struct SensorSchedule {
    label: String,
    key: RoutingKey,
    kind: AggregateKind,
    sampling: Duration,
    ts: i64,
    ta: i64,
    indexes: Vec<usize>,
    window: Arc<RwLock<MeasurementWindow>>,
    next_sample: i64,
    next_publish: i64,
    report: SensorReport,
}

/// Samples every sensor at its `Ts`, publishes an aggregate every `Ta`,
/// evaluates triggers, applies actuation and sends heartbeats. All sensors
/// share one loop and one clock.
pub struct EdgeNode {
    shared: Arc<EdgeShared>,
    engine: FunctionEngine,
    functions: FunctionRegistry,
    pending: Vec<edgetwin_core::config::FuncConfig>,
    sensors: Vec<SensorSchedule>,
    actuation: Option<Subscription>,
    heartbeat: Duration,
    seq: u64,
    agent: Option<Agent>,
    connector: Option<Connector>,
    backoff: Duration,
    next_reconnect: Timestamp,
    queue_capacity: usize,
}

fn device_err(device: &str, reason: impl ToString) -> EdgeError {
    EdgeError::Device {
        device: device.to_string(),
        reason: reason.to_string(),
    }
}

fn ms_to_nanos(ms: f64) -> i64 {
    (ms * 1e6).round() as i64
}

impl EdgeNode {
    pub fn new(
        config: NodeConfig,
        bus: Option<Arc<dyn Bus>>,
        clock: Arc<dyn Clock>,
        options: EdgeOptions,
    ) -> Result<Self, EdgeError> {
        if config.node_type() != NodeType::Edge {
            return Err(EdgeError::NotEdge);
        }
        let violations = validate(&config);
        if !violations.is_empty() {
            return Err(EdgeError::Config(violations));
        }
        for w in config.warnings() {
            warn!("{}: {w}", config.label());
        }
        let label = config.label().to_string();
        let drivers = options.drivers.unwrap_or_else(|| DriverRegistry::new(clock.clone()));

        let mut devices = BTreeMap::new();
        let mut sensors = Vec::new();
        let mut views = Sensors::new();
        let mut actuators = Vec::new();
        for dev in &config.devices {
            let driver = drivers.create(dev).map_err(|e| device_err(&dev.label, e))?;
            let props = &dev.properties;
            let outputs = driver.outputs();
            let indexes = if props.indexes.is_empty() { vec![0] } else { props.indexes.clone() };
            if let Some(&bad) = indexes.iter().find(|&&i| i >= outputs) {
                return Err(device_err(&dev.label, format!("index {bad} out of range (driver has {outputs} outputs)")));
            }
            let mut descriptor =
                DeviceDescriptor::new(&dev.label, driver.kind(), &dev.driver, driver.roles(), indexes.len());
            descriptor
                .properties
                .insert("aggregate".into(), Value::from(props.aggregate.clone()));
            descriptor.validate().map_err(|e| device_err(&dev.label, e))?;

            let mut sensor_key = None;
            if descriptor.is_sensor() {
                let key = RoutingKey::sensor(&label, &dev.label)?;
                sensor_key = Some(key.clone());
                let ts_ms = props.sampling_interval.unwrap_or(DEFAULT_SAMPLING_MS);
                let (n, ta_ms) = match props.aggregation_interval {
                    Some(ta) => ((ta / ts_ms).round() as usize, ta),
                    None => {
                        let n = dev.window_size(config.global.window_size);
                        (n, n as f64 * ts_ms)
                    }
                };
                if n == 0 || ta_ms < ts_ms {
                    return Err(device_err(&dev.label, "aggregation interval shorter than sampling interval"));
                }
                descriptor
                    .properties
                    .insert("sampling-interval".into(), Value::from(ts_ms));
                descriptor
                    .properties
                    .insert("aggregation-interval".into(), Value::from(ta_ms));
                let window = MeasurementWindow::new(&dev.label, n, indexes.len()).map_err(|e| device_err(&dev.label, e))?;
                let window = Arc::new(RwLock::new(window));
                views.insert(dev.label.clone(), SensorView::new(&dev.label, window.clone()));
                sensors.push(SensorSchedule {
                    label: dev.label.clone(),
                    key,
                    kind: props.aggregate_kind().expect("validated"),
                    sampling: Duration::from_nanos(ms_to_nanos(ts_ms) as u64),
                    ts: ms_to_nanos(ts_ms),
                    ta: ms_to_nanos(ta_ms),
                    indexes,
                    window,
                    next_sample: 0,
                    next_publish: 0,
                    report: SensorReport::default(),
                });
            }
            if descriptor.is_actuator() {
                actuators.push(dev.label.clone());
            }
            devices.insert(
                dev.label.clone(),
                Device {
                    descriptor,
                    driver: Mutex::new(driver),
                    sensor_key,
                },
            );
        }

        let shared = Arc::new(EdgeShared {
            label,
            clock: clock.clone(),
            bus: RwLock::new(bus),
            devices,
            overrides: Mutex::new(BTreeMap::new()),
            queue: Mutex::new(None),
            counters: Counters::default(),
            stop: AtomicBool::new(false),
            origin: Mutex::new(clock.now()),
        });
        let engine = FunctionEngine::new(views, actuators, shared.clone(), options.spawner);
        Ok(Self {
            shared,
            engine,
            functions: options.functions,
            heartbeat: config.heartbeat_interval(),
            pending: config.funcs,
            sensors,
            actuation: None,
            seq: 0,
            agent: options.agent,
            connector: options.connector,
            backoff: Duration::from_millis(100),
            next_reconnect: Timestamp(i64::MIN),
            queue_capacity: options.publish_queue.max(1),
        })
    }

    pub fn label(&self) -> &str {
        &self.shared.label
    }

    /// Handle for controlling the node while `run` blocks another thread.
    pub fn shared(&self) -> Arc<EdgeShared> {
        self.shared.clone()
    }

    pub fn engine(&self) -> &FunctionEngine {
        &self.engine
    }

    pub fn agent(&self) -> Option<&Agent> {
        self.agent.as_ref()
    }

    /// Registers config functions that have not been registered yet. Called
    /// by `run`; onStart functions fire here.
    pub fn deploy(&mut self) -> Result<(), EdgeError> {
        let now = self.shared.clock.now();
        for spec in std::mem::take(&mut self.pending) {
            let (_, fired) = self.engine.register(spec, &self.functions, now)?;
            self.shared
                .counters
                .dispatches
                .fetch_add(fired.len() as u64, Ordering::Relaxed);
        }
        Ok(())
    }

    /// Runs for `duration` of node time, or until stopped when `None`.
    /// Report counters accumulate over the node's lifetime.
    pub fn run(&mut self, duration: Option<Duration>) -> Result<RunReport, EdgeError> {
        self.deploy()?;
        let clock = self.shared.clock.clone();
        let start = clock.now();
        *self.shared.origin.lock() = start;
        let end = duration.map(|d| start.0.saturating_add(d.as_nanos() as i64));
        for s in &mut self.sensors {
            s.next_sample = start.0;
            s.next_publish = start.0 + s.ta;
        }
        let mut next_hb = start.0;
        let worker = (!clock.is_virtual()).then(|| self.start_publisher());
        if self.actuation.is_none() {
            self.bind_actuation();
        }

        loop {
            if self.shared.stop.load(Ordering::SeqCst) {
                break;
            }
            let mut t = next_hb;
            for s in &self.sensors {
                t = t.min(s.next_sample).min(s.next_publish);
            }
            if let Some(f) = self.engine.next_fire() {
                t = t.min(f.0);
            }
            if end.is_some_and(|e| t > e) {
                break;
            }
            self.wait_until(Timestamp(t));
            if self.shared.stop.load(Ordering::SeqCst) {
                break;
            }
            self.drain_actuation();
            if next_hb == t {
                self.send_heartbeat(Timestamp(t));
                next_hb += self.heartbeat.as_nanos() as i64;
            }
            for i in 0..self.sensors.len() {
                if self.sensors[i].next_publish == t {
                    self.publish_window(i, Timestamp(t));
                    self.sensors[i].next_publish += self.sensors[i].ta;
                }
            }
            for i in 0..self.sensors.len() {
                if self.sensors[i].next_sample == t {
                    self.sample(i, Timestamp(t));
                    self.sensors[i].next_sample += self.sensors[i].ts;
                }
            }
            let fired = self.engine.tick(Timestamp(t));
            self.shared
                .counters
                .dispatches
                .fetch_add(fired.len() as u64, Ordering::Relaxed);
        }

        self.drain_actuation();
        if let Some(handle) = worker {
            self.stop_publisher(handle);
        }
        let mut report = self.shared.report();
        report.sensors = self
            .sensors
            .iter()
            .map(|s| (s.label.clone(), s.report.clone()))
            .collect();
        Ok(report)
    }

    fn start_publisher(&self) -> JoinHandle<()> {
        let (tx, rx) = bounded::<Frame>(self.queue_capacity);
        *self.shared.queue.lock() = Some(tx);
        let shared = self.shared.clone();
        std::thread::Builder::new()
            .name(format!("{}-publisher", shared.label))
            .spawn(move || {
                while let Ok(frame) = rx.recv() {
                    shared.publish_now(frame);
                }
            })
            .expect("spawn publisher")
    }

    fn stop_publisher(&self, handle: JoinHandle<()>) {
        self.shared.queue.lock().take();
        let _ = handle.join();
    }

    /// Waits for `t`, applying actuation commands as they arrive.
    fn wait_until(&mut self, t: Timestamp) {
        let clock = self.shared.clock.clone();
        if clock.is_virtual() {
            clock.wait_until(t);
            return;
        }
        loop {
            let now = clock.now();
            if now >= t || self.shared.stop.load(Ordering::SeqCst) {
                return;
            }
            // stop() is noticed within one slice
            let slice = t.duration_since(now).min(Duration::from_millis(50));
            match &self.actuation {
                Some(sub) => match sub.recv_timeout(slice) {
                    Ok(frame) => self.handle_actuation(frame),
                    Err(RecvTimeoutError::Timeout) => {}
                    Err(RecvTimeoutError::Disconnected) => {
                        self.actuation = None;
                    }
                },
                None => std::thread::sleep(slice),
            }
        }
    }

    fn drain_actuation(&mut self) {
        let frames = self.actuation.as_ref().map(Subscription::drain).unwrap_or_default();
        for f in frames {
            self.handle_actuation(f);
        }
    }

    fn handle_actuation(&self, frame: Frame) {
        if frame.frame_type != FrameType::Actuation {
            return;
        }
        let Some((_, actuator)) = frame.key.as_actuator() else {
            return;
        };
        let actuator = actuator.to_string();
        match frame.payload_as::<Command>() {
            Ok(cmd) => {
                let ack = self.shared.apply_actuation(&actuator, cmd);
                debug!("{}: actuation {actuator} ok={}", self.shared.label, ack.ok);
            }
            Err(e) => warn!("{}: malformed actuation for {actuator}: {e}", self.shared.label),
        }
    }

    fn bind_actuation(&mut self) {
        let bus = self.shared.bus.read().clone();
        if let Some(bus) = bus {
            match bus.bind_actuation(&self.shared.label) {
                Ok(sub) => self.actuation = Some(sub),
                Err(e) => warn!("{}: actuation consumer not bound: {e}", self.shared.label),
            }
        }
    }

    fn reconnect(&mut self, now: Timestamp) {
        let Some(connector) = self.connector.clone() else {
            return;
        };
        if now < self.next_reconnect {
            return;
        }
        match connector() {
            Ok(bus) => {
                info!("{}: broker connection restored", self.shared.label);
                *self.shared.bus.write() = Some(bus);
                self.shared.counters.reconnects.fetch_add(1, Ordering::Relaxed);
                self.backoff = Duration::from_millis(100);
                self.bind_actuation();
            }
            Err(e) => {
                debug!("{}: reconnect failed: {e}", self.shared.label);
                self.next_reconnect = Timestamp(now.0 + self.backoff.as_nanos() as i64);
                self.backoff = (self.backoff * 2).min(MAX_BACKOFF);
            }
        }
    }

    fn send_heartbeat(&mut self, now: Timestamp) {
        if !self.shared.is_connected() || self.actuation.is_none() {
            self.actuation = None;
            if self.shared.is_connected() {
                self.bind_actuation();
            } else {
                self.reconnect(now);
            }
        }
        let (total, free) = match &self.agent {
            Some(a) => {
                if let Err(e) = a.advertise() {
                    debug!("agent advertise failed: {e}");
                }
                (a.total_slots(), a.free_slots())
            }
            None => (0, 0),
        };
        let payload = HeartbeatPayload {
            node: self.shared.label.clone(),
            seq: self.seq,
            devices: self.shared.descriptors(),
            interval_ms: self.heartbeat.as_millis() as u64,
            total_slots: total,
            free_slots: free,
        };
        self.seq += 1;
        match RoutingKey::heartbeat(&self.shared.label) {
            Ok(key) => {
                self.shared.publish(Frame::with(key, now, FrameType::Heartbeat, &payload));
                self.shared.counters.heartbeats.fetch_add(1, Ordering::Relaxed);
            }
            Err(e) => warn!("heartbeat not sent: {e}"),
        }
    }

    fn sample(&mut self, i: usize, t: Timestamp) {
        let origin = *self.shared.origin.lock();
        let s = &mut self.sensors[i];
        let override_values = self.shared.overrides.lock().get(&s.label).cloned();
        let values = match override_values {
            Some(v) => v,
            None => {
                let dev = &self.shared.devices[&s.label];
                let raw = dev.driver.lock().sample(t.duration_since(origin).as_secs_f64());
                s.indexes.iter().map(|&c| raw[c]).collect()
            }
        };
        let m = Measurement::new(t, values, &s.label);
        if let Err(e) = s.window.write().push(&m) {
            warn!("{}: sample dropped: {e}", s.label);
            return;
        }
        s.report.samples += 1;
        self.shared.counters.samples.fetch_add(1, Ordering::Relaxed);
        let label = s.label.clone();
        let fired = self.engine.on_measurement(&label, &m);
        self.shared
            .counters
            .dispatches
            .fetch_add(fired.len() as u64, Ordering::Relaxed);
    }

    fn publish_window(&mut self, i: usize, t: Timestamp) {
        let s = &mut self.sensors[i];
        let window = s.window.read();
        let Some(window_start) = window.oldest_timestamp() else {
            return;
        };
        match aggregate(&window, s.kind, s.sampling) {
            Ok(agg) => {
                let payload = MeasurementPayload {
                    sensor: s.label.clone(),
                    window_start,
                    samples: window.len(),
                    sampling_interval_ms: s.ts as f64 / 1e6,
                    aggregate: agg,
                };
                drop(window);
                self.shared
                    .publish(Frame::with(s.key.clone(), t, FrameType::Measurement, &payload));
                s.report.publishes += 1;
                self.shared.counters.publishes.fetch_add(1, Ordering::Relaxed);
            }
            Err(e) => {
                debug!("{}: aggregation failed: {e}", s.label);
                self.shared
                    .counters
                    .aggregation_errors
                    .fetch_add(1, Ordering::Relaxed);
            }
        }
    }
}
