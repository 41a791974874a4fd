use std::collections::{BTreeSet, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use edgetwin_core::config::{ExecType, FuncConfig, TriggerKind};
use edgetwin_core::{Measurement, Severity, Timestamp};
use serde_json::Value;

use super::{Actuators, Callable, FunctionRegistry, NodeServices, Params, RegistrationError, Sensors};

const LANGUAGES: [&str; 3] = ["rust", "java", "native"];

#[derive(Debug, Clone, PartialEq)]
pub struct TriggerEvent {
    pub kind: TriggerKind,
    pub source: Option<String>,
    pub fire_time: Timestamp,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Completed(Option<Value>),
    Failed(String),
    /// Handed to the asynchronous spawner.
    Submitted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Execution {
    pub func: String,
    pub event: TriggerEvent,
    pub outcome: Outcome,
}

/// Runs asynchronous function bodies off the ingestion path.
pub trait AsyncSpawner: Send + Sync {
    fn spawn(&self, job: Box<dyn FnOnce() + Send>);
}

/// One OS thread per asynchronous dispatch.
#[derive(Debug, Default, Clone, Copy)]
pub struct ThreadSpawner;

impl AsyncSpawner for ThreadSpawner {
    fn spawn(&self, job: Box<dyn FnOnce() + Send>) {
        std::thread::spawn(job);
    }
}

pub struct FunctionBinding {
    pub spec: FuncConfig,
    callable: Callable,
    sensors: Sensors,
    actuators: Actuators,
    params: Arc<Params>,
    counters: HashMap<String, u64>,
    last_values: HashMap<String, Vec<f64>>,
    next_fire: Option<Timestamp>,
    period: Option<Duration>,
    dispatches: u64,
}

impl FunctionBinding {
    pub fn dispatches(&self) -> u64 {
        self.dispatches
    }

    pub fn read_count(&self, sensor: &str) -> u64 {
        self.counters.get(sensor).copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BindingId(pub usize);

pub struct FunctionEngine {
    bindings: Vec<FunctionBinding>,
    sensors: Sensors,
    actuator_labels: BTreeSet<String>,
    services: Arc<dyn NodeServices>,
    spawner: Arc<dyn AsyncSpawner>,
    in_flight: Arc<AtomicUsize>,
}

fn run_guarded(
    callable: &Callable,
    sensors: &Sensors,
    actuators: &Actuators,
    params: &Params,
) -> Result<Option<Value>, String> {
    match catch_unwind(AssertUnwindSafe(|| callable(sensors, actuators, params))) {
        Ok(Ok(v)) => Ok(v),
        Ok(Err(e)) => Err(e.to_string()),
        Err(panic) => Err(panic
            .downcast_ref::<&str>()
            .map(|s| s.to_string())
            .or_else(|| panic.downcast_ref::<String>().cloned())
            .unwrap_or_else(|| "function panicked".into())),
    }
}

impl FunctionEngine {
    /// `sensors` and `actuators` are every device of the node; bindings get
    /// the subset their config names.
    pub fn new(
        sensors: Sensors,
        actuators: impl IntoIterator<Item = String>,
        services: Arc<dyn NodeServices>,
        spawner: Arc<dyn AsyncSpawner>,
    ) -> Self {
        Self {
            bindings: Vec::new(),
            sensors,
            actuator_labels: actuators.into_iter().collect(),
            services,
            spawner,
            in_flight: Arc::new(AtomicUsize::new(0)),
        }
    }

    pub fn bindings(&self) -> &[FunctionBinding] {
        &self.bindings
    }

    pub fn binding(&self, id: BindingId) -> &FunctionBinding {
        &self.bindings[id.0]
    }

    /// Validates and activates a binding. onStart bindings fire before this
    /// returns; onFrequency bindings first fire one period after `now`.
    pub fn register(
        &mut self,
        spec: FuncConfig,
        registry: &FunctionRegistry,
        now: Timestamp,
    ) -> Result<(BindingId, Vec<Execution>), RegistrationError> {
        if !LANGUAGES.contains(&spec.lang.to_ascii_lowercase().as_str()) {
            return Err(RegistrationError::UnsupportedLanguage(spec.lang.clone()));
        }
        if self.bindings.iter().any(|b| b.spec.label == spec.label) {
            return Err(RegistrationError::DuplicateLabel(spec.label.clone()));
        }
        let callable = registry
            .resolve(&spec.method_name)
            .ok_or_else(|| RegistrationError::UnknownMethod(spec.method_name.clone()))?;

        let dangling = |label: &String| RegistrationError::DanglingReference {
            func: spec.label.clone(),
            label: label.clone(),
        };
        let mut sensors = Sensors::new();
        for label in spec.parameters.sensors.iter().chain(&spec.trigger.parameters.trigger_sensor) {
            let view = self.sensors.get(label).ok_or_else(|| dangling(label))?;
            sensors.insert(label.clone(), view.clone());
        }
        for label in &spec.parameters.actuators {
            if !self.actuator_labels.contains(label) {
                return Err(dangling(label));
            }
        }

        let trigger = &spec.trigger;
        let needs_source = matches!(trigger.kind, TriggerKind::OnRead | TriggerKind::OnChange);
        if needs_source && trigger.parameters.trigger_sensor.is_empty() {
            return Err(RegistrationError::InvalidTrigger(spec.label.clone()));
        }
        let period = trigger.period();
        if trigger.kind == TriggerKind::OnFrequency && period.is_none() {
            return Err(RegistrationError::InvalidTrigger(spec.label.clone()));
        }

        let actuators = Actuators::new(spec.parameters.actuators.clone(), self.services.clone());
        let params = Arc::new(spec.parameters.other.clone());
        let kind = trigger.kind;
        self.bindings.push(FunctionBinding {
            next_fire: period.map(|p| now + p),
            period,
            spec,
            callable,
            sensors,
            actuators,
            params,
            counters: HashMap::new(),
            last_values: HashMap::new(),
            dispatches: 0,
        });
        let id = BindingId(self.bindings.len() - 1);
        let mut out = Vec::new();
        if kind == TriggerKind::OnStart {
            let event = TriggerEvent {
                kind,
                source: None,
                fire_time: now,
            };
            out.push(self.dispatch(id.0, event));
        }
        Ok((id, out))
    }

    /// Call after the measurement is already in `sensor`'s window.
    pub fn on_measurement(&mut self, sensor: &str, m: &Measurement) -> Vec<Execution> {
        let mut due = Vec::new();
        for (i, b) in self.bindings.iter_mut().enumerate() {
            let trigger = &b.spec.trigger;
            if !trigger.parameters.trigger_sensor.iter().any(|s| s == sensor) {
                continue;
            }
            match trigger.kind {
                TriggerKind::OnRead => {
                    let k = trigger.read_interval();
                    let c = b.counters.entry(sensor.to_string()).or_insert(0);
                    *c += 1;
                    if *c % k == 0 {
                        due.push(i);
                    }
                }
                TriggerKind::OnChange => {
                    let eps = trigger.parameters.epsilon;
                    let changed = match b.last_values.get(sensor) {
                        None => false,
                        Some(prev) => {
                            prev.len() != m.values.len()
                                || prev.iter().zip(&m.values).any(|(a, v)| (a - v).abs() > eps)
                        }
                    };
                    b.last_values.insert(sensor.to_string(), m.values.clone());
                    *b.counters.entry(sensor.to_string()).or_insert(0) += 1;
                    if changed {
                        due.push(i);
                    }
                }
                TriggerKind::OnFrequency | TriggerKind::OnStart => {}
            }
        }
        due.into_iter()
            .map(|i| {
                let event = TriggerEvent {
                    kind: self.bindings[i].spec.trigger.kind,
                    source: Some(sensor.to_string()),
                    fire_time: m.timestamp,
                };
                self.dispatch(i, event)
            })
            .collect()
    }

    /// Fires every onFrequency binding that is due, catching up one dispatch
    /// per missed period.
    pub fn tick(&mut self, now: Timestamp) -> Vec<Execution> {
        let mut due = Vec::new();
        for (i, b) in self.bindings.iter_mut().enumerate() {
            let (Some(period), Some(next)) = (b.period, b.next_fire.as_mut()) else {
                continue;
            };
            if b.spec.trigger.kind != TriggerKind::OnFrequency {
                continue;
            }
            while *next <= now {
                due.push((i, *next));
                *next = *next + period;
            }
        }
        due.into_iter()
            .map(|(i, fire_time)| {
                let event = TriggerEvent {
                    kind: TriggerKind::OnFrequency,
                    source: None,
                    fire_time,
                };
                self.dispatch(i, event)
            })
            .collect()
    }

    /// Earliest pending onFrequency fire time.
    pub fn next_fire(&self) -> Option<Timestamp> {
        self.bindings
            .iter()
            .filter(|b| b.spec.trigger.kind == TriggerKind::OnFrequency)
            .filter_map(|b| b.next_fire)
            .min()
    }

    fn dispatch(&mut self, i: usize, event: TriggerEvent) -> Execution {
        let b = &mut self.bindings[i];
        b.dispatches += 1;
        let func = b.spec.label.clone();
        let report = |services: &dyn NodeServices, func: &str, err: &str| {
            log::warn!("function {func} failed: {err}");
            services.alarm(Severity::Warning, None, &format!("function {func} failed: {err}"));
        };
        let outcome = match b.spec.exec_type {
            ExecType::Synchronous => match run_guarded(&b.callable, &b.sensors, &b.actuators, &b.params) {
                Ok(v) => Outcome::Completed(v),
                Err(e) => {
                    report(&*self.services, &func, &e);
                    Outcome::Failed(e)
                }
            },
            ExecType::Asynchronous => {
                let (callable, sensors, actuators, params) =
                    (b.callable.clone(), b.sensors.clone(), b.actuators.clone(), b.params.clone());
                let services = self.services.clone();
                let in_flight = self.in_flight.clone();
                let name = func.clone();
                in_flight.fetch_add(1, Ordering::SeqCst);
                self.spawner.spawn(Box::new(move || {
                    if let Err(e) = run_guarded(&callable, &sensors, &actuators, &params) {
                        report(&*services, &name, &e);
                    }
                    in_flight.fetch_sub(1, Ordering::SeqCst);
                }));
                Outcome::Submitted
            }
        };
        Execution { func, event, outcome }
    }

    /// Asynchronous executions still running.
    pub fn in_flight(&self) -> usize {
        self.in_flight.load(Ordering::SeqCst)
    }

    /// Waits for asynchronous work to drain. Returns false on timeout.
    pub fn wait_idle(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        while self.in_flight() > 0 {
            if Instant::now() >= deadline {
                return false;
            }
            std::thread::sleep(Duration::from_millis(1));
        }
        true
    }
}
