use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use edgetwin_core::config::{parse_config, FuncConfig};
use edgetwin_core::{Measurement, MeasurementWindow, Severity, Timestamp};
use edgetwin_messaging::{command_verb, AppliedAck, Command};
use edgetwin_runtime::functions::{
    volt_limitation, Actuators, FunctionEngine, FunctionError, FunctionRegistry, NodeServices, Outcome, Params,
    RegistrationError, SensorView, Sensors, ThreadSpawner,
};
use parking_lot::{Mutex, RwLock};
use proptest::prelude::*;
use serde_json::{json, Value};

#[derive(Default)]
struct Recorder {
    commands: Mutex<Vec<(String, Command)>>,
    alarms: Mutex<Vec<(Severity, String)>>,
}

impl NodeServices for Recorder {
    fn actuate(&self, actuator: &str, command: Command) -> Result<AppliedAck, String> {
        self.commands.lock().push((actuator.to_string(), command.clone()));
        Ok(AppliedAck {
            actuator: actuator.to_string(),
            command,
            ok: true,
            state: None,
            error: None,
        })
    }

    fn alarm(&self, severity: Severity, _device: Option<&str>, message: &str) {
        self.alarms.lock().push((severity, message.to_string()));
    }

    fn now(&self) -> Timestamp {
        Timestamp::ZERO
    }
}

const VOLTMETER: &str = "Voltmeter Gen1";
const SWITCH: &str = "Three-Phase Switch Gen1";

struct Rig {
    engine: FunctionEngine,
    window: Arc<RwLock<MeasurementWindow>>,
    services: Arc<Recorder>,
    t: i64,
}

impl Rig {
    fn new() -> Self {
        let window = Arc::new(RwLock::new(MeasurementWindow::new(VOLTMETER, 8, 1).unwrap()));
        let mut sensors = Sensors::new();
        sensors.insert(VOLTMETER.into(), SensorView::new(VOLTMETER, window.clone()));
        let services = Arc::new(Recorder::default());
        let engine = FunctionEngine::new(sensors, [SWITCH.to_string()], services.clone(), Arc::new(ThreadSpawner));
        Self {
            engine,
            window,
            services,
            t: 0,
        }
    }

    fn read(&mut self, v: f64) -> Vec<edgetwin_runtime::functions::Execution> {
        self.t += 1;
        let m = Measurement::new(Timestamp(self.t), vec![v], VOLTMETER);
        self.window.write().push(&m).unwrap();
        self.engine.on_measurement(VOLTMETER, &m)
    }
}

fn func(json: Value) -> FuncConfig {
    serde_json::from_value(json).unwrap()
}

fn volt_limit_func() -> FuncConfig {
    let text = r#"{
      "global-properties": {"type": "edge", "label": "edge1"},
      "devices": [
        {"label": "Voltmeter Gen1", "driver": "synthetic.voltmeter"},
        {"label": "Three-Phase Switch Gen1", "driver": "synthetic.switch"}
      ],
      "funcs": [{
        "label": "VoltLimitation",
        "lang": "Java",
        "type": "synchronous",
        "method-name": "org.example.twin.edge.funcs.VoltLimitation",
        "parameters": {
          "sensors": ["Voltmeter Gen1"],
          "actuators": ["Three-Phase Switch Gen1"],
          "other": {"threshold": 400}
        },
        "trigger": {"type": "onRead", "parameters": {"trigger-sensor": ["Voltmeter Gen1"], "interval": 5}}
      }]
    }"#;
    parse_config(text).unwrap().funcs.remove(0)
}

fn counter_fn(counter: Arc<AtomicUsize>) -> edgetwin_runtime::functions::Callable {
    Arc::new(move |_: &Sensors, _: &Actuators, _: &Params| {
        counter.fetch_add(1, Ordering::SeqCst);
        Ok(None)
    })
}

#[test]
fn volt_limit_every_fifth_reading() {
    let mut rig = Rig::new();
    let registry = FunctionRegistry::with_builtins();
    let (id, started) = rig.engine.register(volt_limit_func(), &registry, Timestamp::ZERO).unwrap();
    assert!(started.is_empty());

    for _ in 0..4 {
        assert!(rig.read(401.0).is_empty());
    }
    let ex = rig.read(401.0);
    assert_eq!(ex.len(), 1);
    assert_eq!(ex[0].outcome, Outcome::Completed(Some(json!({"action": "open"}))));
    let cmds = rig.services.commands.lock().clone();
    assert_eq!(cmds.len(), 1);
    assert_eq!(cmds[0].0, SWITCH);
    assert_eq!(command_verb(&cmds[0].1), Some("open"));
    assert_eq!(rig.services.alarms.lock()[0].0, Severity::Critical);
    assert_eq!(rig.engine.binding(id).read_count(VOLTMETER), 5);
}

#[test]
fn volt_limitation_is_strict() {
    for (reading, fires) in [(401.0, true), (399.9, false), (400.0, false)] {
        let rig = Rig::new();
        rig.window.write().push_values(Timestamp(1), &[reading]).unwrap();
        let mut sensors = Sensors::new();
        sensors.insert(VOLTMETER.into(), SensorView::new(VOLTMETER, rig.window.clone()));
        let acts = Actuators::new(vec![SWITCH.into()], rig.services.clone());
        let params = Params::from([("threshold".to_string(), json!(400))]);
        let out = volt_limitation(&sensors, &acts, &params).unwrap();
        assert_eq!(out.is_some(), fires, "reading {reading}");
        assert_eq!(rig.services.commands.lock().len(), fires as usize);
    }
    let rig = Rig::new();
    let acts = Actuators::new(vec![SWITCH.into()], rig.services.clone());
    assert_eq!(
        volt_limitation(&Sensors::new(), &acts, &Params::new()),
        Err(FunctionError::MissingParameter("threshold".into()))
    );
}

#[test]
fn registration_errors() {
    let mut rig = Rig::new();
    let registry = FunctionRegistry::with_builtins();
    rig.engine.register(volt_limit_func(), &registry, Timestamp::ZERO).unwrap();
    assert!(matches!(
        rig.engine.register(volt_limit_func(), &registry, Timestamp::ZERO),
        Err(RegistrationError::DuplicateLabel(_))
    ));

    let mut unknown = volt_limit_func();
    unknown.label = "Other".into();
    unknown.method_name = "org.example.Nope".into();
    assert!(matches!(
        rig.engine.register(unknown, &registry, Timestamp::ZERO),
        Err(RegistrationError::UnknownMethod(_))
    ));

    let mut dangling = volt_limit_func();
    dangling.label = "Dangling".into();
    dangling.parameters.actuators = vec!["Ghost".into()];
    assert!(matches!(
        rig.engine.register(dangling, &registry, Timestamp::ZERO),
        Err(RegistrationError::DanglingReference { .. })
    ));

    let mut lang = volt_limit_func();
    lang.label = "Py".into();
    lang.lang = "python".into();
    assert!(matches!(
        rig.engine.register(lang, &registry, Timestamp::ZERO),
        Err(RegistrationError::UnsupportedLanguage(_))
    ));
}

#[test]
fn on_start_fires_once() {
    let mut rig = Rig::new();
    let count = Arc::new(AtomicUsize::new(0));
    let mut registry = FunctionRegistry::new();
    registry.register("Listener", counter_fn(count.clone()));
    let spec = func(json!({
        "label": "Listener", "type": "synchronous", "method-name": "Listener",
        "trigger": {"type": "onStart"}
    }));
    let (_, ex) = rig.engine.register(spec, &registry, Timestamp::ZERO).unwrap();
    assert_eq!(ex.len(), 1);
    for _ in 0..10 {
        rig.read(1.0);
    }
    rig.engine.tick(Timestamp::from_secs_f64(100.0));
    assert_eq!(count.load(Ordering::SeqCst), 1);
}

#[test]
fn on_change_with_epsilon() {
    let mut rig = Rig::new();
    let count = Arc::new(AtomicUsize::new(0));
    let mut registry = FunctionRegistry::new();
    registry.register("Watch", counter_fn(count.clone()));
    let spec = func(json!({
        "label": "Watch", "type": "synchronous", "method-name": "Watch",
        "trigger": {"type": "onChange", "parameters": {"trigger-sensor": [VOLTMETER], "epsilon": 1e-3}}
    }));
    rig.engine.register(spec, &registry, Timestamp::ZERO).unwrap();
    assert!(rig.read(1.0).is_empty());
    assert!(rig.read(1.0).is_empty());
    assert!(rig.read(1.0000001).is_empty());
    assert_eq!(rig.read(1.01).len(), 1);
    assert!(rig.read(1.01).is_empty());
    assert_eq!(count.load(Ordering::SeqCst), 1);
}

fn frequency_rig(interval_ms: f64) -> (Rig, Arc<AtomicUsize>) {
    let mut rig = Rig::new();
    let count = Arc::new(AtomicUsize::new(0));
    let mut registry = FunctionRegistry::new();
    registry.register("Tick", counter_fn(count.clone()));
    let spec = func(json!({
        "label": "Tick", "type": "synchronous", "method-name": "Tick",
        "trigger": {"type": "onFrequency", "parameters": {"interval": interval_ms}}
    }));
    rig.engine.register(spec, &registry, Timestamp::ZERO).unwrap();
    (rig, count)
}

#[test]
fn on_frequency_fixed_rate() {
    let (mut rig, count) = frequency_rig(100.0);
    let mut t = 0;
    while t <= 1000 {
        rig.engine.tick(Timestamp::from_millis(t));
        t += 10;
    }
    assert_eq!(count.load(Ordering::SeqCst), 10);

    // late tick catches up, then the schedule continues on the original grid
    let (mut rig, count) = frequency_rig(100.0);
    assert_eq!(rig.engine.tick(Timestamp::from_millis(250)).len(), 2);
    assert_eq!(rig.engine.next_fire(), Some(Timestamp::from_millis(300)));
    assert_eq!(rig.engine.tick(Timestamp::from_millis(300)).len(), 1);
    assert_eq!(count.load(Ordering::SeqCst), 3);

    let mut empty = Rig::new();
    assert!(empty.engine.tick(Timestamp::from_millis(1000)).is_empty());
}

#[test]
fn failures_become_alarms() {
    let mut rig = Rig::new();
    let mut registry = FunctionRegistry::new();
    registry.register("Boom", Arc::new(|_: &Sensors, _: &Actuators, _: &Params| -> Result<Option<Value>, FunctionError> {
        panic!("kaboom")
    }));
    registry.register("Err", Arc::new(|_: &Sensors, _: &Actuators, _: &Params| Err(FunctionError::Failed("bad".into()))));
    for (label, method) in [("B", "Boom"), ("E", "Err")] {
        let spec = func(json!({
            "label": label, "type": "synchronous", "method-name": method,
            "trigger": {"type": "onRead", "parameters": {"trigger-sensor": [VOLTMETER]}}
        }));
        rig.engine.register(spec, &registry, Timestamp::ZERO).unwrap();
    }
    let ex = rig.read(1.0);
    assert!(ex.iter().all(|e| matches!(e.outcome, Outcome::Failed(_))));
    let alarms = rig.services.alarms.lock();
    assert_eq!(alarms.len(), 2);
    assert!(alarms[0].1.contains("kaboom"));
}

#[test]
fn asynchronous_dispatch_does_not_block_ingestion() {
    let mut rig = Rig::new();
    let count = Arc::new(AtomicUsize::new(0));
    let c = count.clone();
    let mut registry = FunctionRegistry::new();
    registry.register("Slow", Arc::new(move |_: &Sensors, _: &Actuators, _: &Params| {
        std::thread::sleep(Duration::from_millis(300));
        c.fetch_add(1, Ordering::SeqCst);
        Ok(None)
    }));
    let spec = func(json!({
        "label": "Slow", "type": "asynchronous", "method-name": "Slow",
        "trigger": {"type": "onRead", "parameters": {"trigger-sensor": [VOLTMETER]}}
    }));
    rig.engine.register(spec, &registry, Timestamp::ZERO).unwrap();
    let start = Instant::now();
    for _ in 0..5 {
        assert_eq!(rig.read(1.0)[0].outcome, Outcome::Submitted);
    }
    assert!(start.elapsed() < Duration::from_millis(100));
    assert!(rig.engine.wait_idle(Duration::from_secs(10)));
    assert_eq!(count.load(Ordering::SeqCst), 5);
}

proptest! {
    #[test]
    fn on_read_dispatch_law(n in 0usize..300, k in 1u64..20) {
        let mut rig = Rig::new();
        let count = Arc::new(AtomicUsize::new(0));
        let mut registry = FunctionRegistry::new();
        registry.register("F", counter_fn(count.clone()));
        let spec = func(json!({
            "label": "F", "type": "synchronous", "method-name": "F",
            "trigger": {"type": "onRead", "parameters": {"trigger-sensor": [VOLTMETER], "interval": k}}
        }));
        rig.engine.register(spec, &registry, Timestamp::ZERO).unwrap();
        for i in 0..n {
            rig.read(i as f64);
        }
        prop_assert_eq!(count.load(Ordering::SeqCst), n / k as usize);
    }
}
