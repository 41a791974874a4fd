use std::f64::consts::PI;
use std::sync::Arc;
use std::time::{Duration, Instant};

use edgetwin_core::config::parse_config;
use edgetwin_core::{AggregatePayload, Clock, Severity, Timestamp, VirtualClock, WallClock};
use edgetwin_messaging::{
    command, AlarmEvent, AppliedAck, Broker, Bus, BusError, Frame, FrameType, HeartbeatPayload, KeyPattern,
    MeasurementPayload, RoutingKey,
};
use edgetwin_runtime::edge::{Connector, EdgeError, EdgeNode, EdgeOptions, MsgAlertDriver};
use serde_json::{json, Value};

fn config(devices: Value, funcs: Value) -> edgetwin_core::config::NodeConfig {
    let text = json!({
        "global-properties": {"type": "edge", "label": "edge1", "heartbeat-interval": 1000},
        "devices": devices,
        "funcs": funcs,
    });
    parse_config(&text.to_string()).unwrap()
}

fn voltmeter(ts: f64, ta: f64, aggregate: &str, signal: Value) -> Value {
    json!({
        "label": "V1",
        "driver": "synthetic.Voltmeter",
        "properties": {
            "sampling-interval": ts,
            "aggregation-interval": ta,
            "aggregate": aggregate,
            "signal": signal,
        }
    })
}

fn switch() -> Value {
    json!({"label": "SW1", "driver": "synthetic.Switch"})
}

fn virtual_node(devices: Value, funcs: Value, broker: &Broker) -> (EdgeNode, VirtualClock) {
    let clock = VirtualClock::new(Timestamp::from_secs_f64(100.0));
    let bus: Arc<dyn Bus> = Arc::new(broker.clone());
    let node = EdgeNode::new(config(devices, funcs), Some(bus), Arc::new(clock.clone()), EdgeOptions::default()).unwrap();
    (node, clock)
}

fn measurements(frames: Vec<Frame>) -> Vec<MeasurementPayload> {
    frames
        .into_iter()
        .filter(|f| f.frame_type == FrameType::Measurement)
        .map(|f| f.payload_as().unwrap())
        .collect()
}

#[test]
fn publish_cadence() {
    let broker = Broker::new();
    let sub = broker.subscribe("edge.edge1.sensors.*".parse().unwrap()).unwrap();
    let (mut node, _) = virtual_node(json!([voltmeter(100.0, 1000.0, "average", json!({"amplitude": 10.0}))]), json!([]), &broker);
    let report = node.run(Some(Duration::from_secs(10))).unwrap();
    assert!(report.samples.abs_diff(100) <= 1, "{report:?}");
    assert!(report.publishes.abs_diff(10) <= 1, "{report:?}");
    assert_eq!(report.sensors["V1"].publishes, report.publishes);
    assert_eq!(measurements(sub.drain()).len() as u64, report.publishes);
    // one heartbeat per second including t = 0 and t = 10 s
    assert_eq!(report.heartbeats, 11);
}

#[test]
fn each_sample_is_published_once() {
    let broker = Broker::new();
    let sub = broker.subscribe("edge.edge1.sensors.V1".parse().unwrap()).unwrap();
    let (mut node, _) = virtual_node(json!([voltmeter(10.0, 50.0, "all", json!({"amplitude": 1.0}))]), json!([]), &broker);
    node.run(Some(Duration::from_secs(1))).unwrap();
    let published = measurements(sub.drain());
    assert_eq!(published.len(), 20);
    let mut stamps = Vec::new();
    for p in &published {
        assert_eq!(p.samples, 5);
        match &p.aggregate {
            AggregatePayload::Series { points } => stamps.extend(points.iter().map(|pt| pt.ts.as_nanos())),
            other => panic!("{other:?}"),
        }
    }
    let start = Timestamp::from_secs_f64(100.0).as_nanos();
    let expected: Vec<i64> = (0..100).map(|k| start + k * 10_000_000).collect();
    assert_eq!(stamps, expected);
}

/// Least-squares fit of `a cos(wt) + b sin(wt)` at a known frequency.
fn lsq_phasor(x: &[f64], ts: f64, f: f64) -> (f64, f64) {
    let (mut cc, mut cs, mut ss, mut xc, mut xs) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (i, &v) in x.iter().enumerate() {
        let w = 2.0 * PI * f * i as f64 * ts;
        let (c, s) = (w.cos(), w.sin());
        cc += c * c;
        cs += c * s;
        ss += s * s;
        xc += v * c;
        xs += v * s;
    }
    let det = cc * ss - cs * cs;
    let a = (xc * ss - xs * cs) / det;
    let b = (xs * cc - xc * cs) / det;
    (a.hypot(b), (-b).atan2(a))
}

fn phase_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0 * PI);
    d.min(2.0 * PI - d)
}

#[test]
fn phasor_payload_matches_source() {
    let broker = Broker::new();
    let series = broker.subscribe("edge.edge1.sensors.V1".parse().unwrap()).unwrap();
    let signal = json!({"amplitude": 325.0, "frequency": 50.0, "phase": 0.3});
    let (mut node, _) = virtual_node(json!([voltmeter(1.0, 100.0, "phasor", signal.clone())]), json!([]), &broker);
    node.run(Some(Duration::from_secs(1))).unwrap();
    let published = measurements(series.drain());
    assert_eq!(published.len(), 10);

    // independent fit over the ideal samples of one window
    let x: Vec<f64> = (0..100)
        .map(|i| 325.0 * (2.0 * PI * 50.0 * i as f64 * 1e-3 + 0.3).cos())
        .collect();
    let (fit_a, fit_phi) = lsq_phasor(&x, 1e-3, 50.0);
    assert!((fit_a - 325.0).abs() < 1e-9 && (fit_phi - 0.3).abs() < 1e-9);

    for p in &published {
        let AggregatePayload::Phasor { channels } = &p.aggregate else {
            panic!("expected phasor");
        };
        assert_eq!(channels.len(), 1);
        let ph = channels[0];
        assert!((ph.amplitude - fit_a).abs() < 1e-6 * 325.0, "{ph:?}");
        assert!(phase_diff(ph.phase, fit_phi) < 1e-6, "{ph:?}");
        assert!((ph.frequency - 50.0).abs() < 1e-9);
    }
}

#[test]
fn noisy_phasor_within_tolerance() {
    let broker = Broker::new();
    let series = broker.subscribe("edge.edge1.sensors.V1".parse().unwrap()).unwrap();
    let signal = json!({"amplitude": 325.0, "frequency": 50.0, "phase": -1.0, "noise-std": 2.0, "seed": 11});
    let (mut node, _) = virtual_node(json!([voltmeter(1.0, 100.0, "phasor", signal)]), json!([]), &broker);
    node.run(Some(Duration::from_millis(500))).unwrap();
    for p in measurements(series.drain()) {
        let AggregatePayload::Phasor { channels } = &p.aggregate else {
            panic!("expected phasor");
        };
        // noise std of each quadrature estimate is sigma * sqrt(2 / n)
        assert!((channels[0].amplitude - 325.0).abs() < 5.0 * 2.0 * (2.0f64 / 100.0).sqrt());
        assert!(phase_diff(channels[0].phase, -1.0) < 0.01);
    }
}

#[test]
fn channel_selection_picks_phase() {
    let broker = Broker::new();
    let series = broker.subscribe("edge.edge1.sensors.V1".parse().unwrap()).unwrap();
    let mut dev = voltmeter(1.0, 20.0, "phasor", json!({"amplitude": 100.0, "frequency": 50.0}));
    dev["properties"]["indexes"] = json!([1, 2]);
    let (mut node, _) = virtual_node(json!([dev]), json!([]), &broker);
    node.run(Some(Duration::from_millis(20))).unwrap();
    let p = &measurements(series.drain())[0];
    let AggregatePayload::Phasor { channels } = &p.aggregate else {
        panic!()
    };
    assert!(phase_diff(channels[0].phase, -2.0 * PI / 3.0) < 1e-9);
    assert!(phase_diff(channels[1].phase, -4.0 * PI / 3.0) < 1e-9);
}

#[test]
fn switch_actuation_and_acks() {
    let broker = Broker::new();
    let acks = broker.subscribe("edge.edge1.sensors.SW1".parse().unwrap()).unwrap();
    let (mut node, clock) = virtual_node(json!([switch()]), json!([]), &broker);
    let shared = node.shared();
    node.run(Some(Duration::ZERO)).unwrap();
    assert!(broker.has_consumer("edge1"));

    for verb in ["open", "open", "frobnicate"] {
        let ack = broker.send_actuation("edge1", "SW1", command(verb), clock.now()).unwrap();
        assert!(ack.delivered);
    }
    let report = node.run(Some(Duration::from_secs(1))).unwrap();
    assert_eq!(report.actuations, 2);
    assert_eq!(report.failed_actuations, 1);
    assert_eq!(shared.device_state("SW1"), Some(json!({"closed": false})));

    let applied: Vec<AppliedAck> = acks
        .drain()
        .into_iter()
        .filter(|f| f.frame_type == FrameType::Ack)
        .map(|f| f.payload_as().unwrap())
        .collect();
    assert_eq!(applied.iter().map(|a| a.ok).collect::<Vec<_>>(), vec![true, true, false]);
    assert!(applied[2].error.as_deref().unwrap().contains("frobnicate"));
}

#[test]
fn heartbeat_lists_devices() {
    let broker = Broker::new();
    let hb = broker.subscribe(KeyPattern::exact(&RoutingKey::heartbeat("edge1").unwrap())).unwrap();
    let (mut node, _) = virtual_node(json!([voltmeter(100.0, 1000.0, "last", json!({})), switch()]), json!([]), &broker);
    node.run(Some(Duration::from_millis(2500))).unwrap();
    let beats: Vec<HeartbeatPayload> = hb.drain().iter().map(|f| f.payload_as().unwrap()).collect();
    assert_eq!(beats.iter().map(|b| b.seq).collect::<Vec<_>>(), vec![0, 1, 2]);
    let labels: Vec<&str> = beats[0].devices.iter().map(|d| d.label.as_str()).collect();
    assert_eq!(labels, vec!["SW1", "V1"]);
    assert!(beats[0].devices[0].is_actuator() && beats[0].devices[0].is_sensor());
}

#[test]
fn overvoltage_opens_switch() {
    let broker = Broker::new();
    let alarms = broker.subscribe("edge.edge1.alarms".parse().unwrap()).unwrap();
    let funcs = json!([{
        "label": "VoltLimitation",
        "lang": "Java",
        "type": "synchronous",
        "method-name": "org.example.twin.edge.funcs.VoltLimitation",
        "parameters": {"sensors": ["V1"], "actuators": ["SW1"], "other": {"threshold": 400}},
        "trigger": {"type": "onRead", "parameters": {"trigger-sensor": ["V1"], "interval": 5}}
    }]);
    let (mut node, clock) = virtual_node(json!([voltmeter(100.0, 1000.0, "average", json!({"amplitude": 325.0})), switch()]), funcs, &broker);
    let shared = node.shared();
    node.run(Some(Duration::from_secs(2))).unwrap();
    assert_eq!(shared.device_state("SW1"), Some(json!({"closed": true})));
    assert!(alarms.drain().is_empty());

    let injected = clock.now();
    shared.set_override("V1", vec![401.0]);
    node.run(Some(Duration::from_secs(1))).unwrap();
    assert_eq!(shared.device_state("SW1"), Some(json!({"closed": false})));
    let raised: Vec<(Frame, AlarmEvent)> = alarms
        .drain()
        .into_iter()
        .map(|f| {
            let a = f.payload_as().unwrap();
            (f, a)
        })
        .collect();
    let (frame, first) = &raised[0];
    assert_eq!(first.severity, Severity::Critical);
    assert!(frame.ts.duration_since(injected) <= Duration::from_secs(1));
}

#[test]
fn degraded_mode_keeps_sensing_and_reconnects() {
    let broker = Broker::new();
    let allow = Arc::new(std::sync::atomic::AtomicBool::new(false));
    let connector: Connector = {
        let broker = broker.clone();
        let allow = allow.clone();
        Arc::new(move || {
            if allow.load(std::sync::atomic::Ordering::SeqCst) {
                Ok(Arc::new(broker.clone()) as Arc<dyn Bus>)
            } else {
                Err(BusError::Unreachable("refused".into()))
            }
        })
    };
    let clock = VirtualClock::new(Timestamp::ZERO);
    let options = EdgeOptions {
        connector: Some(connector),
        ..EdgeOptions::default()
    };
    let mut node = EdgeNode::new(
        config(json!([voltmeter(100.0, 1000.0, "average", json!({}))]), json!([])),
        None,
        Arc::new(clock.clone()),
        options,
    )
    .unwrap();
    let r = node.run(Some(Duration::from_secs(3))).unwrap();
    assert!(r.samples >= 30);
    assert!(r.publish_errors > 0);
    assert!(!node.shared().is_connected());

    allow.store(true, std::sync::atomic::Ordering::SeqCst);
    let sub = broker.subscribe("edge.edge1.sensors.V1".parse().unwrap()).unwrap();
    // backoff has grown to at most a few seconds by now
    let r = node.run(Some(Duration::from_secs(10))).unwrap();
    assert_eq!(r.reconnects, 1);
    assert!(node.shared().is_connected());
    assert!(broker.has_consumer("edge1"));
    assert!(!measurements(sub.drain()).is_empty());
}

#[test]
fn rejects_bad_configs() {
    let clock: Arc<dyn Clock> = Arc::new(WallClock);
    let dup = config(json!([switch(), switch()]), json!([]));
    assert!(matches!(EdgeNode::new(dup, None, clock.clone(), EdgeOptions::default()), Err(EdgeError::Config(_))));

    let mut dev = voltmeter(100.0, 1000.0, "average", json!({}));
    dev["properties"]["indexes"] = json!([3]);
    assert!(matches!(
        EdgeNode::new(config(json!([dev]), json!([])), None, clock.clone(), EdgeOptions::default()),
        Err(EdgeError::Device { .. })
    ));

    let short = voltmeter(100.0, 50.0, "average", json!({}));
    assert!(EdgeNode::new(config(json!([short]), json!([])), None, clock.clone(), EdgeOptions::default()).is_err());

    let toaster = json!([{"label": "T", "driver": "acme.Toaster"}]);
    assert!(EdgeNode::new(config(toaster, json!([])), None, clock, EdgeOptions::default()).is_err());
}

#[test]
fn wall_clock_run_and_stop() {
    let broker = Broker::new();
    let sub = broker.subscribe("edge.edge1.sensors.*".parse().unwrap()).unwrap();
    let bus: Arc<dyn Bus> = Arc::new(broker.clone());
    let devices = json!([voltmeter(10.0, 100.0, "average", json!({})), switch(), {"label": "ALERT", "driver": "MsgAlert"}]);
    let mut node = EdgeNode::new(config(devices, json!([])), Some(bus), Arc::new(WallClock), EdgeOptions::default()).unwrap();
    let shared = node.shared();
    let runner = std::thread::spawn(move || node.run(None).unwrap());

    let deadline = Instant::now() + Duration::from_secs(5);
    while !broker.has_consumer("edge1") {
        assert!(Instant::now() < deadline);
        std::thread::sleep(Duration::from_millis(5));
    }
    let sent = Instant::now();
    broker.send_actuation("edge1", "ALERT", command("alert"), WallClock.now()).unwrap();
    loop {
        let n = shared
            .with_driver("ALERT", |d| d.as_any().downcast_ref::<MsgAlertDriver>().unwrap().records().len())
            .unwrap();
        if n == 1 {
            break;
        }
        assert!(sent.elapsed() < Duration::from_millis(100));
        std::thread::sleep(Duration::from_millis(1));
    }
    std::thread::sleep(Duration::from_millis(350));
    shared.stop();
    let report = runner.join().unwrap();
    assert!(report.publishes >= 2, "{report:?}");
    assert_eq!(report.dropped_publishes, 0);
    assert_eq!(report.actuations, 1);
    assert!(!measurements(sub.drain()).is_empty());
}
