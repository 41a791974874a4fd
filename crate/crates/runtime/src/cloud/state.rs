use std::collections::BTreeMap;
use std::time::Duration;

use edgetwin_core::config::AlarmRule;
use edgetwin_core::model::availability_at;
use edgetwin_core::{AggregatePayload, Availability, Severity, Timestamp, VirtualDeviceState};
use edgetwin_messaging::{AlarmEvent, AppliedAck, Frame, FrameType, HeartbeatPayload, MeasurementPayload};
use serde::Serialize;
use thiserror::Error;
use tokio::sync::broadcast;

use super::store::{Point, TimeSeriesStore};

#[derive(Debug, Error, PartialEq)]
pub enum CloudError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("cannot ingest frame: {0}")]
    Ingest(String),
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("storage: {0}")]
    Io(String),
    #[error(transparent)]
    Bus(#[from] edgetwin_messaging::BusError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlarmRecord {
    pub id: u64,
    pub severity: Severity,
    pub node: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub device: Option<String>,
    pub message: String,
    pub ts: Timestamp,
    pub acknowledged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeRecord {
    pub label: String,
    pub availability: Availability,
    pub last_heartbeat: Timestamp,
    pub seq: u64,
    pub interval_ms: u64,
    pub total_slots: usize,
    pub free_slots: usize,
    pub devices: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeviceView {
    #[serde(flatten)]
    pub state: VirtualDeviceState,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub last_ack: Option<AppliedAck>,
}

/// A measurement the registry could not place.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Quarantined {
    pub ts: Timestamp,
    pub edge: String,
    pub sensor: String,
    pub reason: String,
}

/// Pushed to event-stream subscribers.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum CloudEvent {
    DeviceUpdate(Box<DeviceView>),
    Alarm(AlarmRecord),
    NodeStatus { node: String, availability: Availability },
}

impl CloudEvent {
    pub fn name(&self) -> &'static str {
        match self {
            CloudEvent::DeviceUpdate(_) => "device-update",
            CloudEvent::Alarm(_) => "alarm",
            CloudEvent::NodeStatus { .. } => "node-status",
        }
    }
}

/// What one ingested frame changed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Delta {
    pub devices_upserted: usize,
    pub points_appended: usize,
    pub alarms: Vec<u64>,
    pub quarantined: bool,
}

/// `edge.sensor.c`, plus `.amplitude` / `.phase` for phasors.
pub fn series_key(edge: &str, sensor: &str, channel: usize) -> String {
    format!("{edge}.{sensor}.{channel}")
}

fn rule_matches(rule: &AlarmRule, edge: &str, device: &str, value: f64) -> bool {
    rule.edge.as_deref().is_none_or(|e| e == edge)
        && rule.device.as_deref().is_none_or(|d| d == device)
        && (rule.above.is_some_and(|a| value > a) || rule.below.is_some_and(|b| value < b))
}

/// Registry, store and alarm log of the cloud node. Not synchronized; the
/// node wraps it in a lock.
pub struct CloudState {
    nodes: BTreeMap<String, NodeRecord>,
    devices: BTreeMap<(String, String), DeviceView>,
    store: TimeSeriesStore,
    alarms: Vec<AlarmRecord>,
    quarantine: Vec<Quarantined>,
    rules: Vec<AlarmRule>,
    miss_threshold: Duration,
    events: broadcast::Sender<CloudEvent>,
}

impl CloudState {
    pub fn new(store: TimeSeriesStore, rules: Vec<AlarmRule>, miss_threshold: Duration) -> Self {
        Self {
            nodes: BTreeMap::new(),
            devices: BTreeMap::new(),
            store,
            alarms: Vec::new(),
            quarantine: Vec::new(),
            rules,
            miss_threshold,
            events: broadcast::channel(1024).0,
        }
    }

    pub fn subscribe(&self) -> broadcast::Receiver<CloudEvent> {
        self.events.subscribe()
    }

    fn emit(&self, event: CloudEvent) {
        // no subscribers is fine
        let _ = self.events.send(event);
    }

    pub fn miss_threshold(&self) -> Duration {
        self.miss_threshold
    }

    pub fn ingest(&mut self, frame: &Frame, now: Timestamp) -> Result<Delta, CloudError> {
        let bad = |e: edgetwin_messaging::BusError| CloudError::Ingest(e.to_string());
        match frame.frame_type {
            FrameType::Heartbeat => Ok(self.ingest_heartbeat(frame.payload_as().map_err(bad)?, now)),
            FrameType::Measurement => {
                let (edge, _) = frame
                    .key
                    .as_sensor()
                    .ok_or_else(|| CloudError::Ingest(format!("measurement on {}", frame.key)))?;
                let edge = edge.to_string();
                self.ingest_measurement(&edge, frame.ts, frame.payload_as().map_err(bad)?, now)
            }
            FrameType::Alarm => {
                let ev: AlarmEvent = frame.payload_as().map_err(bad)?;
                let id = self.raise_alarm(ev.severity, &ev.node, ev.device.as_deref(), &ev.message, frame.ts);
                Ok(Delta {
                    alarms: vec![id],
                    ..Delta::default()
                })
            }
            FrameType::Ack => {
                let (edge, device) = frame
                    .key
                    .as_sensor()
                    .ok_or_else(|| CloudError::Ingest(format!("ack on {}", frame.key)))?;
                let ack: AppliedAck = frame.payload_as().map_err(bad)?;
                let key = (edge.to_string(), device.to_string());
                let Some(view) = self.devices.get_mut(&key) else {
                    return Ok(Delta::default());
                };
                view.last_ack = Some(ack);
                view.state.last_update = now;
                let view = view.clone();
                self.emit(CloudEvent::DeviceUpdate(Box::new(view)));
                Ok(Delta {
                    devices_upserted: 1,
                    ..Delta::default()
                })
            }
            other => Err(CloudError::Ingest(format!("unexpected frame type {other:?}"))),
        }
    }

    fn ingest_heartbeat(&mut self, hb: HeartbeatPayload, now: Timestamp) -> Delta {
        let came_back = self
            .nodes
            .get(&hb.node)
            .is_some_and(|n| n.availability == Availability::Offline);
        let labels = hb.devices.iter().map(|d| d.label.clone()).collect();
        self.nodes.insert(
            hb.node.clone(),
            NodeRecord {
                label: hb.node.clone(),
                availability: Availability::Online,
                last_heartbeat: now,
                seq: hb.seq,
                interval_ms: hb.interval_ms,
                total_slots: hb.total_slots,
                free_slots: hb.free_slots,
                devices: labels,
            },
        );
        let mut delta = Delta::default();
        for d in hb.devices {
            let key = (hb.node.clone(), d.label.clone());
            let view = self.devices.entry(key).or_insert_with(|| DeviceView {
                state: VirtualDeviceState::new(d.clone(), &hb.node, now),
                last_ack: None,
            });
            let changed = view.state.descriptor != d || view.state.availability != Availability::Online;
            view.state.descriptor = d;
            view.state.last_heartbeat = now;
            view.state.availability = Availability::Online;
            delta.devices_upserted += 1;
            if changed {
                let view = view.clone();
                self.emit(CloudEvent::DeviceUpdate(Box::new(view)));
            }
        }
        if came_back {
            self.emit(CloudEvent::NodeStatus {
                node: hb.node,
                availability: Availability::Online,
            });
        }
        delta
    }

    fn ingest_measurement(
        &mut self,
        edge: &str,
        ts: Timestamp,
        m: MeasurementPayload,
        now: Timestamp,
    ) -> Result<Delta, CloudError> {
        let key = (edge.to_string(), m.sensor.clone());
        if !self.devices.contains_key(&key) {
            let reason = if self.nodes.contains_key(edge) {
                "unknown device"
            } else {
                "unknown edge"
            };
            self.quarantine.push(Quarantined {
                ts,
                edge: edge.to_string(),
                sensor: m.sensor.clone(),
                reason: reason.into(),
            });
            let msg = format!("quarantined measurement from {edge}/{}: {reason}", m.sensor);
            let id = self.raise_alarm(Severity::Warning, edge, Some(&m.sensor), &msg, now);
            return Ok(Delta {
                quarantined: true,
                alarms: vec![id],
                ..Delta::default()
            });
        }

        let mut records: Vec<(String, Timestamp, f64)> = Vec::new();
        match &m.aggregate {
            AggregatePayload::Series { points } => {
                for p in points {
                    for (c, &v) in p.values.iter().enumerate() {
                        records.push((series_key(edge, &m.sensor, c), p.ts, v));
                    }
                }
            }
            AggregatePayload::Scalar { values, .. } => {
                for (c, &v) in values.iter().enumerate() {
                    records.push((series_key(edge, &m.sensor, c), ts, v));
                }
            }
            AggregatePayload::Phasor { channels } => {
                for (c, p) in channels.iter().enumerate() {
                    let base = series_key(edge, &m.sensor, c);
                    records.push((format!("{base}.amplitude"), m.window_start, p.amplitude));
                    records.push((format!("{base}.phase"), m.window_start, p.phase));
                }
            }
        }

        let mut delta = Delta {
            devices_upserted: 1,
            ..Delta::default()
        };
        let mut triggered: Vec<(Severity, String)> = Vec::new();
        for (series, t, v) in &records {
            if let Err(e) = self.store.append(series, *t, *v) {
                log::error!("store append failed: {e}");
                continue;
            }
            delta.points_appended += 1;
            // phase values are angles, not levels
            if series.ends_with(".phase") {
                continue;
            }
            for rule in &self.rules {
                if rule_matches(rule, edge, &m.sensor, *v) {
                    triggered.push((rule.severity, format!("{series} = {v} violates threshold rule")));
                }
            }
        }
        for (severity, msg) in triggered {
            delta.alarms.push(self.raise_alarm(severity, edge, Some(&m.sensor), &msg, ts));
        }

        let view = self.devices.get_mut(&key).expect("checked above");
        view.state.last_payload = Some(m.aggregate);
        view.state.last_update = now;
        let view = view.clone();
        self.emit(CloudEvent::DeviceUpdate(Box::new(view)));
        Ok(delta)
    }

    pub fn raise_alarm(
        &mut self,
        severity: Severity,
        node: &str,
        device: Option<&str>,
        message: &str,
        ts: Timestamp,
    ) -> u64 {
        let id = self.alarms.len() as u64 + 1;
        let record = AlarmRecord {
            id,
            severity,
            node: node.to_string(),
            device: device.map(str::to_string),
            message: message.to_string(),
            ts,
            acknowledged: false,
        };
        self.alarms.push(record.clone());
        self.emit(CloudEvent::Alarm(record));
        id
    }

    /// Idempotent: acknowledging twice returns the same record.
    pub fn acknowledge(&mut self, id: u64) -> Result<AlarmRecord, CloudError> {
        let rec = id
            .checked_sub(1)
            .and_then(|i| self.alarms.get_mut(i as usize))
            .ok_or_else(|| CloudError::NotFound(format!("alarm {id}")))?;
        rec.acknowledged = true;
        Ok(rec.clone())
    }

    /// Marks nodes (and their devices) whose heartbeats stopped as offline.
    /// Returns the nodes that changed.
    pub fn check_liveness(&mut self, now: Timestamp) -> Vec<(String, Availability)> {
        let mut changed = Vec::new();
        for node in self.nodes.values_mut() {
            let a = availability_at(node.last_heartbeat, now, self.miss_threshold);
            if a != node.availability {
                node.availability = a;
                changed.push((node.label.clone(), a));
            }
        }
        for (node, a) in &changed {
            for ((edge, _), view) in self.devices.iter_mut() {
                if edge == node {
                    view.state.availability = *a;
                }
            }
            self.emit(CloudEvent::NodeStatus {
                node: node.clone(),
                availability: *a,
            });
        }
        changed
    }

    pub fn nodes(&self) -> Vec<NodeRecord> {
        self.nodes.values().cloned().collect()
    }

    pub fn node(&self, label: &str) -> Option<&NodeRecord> {
        self.nodes.get(label)
    }

    pub fn devices(&self) -> Vec<DeviceView> {
        self.devices.values().cloned().collect()
    }

    pub fn device(&self, edge: &str, label: &str) -> Option<&DeviceView> {
        self.devices.get(&(edge.to_string(), label.to_string()))
    }

    pub fn alarms(&self) -> &[AlarmRecord] {
        &self.alarms
    }

    pub fn quarantine(&self) -> &[Quarantined] {
        &self.quarantine
    }

    pub fn store(&self) -> &TimeSeriesStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut TimeSeriesStore {
        &mut self.store
    }

    pub fn query_series(
        &self,
        key: &str,
        t0: Timestamp,
        t1: Timestamp,
        max_points: usize,
    ) -> Result<Vec<Point>, CloudError> {
        if t0 > t1 {
            return Err(CloudError::Invalid("t0 is after t1".into()));
        }
        if max_points == 0 {
            return Err(CloudError::Invalid("max_points must be at least 1".into()));
        }
        Ok(self.store.query(key, t0, t1, max_points))
    }
}
