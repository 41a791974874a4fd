use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use crossbeam_channel::Select;
use edgetwin_core::config::{validate, NodeConfig, NodeType};
use edgetwin_core::{Availability, Clock, Severity, Timestamp};
use edgetwin_messaging::{command_verb, ActuationAck, Bus, Command, KeyPattern, Subscription};
use log::{info, warn};
use parking_lot::{RwLock, RwLockReadGuard, RwLockWriteGuard};
use tokio::sync::broadcast;

use super::api::ApiServer;
use super::state::{CloudError, CloudEvent, CloudState};
use super::store::TimeSeriesStore;
use crate::offload::Agent;

const RETENTION_EVERY: Duration = Duration::from_secs(1);

#[derive(Default)]
pub struct CloudOptions {
    /// Advertised to edge agents once per heartbeat interval.
    pub agent: Option<Agent>,
    /// Serve the HTTP API on this address.
    pub http: Option<SocketAddr>,
}

/// Everything the ingestion loop and the HTTP handlers share.
pub struct CloudShared {
    label: String,
    state: RwLock<CloudState>,
    bus: Arc<dyn Bus>,
    clock: Arc<dyn Clock>,
    token: Option<String>,
}

impl CloudShared {
    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn state(&self) -> RwLockReadGuard<'_, CloudState> {
        self.state.read()
    }

    pub fn state_mut(&self) -> RwLockWriteGuard<'_, CloudState> {
        self.state.write()
    }

    pub fn token(&self) -> Option<&str> {
        self.token.as_deref()
    }

    pub fn subscribe(&self) -> broadcast::Receiver<CloudEvent> {
        self.state.read().subscribe()
    }

    pub fn now(&self) -> Timestamp {
        self.clock.now()
    }

    /// Manual actuation. Offline targets are not contacted; the caller gets
    /// an undeliverable ack. Every attempt that reaches the bus is logged as
    /// an info alarm.
    pub fn actuate(&self, edge: &str, actuator: &str, command: Command) -> Result<ActuationAck, CloudError> {
        {
            let state = self.state.read();
            let view = state
                .device(edge, actuator)
                .ok_or_else(|| CloudError::NotFound(format!("device {edge}/{actuator}")))?;
            if !view.state.descriptor.is_actuator() {
                return Err(CloudError::NotFound(format!("{edge}/{actuator} is not an actuator")));
            }
            if state.node(edge).map(|n| n.availability) != Some(Availability::Online) {
                return Ok(ActuationAck::undeliverable(format!("{edge} is offline")));
            }
        }
        let now = self.clock.now();
        let ack = self.bus.send_actuation(edge, actuator, command.clone(), now)?;
        let verb = command_verb(&command).map_or_else(|| serde_json::to_string(&command).unwrap_or_default(), str::to_string);
        let outcome = if ack.delivered { "delivered" } else { "undeliverable" };
        let msg = format!("manual actuation {verb:?} on {edge}/{actuator}: {outcome}");
        self.state
            .write()
            .raise_alarm(Severity::Info, edge, Some(actuator), &msg, now);
        Ok(ack)
    }
}

/// Cloud runtime: ingests heartbeats, measurements and alarms from the bus,
/// tracks liveness and optionally serves the HTTP API.
pub struct CloudNode {
    shared: Arc<CloudShared>,
    stop: Arc<AtomicBool>,
    ingest: Option<JoinHandle<()>>,
    api: Option<ApiServer>,
}

impl CloudNode {
    pub fn start(
        config: NodeConfig,
        bus: Arc<dyn Bus>,
        clock: Arc<dyn Clock>,
        options: CloudOptions,
    ) -> Result<Self, CloudError> {
        if config.node_type() != NodeType::Cloud {
            return Err(CloudError::Config("not a cloud config".into()));
        }
        let violations = validate(&config);
        if !violations.is_empty() {
            return Err(CloudError::Config(format!("{violations:?}")));
        }
        let g = &config.global;
        let retention = g.retention.map(Duration::from_secs);
        let store = match &g.store_path {
            Some(p) => TimeSeriesStore::open(p, retention).map_err(|e| CloudError::Io(e.to_string()))?,
            None => TimeSeriesStore::in_memory(),
        };
        let state = CloudState::new(store, g.alarm_rules.clone(), config.miss_threshold());
        let shared = Arc::new(CloudShared {
            label: g.label.clone(),
            state: RwLock::new(state),
            bus: bus.clone(),
            clock,
            token: g.api_token.clone(),
        });

        // heartbeats and alarms are three segments, sensor traffic four
        let subs = vec![
            bus.subscribe("edge.*.*".parse::<KeyPattern>()?)?,
            bus.subscribe("edge.*.sensors.*".parse::<KeyPattern>()?)?,
        ];
        let stop = Arc::new(AtomicBool::new(false));
        let heartbeat = config.heartbeat_interval();
        let period = (heartbeat / 4).clamp(Duration::from_millis(10), Duration::from_millis(250));
        let ingest = {
            let shared = shared.clone();
            let stop = stop.clone();
            let agent = options.agent;
            std::thread::Builder::new()
                .name(format!("{}-ingest", g.label))
                .spawn(move || ingest_loop(shared, subs, stop, period, heartbeat, agent))
                .map_err(|e| CloudError::Io(e.to_string()))?
        };
        let api = match options.http {
            Some(addr) => Some(ApiServer::start(addr, shared.clone()).map_err(|e| CloudError::Io(e.to_string()))?),
            None => None,
        };
        if let Some(a) = &api {
            info!("{}: HTTP API on {}", g.label, a.local_addr());
        }
        Ok(Self {
            shared,
            stop,
            ingest: Some(ingest),
            api,
        })
    }

    pub fn shared(&self) -> Arc<CloudShared> {
        self.shared.clone()
    }

    pub fn api_addr(&self) -> Option<SocketAddr> {
        self.api.as_ref().map(ApiServer::local_addr)
    }

    pub fn shutdown(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.ingest.take() {
            let _ = h.join();
        }
        if let Some(mut api) = self.api.take() {
            api.shutdown();
        }
        if let Err(e) = self.shared.state.write().store_mut().flush() {
            warn!("final store flush failed: {e}");
        }
    }
}

impl Drop for CloudNode {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn ingest_loop(
    shared: Arc<CloudShared>,
    subs: Vec<Subscription>,
    stop: Arc<AtomicBool>,
    period: Duration,
    heartbeat: Duration,
    agent: Option<Agent>,
) {
    let mut sel = Select::new();
    for s in &subs {
        sel.recv(s.receiver());
    }
    let mut last_tick = shared.now();
    let mut last_retention = last_tick;
    let mut last_advertise: Option<Timestamp> = None;
    while !stop.load(Ordering::SeqCst) {
        if let Ok(op) = sel.select_timeout(period) {
            let i = op.index();
            match op.recv(subs[i].receiver()) {
                Ok(frame) => {
                    let now = shared.now();
                    if let Err(e) = shared.state.write().ingest(&frame, now) {
                        warn!("{}: {e}", shared.label);
                    }
                }
                Err(_) => {
                    warn!("{}: bus subscription closed", shared.label);
                    sel.remove(i);
                }
            }
        }
        let now = shared.now();
        if now.duration_since(last_tick) >= period {
            last_tick = now;
            let mut state = shared.state.write();
            state.check_liveness(now);
            if let Err(e) = state.store_mut().maybe_flush() {
                warn!("store flush failed: {e}");
            }
            if now.duration_since(last_retention) >= RETENTION_EVERY {
                last_retention = now;
                if let Err(e) = state.store_mut().apply_retention(now) {
                    warn!("retention failed: {e}");
                }
            }
        }
        if let Some(a) = &agent {
            if last_advertise.is_none_or(|t| now.duration_since(t) >= heartbeat) {
                last_advertise = Some(now);
                if let Err(e) = a.advertise() {
                    warn!("agent advertise failed: {e}");
                }
            }
        }
    }
}
