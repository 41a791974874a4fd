use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender};
use edgetwin_core::Timestamp;
use parking_lot::{Mutex, RwLock};

use crate::frame::{ActuationAck, Command, Frame, FrameType};
use crate::meter::BandwidthMeter;
use crate::{BusError, KeyPattern, RoutingKey};

/// Anything that routes frames: the in-process [`Broker`] or a TCP client.
pub trait Bus: Send + Sync {
    /// Delivers `frame` to every matching subscription and returns how many
    /// matched.
    fn publish(&self, frame: Frame) -> Result<usize, BusError>;

    fn subscribe(&self, pattern: KeyPattern) -> Result<Subscription, BusError>;

    /// Registers the caller as the single consumer of actuation commands for
    /// `edge`. A later binding for the same edge replaces the earlier one.
    fn bind_actuation(&self, edge: &str) -> Result<Subscription, BusError>;

    /// Point-to-point, at-most-once. A missing consumer is reported in the
    /// ack, not as an error.
    fn send_actuation(
        &self,
        edge: &str,
        actuator: &str,
        command: Command,
        ts: Timestamp,
    ) -> Result<ActuationAck, BusError>;
}

struct Guard(Option<Box<dyn FnOnce() + Send>>);

impl Drop for Guard {
    fn drop(&mut self) {
        if let Some(f) = self.0.take() {
            f();
        }
    }
}

/// Single-consumer stream of frames. Dropping it unsubscribes.
pub struct Subscription {
    rx: Receiver<Frame>,
    _guard: Guard,
}

impl Subscription {
    pub fn new(rx: Receiver<Frame>, on_drop: impl FnOnce() + Send + 'static) -> Self {
        Self {
            rx,
            _guard: Guard(Some(Box::new(on_drop))),
        }
    }

    /// Blocks until a frame arrives or the source closes.
    pub fn recv(&self) -> Option<Frame> {
        self.rx.recv().ok()
    }

    pub fn recv_timeout(&self, timeout: Duration) -> Result<Frame, RecvTimeoutError> {
        self.rx.recv_timeout(timeout)
    }

    pub fn try_recv(&self) -> Option<Frame> {
        self.rx.try_recv().ok()
    }

    /// Everything queued right now.
    pub fn drain(&self) -> Vec<Frame> {
        self.rx.try_iter().collect()
    }

    pub fn receiver(&self) -> &Receiver<Frame> {
        &self.rx
    }
}

struct Sink {
    id: u64,
    patterns: Vec<KeyPattern>,
    tx: Sender<Frame>,
}

pub type MeterHandle = Arc<Mutex<BandwidthMeter>>;

#[derive(Default)]
struct Inner {
    sinks: RwLock<Vec<Sink>>,
    consumers: Mutex<HashMap<String, (u64, Sender<Frame>)>>,
    meters: RwLock<Vec<(KeyPattern, MeterHandle)>>,
    next_id: AtomicU64,
    published: AtomicU64,
}

/// In-process hub. Cheap to clone; clones share state.
#[derive(Clone, Default)]
pub struct Broker {
    inner: Arc<Inner>,
}

impl Broker {
    pub fn new() -> Self {
        Self::default()
    }

    fn next_id(&self) -> u64 {
        self.inner.next_id.fetch_add(1, Ordering::Relaxed)
    }

    /// Counts the encoded size of every frame routed through the broker whose
    /// key matches `pattern`, actuation included.
    pub fn attach_meter(&self, pattern: KeyPattern, window: Duration, origin: Timestamp) -> MeterHandle {
        let m = Arc::new(Mutex::new(BandwidthMeter::new(window, origin)));
        self.inner.meters.write().push((pattern, m.clone()));
        m
    }

    fn meter(&self, frame: &Frame) {
        let meters = self.inner.meters.read();
        let mut len = None;
        for (p, m) in meters.iter() {
            if p.matches(&frame.key) {
                let n = *len.get_or_insert_with(|| frame.encoded_len());
                m.lock().record(frame.ts, n);
            }
        }
    }

    pub fn frames_published(&self) -> u64 {
        self.inner.published.load(Ordering::Relaxed)
    }

    /// Registers a multi-pattern sink; used by the TCP server to give each
    /// connection one delivery queue.
    pub(crate) fn add_sink(&self, tx: Sender<Frame>) -> u64 {
        let id = self.next_id();
        self.inner.sinks.write().push(Sink {
            id,
            patterns: Vec::new(),
            tx,
        });
        id
    }

    pub(crate) fn add_pattern(&self, sink: u64, pattern: KeyPattern) {
        if let Some(s) = self.inner.sinks.write().iter_mut().find(|s| s.id == sink) {
            s.patterns.push(pattern);
        }
    }

    pub(crate) fn remove_pattern(&self, sink: u64, pattern: &KeyPattern) {
        if let Some(s) = self.inner.sinks.write().iter_mut().find(|s| s.id == sink) {
            if let Some(i) = s.patterns.iter().position(|p| p == pattern) {
                s.patterns.remove(i);
            }
        }
    }

    pub(crate) fn remove_sink(&self, sink: u64) {
        self.inner.sinks.write().retain(|s| s.id != sink);
        self.inner.consumers.lock().retain(|_, (id, _)| *id != sink);
    }

    pub(crate) fn bind_consumer(&self, edge: &str, id: u64, tx: Sender<Frame>) {
        self.inner.consumers.lock().insert(edge.to_string(), (id, tx));
    }

    pub(crate) fn unbind_consumer(&self, edge: &str, id: u64) {
        let mut c = self.inner.consumers.lock();
        if c.get(edge).is_some_and(|(cur, _)| *cur == id) {
            c.remove(edge);
        }
    }

    pub fn has_consumer(&self, edge: &str) -> bool {
        self.inner.consumers.lock().contains_key(edge)
    }

    fn route(&self, frame: &Frame) -> usize {
        let mut count = 0;
        let mut dead = Vec::new();
        {
            let sinks = self.inner.sinks.read();
            for s in sinks.iter() {
                let n = s.patterns.iter().filter(|p| p.matches(&frame.key)).count();
                if n == 0 {
                    continue;
                }
                if s.tx.send(frame.clone()).is_ok() {
                    count += n;
                } else {
                    dead.push(s.id);
                }
            }
        }
        if !dead.is_empty() {
            self.inner.sinks.write().retain(|s| !dead.contains(&s.id));
        }
        count
    }
}

impl Bus for Broker {
    fn publish(&self, frame: Frame) -> Result<usize, BusError> {
        if frame.frame_type == FrameType::Actuation {
            return Err(BusError::Rejected("actuation frames go through send_actuation".into()));
        }
        self.meter(&frame);
        self.inner.published.fetch_add(1, Ordering::Relaxed);
        Ok(self.route(&frame))
    }

    fn subscribe(&self, pattern: KeyPattern) -> Result<Subscription, BusError> {
        let (tx, rx) = unbounded();
        let id = self.add_sink(tx);
        self.add_pattern(id, pattern);
        let b = self.clone();
        Ok(Subscription::new(rx, move || b.remove_sink(id)))
    }

    fn bind_actuation(&self, edge: &str) -> Result<Subscription, BusError> {
        edgetwin_core::model::validate_label(edge).map_err(|_| BusError::MalformedKey(edge.to_string()))?;
        let (tx, rx) = unbounded();
        let id = self.next_id();
        self.bind_consumer(edge, id, tx);
        let (b, edge) = (self.clone(), edge.to_string());
        Ok(Subscription::new(rx, move || b.unbind_consumer(&edge, id)))
    }

    fn send_actuation(
        &self,
        edge: &str,
        actuator: &str,
        command: Command,
        ts: Timestamp,
    ) -> Result<ActuationAck, BusError> {
        let key = RoutingKey::actuator(edge, actuator)?;
        let frame = Frame::with(key, ts, FrameType::Actuation, &command);
        let target = self.inner.consumers.lock().get(edge).cloned();
        let Some((id, tx)) = target else {
            return Ok(ActuationAck::undeliverable(format!("no consumer bound for {edge}")));
        };
        self.meter(&frame);
        if tx.send(frame).is_ok() {
            Ok(ActuationAck::delivered())
        } else {
            self.unbind_consumer(edge, id);
            Ok(ActuationAck::undeliverable(format!("{edge} is gone")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::command;
    use serde_json::json;

    fn frame(key: &str, seq: u64) -> Frame {
        Frame::new(key.parse().unwrap(), Timestamp(seq as i64), FrameType::Measurement, json!({ "seq": seq }))
    }

    #[test]
    fn delivery_counts() {
        let b = Broker::new();
        assert_eq!(b.publish(frame("edge.edge1.sensors.V1", 0)).unwrap(), 0);

        let s1 = b.subscribe("edge.*.sensors.*".parse().unwrap()).unwrap();
        assert_eq!(b.publish(frame("edge.edge1.sensors.V1", 1)).unwrap(), 1);
        let s2 = b.subscribe("edge.edge1.sensors.*".parse().unwrap()).unwrap();
        assert_eq!(b.publish(frame("edge.edge1.sensors.V1", 2)).unwrap(), 2);
        assert_eq!(s1.drain().len(), 2);
        assert_eq!(s2.drain().len(), 1);

        drop(s2);
        assert_eq!(b.publish(frame("edge.edge1.sensors.V1", 3)).unwrap(), 1);
        assert_eq!(b.publish(frame("edge.edge1.actuators.V1", 4)).unwrap(), 0);
    }

    #[test]
    fn per_publisher_fifo_under_concurrency() {
        let b = Broker::new();
        let sub = b.subscribe("edge.*.sensors.*".parse().unwrap()).unwrap();
        let handles: Vec<_> = (0..4)
            .map(|p| {
                let b = b.clone();
                std::thread::spawn(move || {
                    for i in 0..500 {
                        b.publish(frame(&format!("edge.p{p}.sensors.s"), i)).unwrap();
                    }
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        let mut last: HashMap<String, u64> = HashMap::new();
        let frames = sub.drain();
        assert_eq!(frames.len(), 2000);
        for f in frames {
            let seq = f.payload["seq"].as_u64().unwrap();
            let prev = last.insert(f.key.to_string(), seq);
            assert!(prev.is_none_or(|p| p < seq));
        }
    }

    #[test]
    fn actuation_point_to_point() {
        let b = Broker::new();
        let ack = b.send_actuation("edge1", "Switch", command("open"), Timestamp::ZERO).unwrap();
        assert!(!ack.delivered);

        let monitor = b.subscribe("edge.*.actuators.*".parse().unwrap()).unwrap();
        let consumer = b.bind_actuation("edge1").unwrap();
        for verb in ["open", "close"] {
            assert!(b.send_actuation("edge1", "Switch", command(verb), Timestamp::ZERO).unwrap().delivered);
        }
        let got: Vec<String> = consumer
            .drain()
            .iter()
            .map(|f| f.payload["action"].as_str().unwrap().to_string())
            .collect();
        assert_eq!(got, ["open", "close"]);
        assert!(monitor.drain().is_empty());

        drop(consumer);
        assert!(!b.send_actuation("edge1", "Switch", command("open"), Timestamp::ZERO).unwrap().delivered);
    }

    #[test]
    fn meter_sees_exact_encoded_bytes() {
        let b = Broker::new();
        let m = b.attach_meter("edge.*.sensors.*".parse().unwrap(), Duration::from_secs(1), Timestamp::ZERO);
        let mut expected = 0;
        for i in 1..=20 {
            let f = frame("edge.e.sensors.s", i * 1_000_000);
            expected += f.encode().len() as u64;
            b.publish(f).unwrap();
        }
        b.publish(frame("edge.e.heartbeat", 5)).unwrap();
        assert_eq!(m.lock().total_bytes(), expected);
        assert_eq!(m.lock().total_frames(), 20);
    }
}
