//! TCP transport for the broker.
//!
//! Clients speak plain frames. Data frames are published as-is; `control`
//! frames carry broker operations (`subscribe`, `unsubscribe`,
//! `bind-actuation`, `unbind-actuation`, `actuate`). The server answers every
//! client frame with exactly one `reply`, in order, on the same connection
//! that also carries deliveries.

use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use crossbeam_channel::{unbounded, Receiver, Sender};
use edgetwin_core::Timestamp;
use parking_lot::Mutex;
use serde_json::{json, Value};

use crate::broker::{Broker, Bus, Subscription};
use crate::frame::{read_frame, write_frame, ActuationAck, Command, Frame, FrameType};
use crate::{BusError, KeyPattern, RoutingKey};

const REPLY_TIMEOUT: Duration = Duration::from_secs(10);

fn control_key() -> RoutingKey {
    RoutingKey::new(["broker", "control"]).unwrap()
}

fn reply_key() -> RoutingKey {
    RoutingKey::new(["broker", "reply"]).unwrap()
}

pub struct BrokerServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    conns: Arc<Mutex<Vec<TcpStream>>>,
    accept: Option<JoinHandle<()>>,
}

impl BrokerServer {
    pub fn bind(addr: impl ToSocketAddrs, broker: Broker) -> std::io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let conns = Arc::new(Mutex::new(Vec::new()));
        let accept = {
            let (stop, conns) = (stop.clone(), conns.clone());
            thread::Builder::new()
                .name("broker-accept".into())
                .spawn(move || {
                    for stream in listener.incoming() {
                        if stop.load(Ordering::SeqCst) {
                            break;
                        }
                        let Ok(stream) = stream else { continue };
                        let _ = stream.set_nodelay(true);
                        if let Ok(s) = stream.try_clone() {
                            conns.lock().push(s);
                        }
                        let broker = broker.clone();
                        thread::spawn(move || serve(stream, broker));
                    }
                })?
        };
        Ok(Self {
            addr,
            stop,
            conns,
            accept: Some(accept),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops accepting and closes every open connection.
    pub fn shutdown(&mut self) {
        if self.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
        for c in self.conns.lock().drain(..) {
            let _ = c.shutdown(Shutdown::Both);
        }
    }
}

impl Drop for BrokerServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn serve(stream: TcpStream, broker: Broker) {
    let Ok(write_half) = stream.try_clone() else { return };
    let (tx, rx) = unbounded::<Frame>();
    let sink = broker.add_sink(tx.clone());

    let writer = thread::spawn(move || {
        let mut w = BufWriter::new(write_half);
        while let Ok(f) = rx.recv() {
            if write_frame(&mut w, &f).is_err() {
                break;
            }
            if rx.is_empty() && w.flush().is_err() {
                break;
            }
        }
        let _ = w.flush();
        let _ = w.get_ref().shutdown(Shutdown::Both);
    });

    let mut reader = BufReader::new(stream);
    loop {
        let frame = match read_frame(&mut reader) {
            Ok(Some(f)) => f,
            Ok(None) => break,
            Err(e) => {
                log::debug!("broker connection closed: {e}");
                break;
            }
        };
        let ts = frame.ts;
        let answer = match frame.frame_type {
            FrameType::Control => control(&broker, sink, &tx, frame),
            FrameType::Reply => continue,
            _ => broker.publish(frame).map(|n| json!({ "count": n })),
        };
        let payload = answer.unwrap_or_else(|e| json!({ "error": e.to_string() }));
        if tx.send(Frame::new(reply_key(), ts, FrameType::Reply, payload)).is_err() {
            break;
        }
    }
    broker.remove_sink(sink);
    drop(tx);
    let _ = writer.join();
}

fn field<'a>(v: &'a Value, name: &str) -> Result<&'a str, BusError> {
    v.get(name)
        .and_then(Value::as_str)
        .ok_or_else(|| BusError::Codec(format!("control frame lacks {name:?}")))
}

fn control(broker: &Broker, sink: u64, tx: &Sender<Frame>, frame: Frame) -> Result<Value, BusError> {
    let p = &frame.payload;
    match field(p, "op")? {
        "subscribe" => {
            broker.add_pattern(sink, field(p, "pattern")?.parse()?);
            Ok(json!({ "ok": true }))
        }
        "unsubscribe" => {
            broker.remove_pattern(sink, &field(p, "pattern")?.parse()?);
            Ok(json!({ "ok": true }))
        }
        "bind-actuation" => {
            broker.bind_consumer(field(p, "edge")?, sink, tx.clone());
            Ok(json!({ "ok": true }))
        }
        "unbind-actuation" => {
            broker.unbind_consumer(field(p, "edge")?, sink);
            Ok(json!({ "ok": true }))
        }
        "actuate" => {
            let command: Command = p
                .get("command")
                .cloned()
                .map(serde_json::from_value)
                .transpose()
                .map_err(|e| BusError::Codec(e.to_string()))?
                .unwrap_or_default();
            let ack = broker.send_actuation(field(p, "edge")?, field(p, "actuator")?, command, frame.ts)?;
            Ok(serde_json::to_value(ack).unwrap())
        }
        other => Err(BusError::Rejected(format!("unknown control op {other:?}"))),
    }
}

struct LocalSub {
    id: u64,
    pattern: KeyPattern,
    tx: Sender<Frame>,
}

struct ClientInner {
    stream: TcpStream,
    call: Mutex<BufWriter<TcpStream>>,
    replies: Receiver<Frame>,
    subs: Mutex<Vec<LocalSub>>,
    consumers: Mutex<HashMap<String, (u64, Sender<Frame>)>>,
    next_id: AtomicU64,
    alive: AtomicBool,
}

impl Drop for ClientInner {
    fn drop(&mut self) {
        let _ = self.stream.shutdown(Shutdown::Both);
    }
}

/// [`Bus`] backed by a remote [`BrokerServer`].
#[derive(Clone)]
pub struct RemoteBus {
    inner: Arc<ClientInner>,
}

impl RemoteBus {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self, BusError> {
        let stream = TcpStream::connect(addr).map_err(|e| BusError::Unreachable(e.to_string()))?;
        let _ = stream.set_nodelay(true);
        let io = |e: std::io::Error| BusError::Unreachable(e.to_string());
        let read_half = stream.try_clone().map_err(io)?;
        let write_half = stream.try_clone().map_err(io)?;
        let (reply_tx, replies) = unbounded();
        let inner = Arc::new(ClientInner {
            stream,
            call: Mutex::new(BufWriter::new(write_half)),
            replies,
            subs: Mutex::new(Vec::new()),
            consumers: Mutex::new(HashMap::new()),
            next_id: AtomicU64::new(0),
            alive: AtomicBool::new(true),
        });
        let weak = Arc::downgrade(&inner);
        thread::Builder::new()
            .name("bus-reader".into())
            .spawn(move || {
                let mut r = BufReader::new(read_half);
                while let Ok(Some(f)) = read_frame(&mut r) {
                    let Some(inner) = weak.upgrade() else { break };
                    match f.frame_type {
                        FrameType::Reply => {
                            let _ = reply_tx.send(f);
                        }
                        FrameType::Actuation => {
                            let edge = f.key.segment(1).unwrap_or_default().to_string();
                            if let Some((_, tx)) = inner.consumers.lock().get(&edge) {
                                let _ = tx.send(f);
                            }
                        }
                        _ => {
                            for s in inner.subs.lock().iter().filter(|s| s.pattern.matches(&f.key)) {
                                let _ = s.tx.send(f.clone());
                            }
                        }
                    }
                }
                if let Some(inner) = weak.upgrade() {
                    inner.alive.store(false, Ordering::SeqCst);
                    inner.subs.lock().clear();
                    inner.consumers.lock().clear();
                }
            })
            .map_err(io)?;
        Ok(Self { inner })
    }

    /// Retries with doubling backoff, starting at `first_delay`.
    pub fn connect_with_retry(
        addr: impl ToSocketAddrs + Clone,
        attempts: usize,
        first_delay: Duration,
    ) -> Result<Self, BusError> {
        let mut delay = first_delay;
        let mut last = BusError::Unreachable("no attempts".into());
        for i in 0..attempts.max(1) {
            match Self::connect(addr.clone()) {
                Ok(c) => return Ok(c),
                Err(e) => last = e,
            }
            if i + 1 < attempts {
                thread::sleep(delay);
                delay = (delay * 2).min(Duration::from_secs(5));
            }
        }
        Err(last)
    }

    pub fn is_connected(&self) -> bool {
        self.inner.alive.load(Ordering::SeqCst)
    }

    fn request(&self, frame: Frame) -> Result<Value, BusError> {
        if !self.is_connected() {
            return Err(BusError::Unreachable("connection closed".into()));
        }
        let mut w = self.inner.call.lock();
        write_frame(&mut *w, &frame)
            .and_then(|_| w.flush())
            .map_err(|e| BusError::Unreachable(e.to_string()))?;
        let reply = self
            .inner
            .replies
            .recv_timeout(REPLY_TIMEOUT)
            .map_err(|e| BusError::Unreachable(e.to_string()))?;
        drop(w);
        match reply.payload.get("error").and_then(Value::as_str) {
            Some(e) => Err(BusError::Rejected(e.to_string())),
            None => Ok(reply.payload),
        }
    }

    fn control(&self, payload: Value) -> Result<Value, BusError> {
        self.request(Frame::new(control_key(), Timestamp::ZERO, FrameType::Control, payload))
    }
}

impl Bus for RemoteBus {
    fn publish(&self, frame: Frame) -> Result<usize, BusError> {
        let reply = self.request(frame)?;
        Ok(reply.get("count").and_then(Value::as_u64).unwrap_or(0) as usize)
    }

    fn subscribe(&self, pattern: KeyPattern) -> Result<Subscription, BusError> {
        let (tx, rx) = unbounded();
        let id = self.inner.next_id.fetch_add(1, Ordering::Relaxed);
        self.inner.subs.lock().push(LocalSub {
            id,
            pattern: pattern.clone(),
            tx,
        });
        let text = pattern.to_string();
        if let Err(e) = self.control(json!({ "op": "subscribe", "pattern": text })) {
            self.inner.subs.lock().retain(|s| s.id != id);
            return Err(e);
        }
        let me = self.clone();
        Ok(Subscription::new(rx, move || {
            me.inner.subs.lock().retain(|s| s.id != id);
            let _ = me.control(json!({ "op": "unsubscribe", "pattern": text }));
        }))
    }

    fn bind_actuation(&self, edge: &str) -> Result<Subscription, BusError> {
        let (tx, rx) = unbounded();
        let id = self.inner.next_id.fetch_add(1, Ordering::Relaxed);
        self.inner.consumers.lock().insert(edge.to_string(), (id, tx));
        self.control(json!({ "op": "bind-actuation", "edge": edge }))?;
        let (me, edge) = (self.clone(), edge.to_string());
        Ok(Subscription::new(rx, move || {
            let mut c = me.inner.consumers.lock();
            if c.get(&edge).is_some_and(|(cur, _)| *cur == id) {
                c.remove(&edge);
                drop(c);
                let _ = me.control(json!({ "op": "unbind-actuation", "edge": edge }));
            }
        }))
    }

    fn send_actuation(
        &self,
        edge: &str,
        actuator: &str,
        command: Command,
        ts: Timestamp,
    ) -> Result<ActuationAck, BusError> {
        let payload = json!({ "op": "actuate", "edge": edge, "actuator": actuator, "command": command });
        let reply = self.request(Frame::new(control_key(), ts, FrameType::Control, payload))?;
        serde_json::from_value(reply).map_err(|e| BusError::Codec(e.to_string()))
    }
}
