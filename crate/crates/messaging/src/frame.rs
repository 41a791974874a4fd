//! Length-prefixed JSON frames.
//!
//! A frame on the wire is a 4-byte big-endian body length followed by a
//! UTF-8 JSON object with sorted keys and no whitespace. Equal frames always
//! encode to equal bytes.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};

use edgetwin_core::{AggregatePayload, DeviceDescriptor, Severity, Timestamp};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::{BusError, RoutingKey};

pub const LENGTH_PREFIX: usize = 4;
pub const MAX_BODY: usize = 64 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FrameType {
    Measurement,
    Heartbeat,
    Actuation,
    Ack,
    Alarm,
    Task,
    TaskResult,
    /// Client-to-server broker operation (TCP transport only).
    Control,
    /// Server answer to a client frame (TCP transport only).
    Reply,
}

// Fields are declared in lexical order so the derived serializer already
// emits sorted keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub key: RoutingKey,
    pub payload: Value,
    pub ts: Timestamp,
    #[serde(rename = "type")]
    pub frame_type: FrameType,
}

impl Frame {
    pub fn new(key: RoutingKey, ts: Timestamp, frame_type: FrameType, payload: Value) -> Self {
        Self {
            key,
            payload,
            ts,
            frame_type,
        }
    }

    /// Builds a frame from any serializable payload.
    pub fn with<T: Serialize>(key: RoutingKey, ts: Timestamp, frame_type: FrameType, payload: &T) -> Self {
        let payload = serde_json::to_value(payload).expect("payload serializes");
        Self::new(key, ts, frame_type, payload)
    }

    pub fn payload_as<T: DeserializeOwned>(&self) -> Result<T, BusError> {
        T::deserialize(&self.payload).map_err(|e| BusError::Codec(e.to_string()))
    }

    pub fn body(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("frame serializes")
    }

    /// Prefix plus body.
    pub fn encode(&self) -> Vec<u8> {
        let body = self.body();
        let mut out = Vec::with_capacity(LENGTH_PREFIX + body.len());
        out.extend_from_slice(&(body.len() as u32).to_be_bytes());
        out.extend_from_slice(&body);
        out
    }

    /// Size on the wire, prefix included.
    pub fn encoded_len(&self) -> usize {
        LENGTH_PREFIX + self.body().len()
    }

    /// Decodes exactly one whole frame.
    pub fn decode(bytes: &[u8]) -> Result<Self, BusError> {
        if bytes.len() < LENGTH_PREFIX {
            return Err(BusError::Codec("truncated length prefix".into()));
        }
        let len = u32::from_be_bytes(bytes[..4].try_into().unwrap()) as usize;
        let body = &bytes[LENGTH_PREFIX..];
        if body.len() != len {
            return Err(BusError::Codec(format!(
                "length prefix says {len} bytes, body has {}",
                body.len()
            )));
        }
        Self::decode_body(body)
    }

    pub fn decode_body(body: &[u8]) -> Result<Self, BusError> {
        serde_json::from_slice(body).map_err(|e| BusError::Codec(e.to_string()))
    }
}

pub fn write_frame(w: &mut impl Write, frame: &Frame) -> io::Result<usize> {
    let bytes = frame.encode();
    w.write_all(&bytes)?;
    Ok(bytes.len())
}

/// `Ok(None)` on a clean end of stream before a new frame starts.
pub fn read_frame(r: &mut impl Read) -> Result<Option<Frame>, BusError> {
    let mut prefix = [0u8; LENGTH_PREFIX];
    match r.read_exact(&mut prefix) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(BusError::Unreachable(e.to_string())),
    }
    let len = u32::from_be_bytes(prefix) as usize;
    if len > MAX_BODY {
        return Err(BusError::Codec(format!("frame of {len} bytes exceeds limit")));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)
        .map_err(|e| BusError::Unreachable(e.to_string()))?;
    Frame::decode_body(&body).map(Some)
}

/// Periodic liveness and inventory message from a node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeartbeatPayload {
    pub node: String,
    pub seq: u64,
    pub devices: Vec<DeviceDescriptor>,
    /// Heartbeat period in milliseconds.
    pub interval_ms: u64,
    pub total_slots: usize,
    pub free_slots: usize,
}

/// One published window of a sensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementPayload {
    pub sensor: String,
    /// Timestamp of the first sample in the window.
    pub window_start: Timestamp,
    pub samples: usize,
    pub sampling_interval_ms: f64,
    pub aggregate: AggregatePayload,
}

pub type Command = BTreeMap<String, Value>;

/// Builds `{"action": verb}`.
pub fn command(verb: &str) -> Command {
    BTreeMap::from([("action".to_string(), Value::from(verb))])
}

pub fn command_verb(cmd: &Command) -> Option<&str> {
    cmd.get("action").and_then(Value::as_str)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActuationRequest {
    pub actuator: String,
    pub command: Command,
}

/// Result of a point-to-point actuation send.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActuationAck {
    pub delivered: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

impl ActuationAck {
    pub fn delivered() -> Self {
        Self {
            delivered: true,
            reason: None,
        }
    }

    pub fn undeliverable(reason: impl Into<String>) -> Self {
        Self {
            delivered: false,
            reason: Some(reason.into()),
        }
    }
}

/// Edge-side outcome of applying a command, published on the device's
/// sensor key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppliedAck {
    pub actuator: String,
    pub command: Command,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Alarm raised on an edge node and forwarded to the cloud log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlarmEvent {
    pub severity: Severity,
    pub node: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub device: Option<String>,
    pub message: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde_json::json;

    fn sample() -> Frame {
        Frame::new(
            RoutingKey::sensor("edge1", "V1").unwrap(),
            Timestamp::from_millis(1500),
            FrameType::Measurement,
            json!({"z": 1, "a": [1.5, -2.0e-300], "m": {"y": null, "b": "x"}}),
        )
    }

    #[test]
    fn canonical_body() {
        let body = String::from_utf8(sample().body()).unwrap();
        assert_eq!(
            body,
            r#"{"key":"edge.edge1.sensors.V1","payload":{"a":[1.5,-2e-300],"m":{"b":"x","y":null},"z":1},"ts":1500000000,"type":"measurement"}"#
        );
    }

    #[test]
    fn prefix_counts_body() {
        let f = sample();
        let bytes = f.encode();
        let len = u32::from_be_bytes(bytes[..4].try_into().unwrap()) as usize;
        assert_eq!(len, bytes.len() - 4);
        assert_eq!(f.encoded_len(), bytes.len());
        assert_eq!(Frame::decode(&bytes).unwrap(), f);
        assert!(Frame::decode(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn stream_round_trip() {
        let mut buf = Vec::new();
        let f = sample();
        write_frame(&mut buf, &f).unwrap();
        write_frame(&mut buf, &f).unwrap();
        let mut r = buf.as_slice();
        assert_eq!(read_frame(&mut r).unwrap(), Some(f.clone()));
        assert_eq!(read_frame(&mut r).unwrap(), Some(f));
        assert_eq!(read_frame(&mut r).unwrap(), None);
    }

    #[test]
    fn typed_payloads() {
        let hb = HeartbeatPayload {
            node: "edge1".into(),
            seq: 3,
            devices: vec![],
            interval_ms: 1000,
            total_slots: 2,
            free_slots: 1,
        };
        let f = Frame::with(RoutingKey::heartbeat("edge1").unwrap(), Timestamp::ZERO, FrameType::Heartbeat, &hb);
        assert_eq!(f.payload_as::<HeartbeatPayload>().unwrap(), hb);
        assert_eq!(command_verb(&command("open")), Some("open"));
    }

    fn arb_json() -> impl Strategy<Value = Value> {
        let leaf = prop_oneof![
            Just(Value::Null),
            any::<bool>().prop_map(Value::from),
            any::<i64>().prop_map(Value::from),
            any::<f64>()
                .prop_filter("finite", |x| x.is_finite())
                .prop_map(Value::from),
            "[ -~\u{e9}\u{3a9}]{0,8}".prop_map(Value::from),
        ];
        leaf.prop_recursive(3, 24, 4, |inner| {
            prop_oneof![
                proptest::collection::vec(inner.clone(), 0..4).prop_map(Value::from),
                proptest::collection::btree_map("[a-z]{1,4}", inner, 0..4)
                    .prop_map(|m| Value::Object(m.into_iter().collect())),
            ]
        })
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(payload in arb_json(), ts in any::<i64>(), label in "[A-Za-z0-9 _-]{1,12}") {
            let f = Frame::new(RoutingKey::sensor("e", &label).unwrap(), Timestamp(ts), FrameType::Measurement, payload);
            let bytes = f.encode();
            let back = Frame::decode(&bytes).unwrap();
            prop_assert_eq!(&back, &f);
            prop_assert_eq!(back.encode(), bytes);
        }
    }
}
