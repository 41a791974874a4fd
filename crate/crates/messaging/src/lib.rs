//! Topic-based publish/subscribe, point-to-point actuation and bandwidth
//! metering.
//!
//! Sensor streams travel on `edge.<edge>.sensors.<sensor>`; commands reach
//! the owning edge on `edge.<edge>.actuators.<actuator>`. The same [`Frame`]
//! bytes are used in process and over TCP, so metered sizes do not depend on
//! the transport.

pub mod broker;
pub mod frame;
pub mod key;
pub mod meter;
pub mod tcp;

use thiserror::Error;

pub use broker::{Broker, Bus, MeterHandle, Subscription};
pub use frame::{
    command, command_verb, read_frame, write_frame, ActuationAck, ActuationRequest, AlarmEvent, AppliedAck,
    Command, Frame, FrameType, HeartbeatPayload, MeasurementPayload,
};
pub use key::{KeyPattern, RoutingKey};
pub use meter::{BandwidthMeter, NotReady};
pub use tcp::{BrokerServer, RemoteBus};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BusError {
    #[error("malformed routing key {0:?}")]
    MalformedKey(String),
    #[error("broker unreachable: {0}")]
    Unreachable(String),
    #[error("frame codec: {0}")]
    Codec(String),
    #[error("rejected: {0}")]
    Rejected(String),
}
