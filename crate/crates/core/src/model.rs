//! Device taxonomy shared by edge and cloud nodes.
//!
//! An edge node holds the physically bound object for each device (its
//! window and driver); the cloud holds a [`VirtualDeviceState`], an
//! approximate mirror refreshed from heartbeats and aggregated measurements.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::AggregatePayload;
use crate::clock::Timestamp;

/// Character reserved as the routing-key separator.
pub const KEY_SEPARATOR: char = '.';

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("label must not be empty")]
    EmptyLabel,
    #[error("label {0:?} contains the reserved '.' separator")]
    ReservedCharacter(String),
    #[error("device {0:?} has no roles")]
    NoRoles(String),
    #[error("device {0:?} must have at least one channel")]
    NoChannels(String),
    #[error("measurement has {actual} values, expected {expected}")]
    Shape { expected: usize, actual: usize },
    #[error("timestamp {got} is not after the previous one ({previous})")]
    NonIncreasingTimestamp { previous: Timestamp, got: Timestamp },
    #[error("window capacity must be at least 1")]
    ZeroCapacity,
}

/// Checks a device or node label. Spaces are fine, dots are not.
pub fn validate_label(label: &str) -> Result<(), ModelError> {
    if label.is_empty() {
        return Err(ModelError::EmptyLabel);
    }
    if label.contains(KEY_SEPARATOR) {
        return Err(ModelError::ReservedCharacter(label.to_string()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeviceRole {
    Sensor,
    Actuator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceDescriptor {
    pub label: String,
    pub roles: BTreeSet<DeviceRole>,
    /// Domain class, e.g. `voltmeter`, `switch`, `msg-alert`.
    pub kind: String,
    pub driver: String,
    pub channels: usize,
    #[serde(default)]
    pub properties: BTreeMap<String, serde_json::Value>,
}

impl DeviceDescriptor {
    pub fn new(
        label: impl Into<String>,
        kind: impl Into<String>,
        driver: impl Into<String>,
        roles: impl IntoIterator<Item = DeviceRole>,
        channels: usize,
    ) -> Self {
        Self {
            label: label.into(),
            roles: roles.into_iter().collect(),
            kind: kind.into(),
            driver: driver.into(),
            channels,
            properties: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        validate_label(&self.label)?;
        if self.roles.is_empty() {
            return Err(ModelError::NoRoles(self.label.clone()));
        }
        if self.channels == 0 {
            return Err(ModelError::NoChannels(self.label.clone()));
        }
        Ok(())
    }

    pub fn is_sensor(&self) -> bool {
        self.roles.contains(&DeviceRole::Sensor)
    }

    pub fn is_actuator(&self) -> bool {
        self.roles.contains(&DeviceRole::Actuator)
    }
}

/// One timestamped reading of a sensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub timestamp: Timestamp,
    pub values: Vec<f64>,
    pub source: String,
}

impl Measurement {
    pub fn new(timestamp: Timestamp, values: Vec<f64>, source: impl Into<String>) -> Self {
        Self {
            timestamp,
            values,
            source: source.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Availability {
    Online,
    Offline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Info,
    Warning,
    Critical,
}

/// Cloud-side mirror of an edge device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VirtualDeviceState {
    pub descriptor: DeviceDescriptor,
    pub owner: String,
    pub availability: Availability,
    pub last_heartbeat: Timestamp,
    pub last_payload: Option<AggregatePayload>,
    pub last_update: Timestamp,
}

impl VirtualDeviceState {
    pub fn new(descriptor: DeviceDescriptor, owner: impl Into<String>, heartbeat: Timestamp) -> Self {
        Self {
            descriptor,
            owner: owner.into(),
            availability: Availability::Online,
            last_heartbeat: heartbeat,
            last_payload: None,
            last_update: heartbeat,
        }
    }
}

/// Offline iff `now - last_heartbeat` is strictly greater than the threshold.
pub fn mark_availability(
    mut state: VirtualDeviceState,
    now: Timestamp,
    miss_threshold: Duration,
) -> VirtualDeviceState {
    state.availability = availability_at(state.last_heartbeat, now, miss_threshold);
    state
}

pub fn availability_at(last_heartbeat: Timestamp, now: Timestamp, miss_threshold: Duration) -> Availability {
    let silence = now.as_nanos() - last_heartbeat.as_nanos();
    if silence > miss_threshold.as_nanos() as i64 {
        Availability::Offline
    } else {
        Availability::Online
    }
}
