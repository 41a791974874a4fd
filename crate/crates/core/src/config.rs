//! JSON node configuration.
//!
//! Edge and cloud nodes each load one file:
//!
//! ```json
//! {
//!   "global-properties": { "type": "edge", "label": "edge1", "window-size": 10, "comms": {} },
//!   "devices": [ { "label": "Voltmeter Gen1", "driver": "...", "properties": { "aggregate": "phasor" } } ],
//!   "funcs": [ { "label": "VoltLimitation", "type": "synchronous", "method-name": "...", "trigger": { "type": "onRead" } } ]
//! }
//! ```
//!
//! Parsing fills in every default, so serializing a parsed config and parsing
//! it again yields the same value. Unknown keys are kept in `extras` maps and
//! surfaced through [`NodeConfig::warnings`]; they are never an error.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::aggregation::AggregateKind;
use crate::model::{validate_label, Severity};

pub type Extras = BTreeMap<String, Value>;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid configuration: {0}")]
    Json(#[from] serde_json::Error),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeType {
    Edge,
    Cloud,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecType {
    Synchronous,
    Asynchronous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TriggerKind {
    #[serde(rename = "onFrequency")]
    OnFrequency,
    #[serde(rename = "onRead")]
    OnRead,
    #[serde(rename = "onChange")]
    OnChange,
    #[serde(rename = "onStart")]
    OnStart,
}

impl fmt::Display for TriggerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TriggerKind::OnFrequency => "onFrequency",
            TriggerKind::OnRead => "onRead",
            TriggerKind::OnChange => "onChange",
            TriggerKind::OnStart => "onStart",
        })
    }
}

fn default_window_size() -> usize {
    1
}

fn default_heartbeat_ms() -> u64 {
    1000
}

fn default_slots() -> usize {
    1
}

fn default_lang() -> String {
    "rust".to_string()
}

fn default_aggregate() -> String {
    AggregateKind::All.as_str().to_string()
}

fn is_zero(x: &f64) -> bool {
    *x == 0.0
}

/// Threshold rule evaluated by the cloud on every incoming value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct AlarmRule {
    /// Restricts the rule to one edge node.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edge: Option<String>,
    /// Restricts the rule to one device label.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub device: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub above: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub below: Option<f64>,
    pub severity: Severity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct GlobalProperties {
    #[serde(rename = "type")]
    pub node_type: NodeType,
    pub label: String,
    #[serde(default = "default_window_size")]
    pub window_size: usize,
    #[serde(default)]
    pub comms: BTreeMap<String, Value>,
    /// Milliseconds between heartbeats.
    #[serde(default = "default_heartbeat_ms")]
    pub heartbeat_interval: u64,
    /// Worker slots offered to asynchronous functions and peer agents.
    #[serde(default = "default_slots")]
    pub slots: usize,
    /// Cloud only: milliseconds of heartbeat silence before a node is
    /// offline. Defaults to three heartbeat intervals.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub miss_threshold: Option<u64>,
    /// Cloud only: bearer token required by the HTTP API.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_token: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub alarm_rules: Vec<AlarmRule>,
    /// Cloud only: time-series persistence file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub store_path: Option<String>,
    /// Cloud only: seconds of history kept by the store.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retention: Option<u64>,
    #[serde(flatten)]
    pub extras: Extras,
}

/// Parameters of the synthetic signal source (`x = A cos(2 pi f t + phi)`
/// plus harmonics, DC offset and Gaussian noise).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct SignalConfig {
    #[serde(default)]
    pub amplitude: f64,
    #[serde(default)]
    pub frequency: f64,
    #[serde(default)]
    pub phase: f64,
    #[serde(default)]
    pub offset: f64,
    /// `(multiple of f, amplitude relative to A)` pairs.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub harmonics: Vec<(u32, f64)>,
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(flatten)]
    pub extras: Extras,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct DeviceProperties {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comm_type: Option<String>,
    /// Channel-selection indices into the driver's output vector.
    #[serde(default)]
    pub indexes: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window_size: Option<usize>,
    /// Kept verbatim; resolved by [`DeviceProperties::aggregate_kind`] and
    /// checked by [`validate`].
    #[serde(default = "default_aggregate")]
    pub aggregate: String,
    /// Milliseconds between samples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampling_interval: Option<f64>,
    /// Milliseconds between publishes. Defaults to `window-size` samples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aggregation_interval: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signal: Option<SignalConfig>,
    #[serde(flatten)]
    pub extras: Extras,
}

impl Default for DeviceProperties {
    fn default() -> Self {
        Self {
            comm_type: None,
            indexes: Vec::new(),
            window_size: None,
            aggregate: default_aggregate(),
            sampling_interval: None,
            aggregation_interval: None,
            signal: None,
            extras: Extras::new(),
        }
    }
}

impl DeviceProperties {
    pub fn aggregate_kind(&self) -> Option<AggregateKind> {
        self.aggregate.parse().ok()
    }

    /// Number of values per measurement after channel selection.
    pub fn channels(&self) -> usize {
        self.indexes.len().max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct DeviceConfig {
    pub label: String,
    pub driver: String,
    #[serde(default)]
    pub properties: DeviceProperties,
    #[serde(flatten)]
    pub extras: Extras,
}

impl DeviceConfig {
    /// Window capacity: the device override, else the node default.
    pub fn window_size(&self, node_default: usize) -> usize {
        self.properties.window_size.unwrap_or(node_default)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct FuncParameters {
    #[serde(default)]
    pub sensors: Vec<String>,
    #[serde(default)]
    pub actuators: Vec<String>,
    #[serde(default)]
    pub other: BTreeMap<String, Value>,
    #[serde(flatten)]
    pub extras: Extras,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct TriggerParameters {
    #[serde(default)]
    pub trigger_sensor: Vec<String>,
    /// onRead: fire every k-th reading. onFrequency: period in milliseconds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interval: Option<f64>,
    /// onChange: absolute tolerance below which a value counts as unchanged.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub epsilon: f64,
    #[serde(flatten)]
    pub extras: Extras,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerConfig {
    #[serde(rename = "type")]
    pub kind: TriggerKind,
    #[serde(default)]
    pub parameters: TriggerParameters,
    #[serde(flatten)]
    pub extras: Extras,
}

impl TriggerConfig {
    /// onRead period in readings (defaults to every reading).
    pub fn read_interval(&self) -> u64 {
        self.parameters.interval.map_or(1, |k| k.max(1.0) as u64)
    }

    /// onFrequency period.
    pub fn period(&self) -> Option<Duration> {
        self.parameters
            .interval
            .filter(|ms| *ms > 0.0)
            .map(|ms| Duration::from_secs_f64(ms / 1000.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct FuncConfig {
    pub label: String,
    #[serde(default = "default_lang")]
    pub lang: String,
    #[serde(rename = "type")]
    pub exec_type: ExecType,
    pub method_name: String,
    #[serde(default)]
    pub parameters: FuncParameters,
    pub trigger: TriggerConfig,
    #[serde(flatten)]
    pub extras: Extras,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeConfig {
    #[serde(rename = "global-properties")]
    pub global: GlobalProperties,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub devices: Vec<DeviceConfig>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub funcs: Vec<FuncConfig>,
    #[serde(flatten)]
    pub extras: Extras,
}

pub fn parse_config(text: &str) -> Result<NodeConfig, ConfigError> {
    Ok(serde_json::from_str(text)?)
}

pub fn load_config(path: impl AsRef<std::path::Path>) -> Result<NodeConfig, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_config(&text)
}

impl NodeConfig {
    pub fn node_type(&self) -> NodeType {
        self.global.node_type
    }

    pub fn label(&self) -> &str {
        &self.global.label
    }

    pub fn heartbeat_interval(&self) -> Duration {
        Duration::from_millis(self.global.heartbeat_interval)
    }

    pub fn miss_threshold(&self) -> Duration {
        Duration::from_millis(
            self.global
                .miss_threshold
                .unwrap_or(3 * self.global.heartbeat_interval),
        )
    }

    pub fn device(&self, label: &str) -> Option<&DeviceConfig> {
        self.devices.iter().find(|d| d.label == label)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// One line per unknown key, with its path.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut note = |path: String, extras: &Extras| {
            for key in extras.keys() {
                out.push(format!("unknown key {path}{key:?}"));
            }
        };
        note(String::new(), &self.extras);
        note("global-properties.".into(), &self.global.extras);
        for d in &self.devices {
            note(format!("devices[{:?}].", d.label), &d.extras);
            note(format!("devices[{:?}].properties.", d.label), &d.properties.extras);
            if let Some(s) = &d.properties.signal {
                note(format!("devices[{:?}].properties.signal.", d.label), &s.extras);
            }
        }
        for f in &self.funcs {
            note(format!("funcs[{:?}].", f.label), &f.extras);
            note(format!("funcs[{:?}].parameters.", f.label), &f.parameters.extras);
            note(format!("funcs[{:?}].trigger.", f.label), &f.trigger.extras);
            note(format!("funcs[{:?}].trigger.parameters.", f.label), &f.trigger.parameters.extras);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    InvalidLabel { label: String, reason: String },
    DuplicateLabel { label: String },
    DanglingReference { func: String, label: String },
    NonPositiveWindow { device: String },
    NonPositiveInterval { what: String },
    UnknownAggregate { device: String, value: String },
    MissingTriggerSensor { func: String },
    CloudWithDevices,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::InvalidLabel { label, reason } => write!(f, "invalid label {label:?}: {reason}"),
            Violation::DuplicateLabel { label } => write!(f, "duplicate label {label:?}"),
            Violation::DanglingReference { func, label } => {
                write!(f, "function {func:?} references unknown device {label:?}")
            }
            Violation::NonPositiveWindow { device } => write!(f, "window size of {device:?} must be positive"),
            Violation::NonPositiveInterval { what } => write!(f, "interval of {what} must be positive"),
            Violation::UnknownAggregate { device, value } => {
                write!(f, "device {device:?} has unknown aggregate {value:?}")
            }
            Violation::MissingTriggerSensor { func } => write!(f, "function {func:?} needs a trigger-sensor"),
            Violation::CloudWithDevices => write!(f, "cloud nodes cannot declare devices"),
        }
    }
}

/// Lists every violation; an empty list means the config is usable.
pub fn validate(config: &NodeConfig) -> Vec<Violation> {
    let mut out = Vec::new();
    let check_label = |label: &str, out: &mut Vec<Violation>| {
        if let Err(e) = validate_label(label) {
            out.push(Violation::InvalidLabel {
                label: label.to_string(),
                reason: e.to_string(),
            });
        }
    };

    check_label(&config.global.label, &mut out);
    if config.global.window_size == 0 {
        out.push(Violation::NonPositiveWindow { device: "global-properties".into() });
    }
    if config.global.heartbeat_interval == 0 {
        out.push(Violation::NonPositiveInterval { what: "heartbeat".into() });
    }
    if config.node_type() == NodeType::Cloud && !config.devices.is_empty() {
        out.push(Violation::CloudWithDevices);
    }

    let mut seen = BTreeSet::new();
    for d in &config.devices {
        check_label(&d.label, &mut out);
        if !seen.insert(d.label.as_str()) {
            out.push(Violation::DuplicateLabel { label: d.label.clone() });
        }
        if d.properties.window_size == Some(0) {
            out.push(Violation::NonPositiveWindow { device: d.label.clone() });
        }
        if d.properties.aggregate_kind().is_none() {
            out.push(Violation::UnknownAggregate {
                device: d.label.clone(),
                value: d.properties.aggregate.clone(),
            });
        }
        for (name, v) in [
            ("sampling-interval", d.properties.sampling_interval),
            ("aggregation-interval", d.properties.aggregation_interval),
        ] {
            if matches!(v, Some(ms) if ms <= 0.0) {
                out.push(Violation::NonPositiveInterval { what: format!("{} {name}", d.label) });
            }
        }
    }

    let devices: BTreeSet<&str> = config.devices.iter().map(|d| d.label.as_str()).collect();
    let check_refs = config.node_type() == NodeType::Edge;
    let mut seen_funcs = BTreeSet::new();
    for f in &config.funcs {
        check_label(&f.label, &mut out);
        if !seen_funcs.insert(f.label.as_str()) {
            out.push(Violation::DuplicateLabel { label: f.label.clone() });
        }
        if check_refs {
            let refs = f
                .parameters
                .sensors
                .iter()
                .chain(&f.parameters.actuators)
                .chain(&f.trigger.parameters.trigger_sensor);
            let mut reported = BTreeSet::new();
            for label in refs {
                if !devices.contains(label.as_str()) && reported.insert(label.as_str()) {
                    out.push(Violation::DanglingReference {
                        func: f.label.clone(),
                        label: label.clone(),
                    });
                }
            }
        }
        let params = &f.trigger.parameters;
        match f.trigger.kind {
            TriggerKind::OnRead | TriggerKind::OnChange if params.trigger_sensor.is_empty() => {
                out.push(Violation::MissingTriggerSensor { func: f.label.clone() });
            }
            TriggerKind::OnFrequency if f.trigger.period().is_none() => {
                out.push(Violation::NonPositiveInterval { what: f.label.clone() });
            }
            _ => {}
        }
        if f.trigger.kind == TriggerKind::OnRead && matches!(params.interval, Some(k) if k < 1.0) {
            out.push(Violation::NonPositiveInterval { what: f.label.clone() });
        }
    }
    out
}
