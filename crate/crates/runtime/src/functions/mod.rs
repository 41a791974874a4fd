//! User functions and their triggers.
//!
//! Every function has the same three-argument shape: the sensors it reads,
//! the actuators it may drive, and free-form parameters from the config.

mod builtin;
mod engine;

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use edgetwin_core::{Measurement, MeasurementWindow, Severity, Timestamp};
use edgetwin_messaging::{AppliedAck, Command};
use parking_lot::{RwLock, RwLockReadGuard};
use serde_json::Value;
use thiserror::Error;

pub use builtin::{volt_limitation, VOLT_LIMITATION};
pub use engine::{
    AsyncSpawner, BindingId, Execution, FunctionBinding, FunctionEngine, Outcome, ThreadSpawner, TriggerEvent,
};

pub type Params = BTreeMap<String, Value>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FunctionError {
    #[error("missing parameter {0:?}")]
    MissingParameter(String),
    #[error("{0:?} is not bound to this function")]
    Unbound(String),
    #[error("actuation failed: {0}")]
    Actuation(String),
    #[error("{0}")]
    Failed(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegistrationError {
    #[error("no function registered for method {0:?}")]
    UnknownMethod(String),
    #[error("function label {0:?} already registered")]
    DuplicateLabel(String),
    #[error("function {func:?} references unknown device {label:?}")]
    DanglingReference { func: String, label: String },
    #[error("unsupported function language {0:?}")]
    UnsupportedLanguage(String),
    #[error("invalid trigger for {0:?}")]
    InvalidTrigger(String),
}

/// Read access to one sensor's rolling window.
#[derive(Clone)]
pub struct SensorView {
    label: String,
    window: Arc<RwLock<MeasurementWindow>>,
}

impl SensorView {
    pub fn new(label: impl Into<String>, window: Arc<RwLock<MeasurementWindow>>) -> Self {
        Self {
            label: label.into(),
            window,
        }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn latest(&self) -> Option<Measurement> {
        self.window.read().latest()
    }

    pub fn snapshot(&self) -> Vec<Measurement> {
        self.window.read().snapshot()
    }

    pub fn window(&self) -> RwLockReadGuard<'_, MeasurementWindow> {
        self.window.read()
    }
}

pub type Sensors = BTreeMap<String, SensorView>;

/// What a node offers to the functions it hosts.
pub trait NodeServices: Send + Sync {
    fn actuate(&self, actuator: &str, command: Command) -> Result<AppliedAck, String>;
    fn alarm(&self, severity: Severity, device: Option<&str>, message: &str);
    fn now(&self) -> Timestamp;
}

/// The actuators a function was bound to, plus the node's alarm channel.
#[derive(Clone)]
pub struct Actuators {
    labels: Vec<String>,
    services: Arc<dyn NodeServices>,
}

impl Actuators {
    pub fn new(labels: Vec<String>, services: Arc<dyn NodeServices>) -> Self {
        Self { labels, services }
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn contains(&self, label: &str) -> bool {
        self.labels.iter().any(|l| l == label)
    }

    pub fn actuate(&self, label: &str, command: Command) -> Result<AppliedAck, FunctionError> {
        if !self.contains(label) {
            return Err(FunctionError::Unbound(label.to_string()));
        }
        self.services
            .actuate(label, command)
            .map_err(FunctionError::Actuation)
    }

    pub fn alarm(&self, severity: Severity, device: Option<&str>, message: &str) {
        self.services.alarm(severity, device, message);
    }

    pub fn now(&self) -> Timestamp {
        self.services.now()
    }
}

pub type Callable =
    Arc<dyn Fn(&Sensors, &Actuators, &Params) -> Result<Option<Value>, FunctionError> + Send + Sync>;

/// Maps config `method-name` strings to callables.
#[derive(Clone, Default)]
pub struct FunctionRegistry {
    methods: HashMap<String, Callable>,
}

impl FunctionRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_builtins() -> Self {
        let mut r = Self::new();
        r.register(VOLT_LIMITATION, Arc::new(volt_limitation));
        r
    }

    pub fn register(&mut self, name: impl Into<String>, callable: Callable) {
        self.methods.insert(name.into(), callable);
    }

    /// Exact name first, then the last dotted segment, so a fully qualified
    /// class name such as `org.example.funcs.VoltLimitation` finds the
    /// builtin `VoltLimitation`.
    pub fn resolve(&self, method_name: &str) -> Option<Callable> {
        self.methods
            .get(method_name)
            .or_else(|| method_name.rsplit('.').next().and_then(|s| self.methods.get(s)))
            .cloned()
    }
}
