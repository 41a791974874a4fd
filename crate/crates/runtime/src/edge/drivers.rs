//! Simulated device drivers.

use std::any::Any;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::Arc;

use edgetwin_core::config::{DeviceConfig, SignalConfig};
use edgetwin_core::{DeviceRole, Timestamp};
use edgetwin_messaging::{command_verb, Command};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;
use serde_json::{json, Value};

pub trait Driver: Send + Any {
    /// Domain class reported in heartbeats.
    fn kind(&self) -> &str;
    fn roles(&self) -> Vec<DeviceRole>;
    /// Width of the raw output vector before channel selection.
    fn outputs(&self) -> usize;
    /// Raw reading at `elapsed` seconds since the node started.
    fn sample(&mut self, elapsed: f64) -> Vec<f64>;
    fn actuate(&mut self, command: &Command) -> Result<Value, String> {
        let _ = command;
        Err("device is not an actuator".into())
    }
    fn state(&self) -> Option<Value> {
        None
    }
    fn as_any(&self) -> &dyn Any;
}

/// Three-phase sinusoidal source. Output `c` is
/// `offset + A cos(2 pi f t + phi - 2 pi c / 3)` plus harmonics and Gaussian
/// noise, so a single-phase device simply selects index 0.
pub struct SineDriver {
    signal: SignalConfig,
    rng: ChaCha8Rng,
    noise: Option<Normal<f64>>,
}

pub const PHASES: usize = 3;

impl SineDriver {
    pub fn new(signal: SignalConfig) -> Self {
        let noise = (signal.noise_std > 0.0).then(|| Normal::new(0.0, signal.noise_std).expect("finite std"));
        Self {
            rng: ChaCha8Rng::seed_from_u64(signal.seed),
            signal,
            noise,
        }
    }

    /// Noise-free value of phase `c` at `t` seconds.
    pub fn ideal(signal: &SignalConfig, c: usize, t: f64) -> f64 {
        let shift = 2.0 * PI * c as f64 / PHASES as f64;
        let theta = 2.0 * PI * signal.frequency * t + signal.phase - shift;
        let mut x = signal.offset + signal.amplitude * theta.cos();
        for &(h, rel) in &signal.harmonics {
            let h = h as f64;
            x += rel * signal.amplitude * (h * theta).cos();
        }
        x
    }
}

impl Driver for SineDriver {
    fn kind(&self) -> &str {
        "voltmeter"
    }

    fn roles(&self) -> Vec<DeviceRole> {
        vec![DeviceRole::Sensor]
    }

    fn outputs(&self) -> usize {
        PHASES
    }

    fn sample(&mut self, elapsed: f64) -> Vec<f64> {
        (0..PHASES)
            .map(|c| {
                let n = self.noise.map_or(0.0, |d| d.sample(&mut self.rng));
                Self::ideal(&self.signal, c, elapsed) + n
            })
            .collect()
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

/// Breaker that reports 1.0 when closed and 0.0 when open.
#[derive(Debug)]
pub struct SwitchDriver {
    closed: bool,
}

impl Default for SwitchDriver {
    fn default() -> Self {
        Self { closed: true }
    }
}

impl SwitchDriver {
    pub fn is_closed(&self) -> bool {
        self.closed
    }
}

impl Driver for SwitchDriver {
    fn kind(&self) -> &str {
        "switch"
    }

    fn roles(&self) -> Vec<DeviceRole> {
        vec![DeviceRole::Sensor, DeviceRole::Actuator]
    }

    fn outputs(&self) -> usize {
        1
    }

    fn sample(&mut self, _elapsed: f64) -> Vec<f64> {
        vec![if self.closed { 1.0 } else { 0.0 }]
    }

    fn actuate(&mut self, command: &Command) -> Result<Value, String> {
        match command_verb(command) {
            Some("open") => self.closed = false,
            Some("close") => self.closed = true,
            other => return Err(format!("unknown command {:?}", other.unwrap_or("<none>"))),
        }
        Ok(self.state().unwrap())
    }

    fn state(&self) -> Option<Value> {
        Some(json!({ "closed": self.closed }))
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AlertRecord {
    pub emitted: Timestamp,
    pub command: Command,
}

/// Actuator that only records the alerts it receives.
pub struct MsgAlertDriver {
    clock: Arc<dyn edgetwin_core::Clock>,
    records: Vec<AlertRecord>,
}

impl MsgAlertDriver {
    pub fn new(clock: Arc<dyn edgetwin_core::Clock>) -> Self {
        Self {
            clock,
            records: Vec::new(),
        }
    }

    pub fn records(&self) -> &[AlertRecord] {
        &self.records
    }
}

impl Driver for MsgAlertDriver {
    fn kind(&self) -> &str {
        "msg-alert"
    }

    fn roles(&self) -> Vec<DeviceRole> {
        vec![DeviceRole::Actuator]
    }

    fn outputs(&self) -> usize {
        1
    }

    fn sample(&mut self, _elapsed: f64) -> Vec<f64> {
        vec![self.records.len() as f64]
    }

    fn actuate(&mut self, command: &Command) -> Result<Value, String> {
        match command_verb(command) {
            Some("alert") | None => {
                self.records.push(AlertRecord {
                    emitted: self.clock.now(),
                    command: command.clone(),
                });
                Ok(json!({ "alerts": self.records.len() }))
            }
            Some(other) => Err(format!("unknown command {other:?}")),
        }
    }

    fn state(&self) -> Option<Value> {
        Some(json!({ "alerts": self.records.len() }))
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

pub type DriverFactory = Arc<dyn Fn(&DeviceConfig) -> Result<Box<dyn Driver>, String> + Send + Sync>;

/// Resolves config `driver` strings.
///
/// Exact registrations win. Otherwise the last dotted segment of the driver
/// name picks a simulated device: names containing `switch` get a switch,
/// `alert` a message sink, and `volt`, `amp`, `meter`, `sine` or `sensor` a
/// sinusoidal source. Field-bus settings such as `comm-type` are accepted and
/// ignored.
#[derive(Clone)]
pub struct DriverRegistry {
    exact: HashMap<String, DriverFactory>,
    clock: Arc<dyn edgetwin_core::Clock>,
}

impl DriverRegistry {
    pub fn new(clock: Arc<dyn edgetwin_core::Clock>) -> Self {
        Self {
            exact: HashMap::new(),
            clock,
        }
    }

    pub fn register(&mut self, driver: impl Into<String>, factory: DriverFactory) {
        self.exact.insert(driver.into(), factory);
    }

    pub fn create(&self, device: &DeviceConfig) -> Result<Box<dyn Driver>, String> {
        if let Some(f) = self.exact.get(&device.driver) {
            return f(device);
        }
        let name = device.driver.rsplit('.').next().unwrap_or_default().to_ascii_lowercase();
        let has = |words: &[&str]| words.iter().any(|w| name.contains(w));
        if has(&["switch", "breaker"]) {
            Ok(Box::new(SwitchDriver::default()))
        } else if has(&["alert"]) {
            Ok(Box::new(MsgAlertDriver::new(self.clock.clone())))
        } else if has(&["volt", "amp", "meter", "sine", "sensor"]) {
            let signal = device.properties.signal.clone().unwrap_or_else(default_signal);
            Ok(Box::new(SineDriver::new(signal)))
        } else {
            Err(format!("no driver for {:?}", device.driver))
        }
    }
}

/// 230 V RMS at 50 Hz.
pub fn default_signal() -> SignalConfig {
    SignalConfig {
        amplitude: 230.0 * 2f64.sqrt(),
        frequency: 50.0,
        phase: 0.0,
        offset: 0.0,
        harmonics: Vec::new(),
        noise_std: 0.0,
        seed: 0,
        extras: Default::default(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use edgetwin_core::WallClock;
    use edgetwin_messaging::command;

    #[test]
    fn sine_is_deterministic_and_three_phase() {
        let mut s = default_signal();
        s.noise_std = 1.0;
        s.seed = 3;
        let mut a = SineDriver::new(s.clone());
        let mut b = SineDriver::new(s.clone());
        for i in 0..10 {
            let t = i as f64 * 1e-3;
            assert_eq!(a.sample(t), b.sample(t));
        }
        let clean = SineDriver::new(default_signal()).sample(0.0);
        let amp = 230.0 * 2f64.sqrt();
        assert!((clean[0] - amp).abs() < 1e-9);
        assert!((clean.iter().sum::<f64>()).abs() < 1e-9);
    }

    #[test]
    fn switch_commands() {
        let mut sw = SwitchDriver::default();
        assert_eq!(sw.sample(0.0), vec![1.0]);
        assert!(sw.actuate(&command("open")).is_ok());
        assert!(!sw.is_closed());
        // idempotent
        assert!(sw.actuate(&command("open")).is_ok());
        assert!(!sw.is_closed());
        assert!(sw.actuate(&command("frobnicate")).is_err());
        assert_eq!(sw.sample(0.0), vec![0.0]);
    }

    #[test]
    fn registry_by_name() {
        let reg = DriverRegistry::new(Arc::new(WallClock));
        let dev = |driver: &str| DeviceConfig {
            label: "d".into(),
            driver: driver.into(),
            properties: Default::default(),
            extras: Default::default(),
        };
        assert_eq!(reg.create(&dev("org.example.ConcreteVoltmeter")).unwrap().kind(), "voltmeter");
        assert_eq!(reg.create(&dev("org.example.ConcreteSwitch")).unwrap().kind(), "switch");
        assert_eq!(reg.create(&dev("org.example.MsgAlert")).unwrap().kind(), "msg-alert");
        assert!(reg.create(&dev("org.example.Toaster")).is_err());
    }
}
