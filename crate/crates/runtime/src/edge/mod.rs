//! Edge node runtime and simulated devices.

pub mod drivers;
mod node;

pub use drivers::{AlertRecord, Driver, DriverFactory, DriverRegistry, MsgAlertDriver, SineDriver, SwitchDriver};
pub use node::{Connector, EdgeError, EdgeNode, EdgeOptions, EdgeShared, RunReport, SensorReport};
