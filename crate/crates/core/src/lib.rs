//! Shared building blocks of the edgetwin runtime.
//!
//! Everything in this crate is transport-agnostic: the device taxonomy and
//! rolling measurement windows held by every node, the aggregation methods
//! applied to those windows before they leave an edge node (together with
//! the information-loss estimators that quantify what aggregation throws
//! away), and the JSON node configuration format.

pub mod aggregation;
pub mod clock;
pub mod config;
pub mod model;
pub mod window;

pub use aggregation::{AggregateKind, AggregatePayload, LossEstimate, PhasorEstimate};
pub use clock::{Clock, Timestamp, VirtualClock, WallClock};
pub use model::{
    mark_availability, Availability, DeviceDescriptor, DeviceRole, Measurement, Severity,
    VirtualDeviceState,
};
pub use window::MeasurementWindow;
