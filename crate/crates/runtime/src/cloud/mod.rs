//! Cloud node runtime: device registry, time-series store, alarm log and
//! the HTTP API.

pub mod api;
mod node;
mod state;
pub mod store;

pub use api::ApiServer;
pub use node::{CloudNode, CloudOptions, CloudShared};
pub use state::{
    series_key, AlarmRecord, CloudError, CloudEvent, CloudState, Delta, DeviceView, NodeRecord, Quarantined,
};
pub use store::{Point, TimeSeriesStore};
