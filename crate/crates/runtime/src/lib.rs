//! Node runtimes for the edge/cloud digital twin.

pub mod cloud;
pub mod edge;
pub mod functions;
pub mod offload;
