//! Asynchronous task execution across nodes.
//!
//! A graph is planned onto the local agent and its peers, then driven by the
//! submitting agent: ready tasks go to local worker slots or travel as
//! `task` frames to `agent.<node>.tasks`, and results come back on
//! `agent.<node>.results`.

mod agent;
mod graph;
pub mod matmul;
mod plan;
mod pool;

pub use agent::{Agent, CompletionHandle, ExecError, Reservation, RunReport, TaskFn, TaskRegistry};
pub use graph::{GraphError, Matrix, ResultMap, TaskGraph, TaskInput, TaskSpec, TaskValue};
pub use plan::{plan, AgentInfo, ExecMode, Placement, PlanError};
pub use pool::SlotPool;
