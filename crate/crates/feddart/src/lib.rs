//! Server-centric federated learning runtime.
//!
//! The runtime is split into three cooperating pieces:
//!
//! - a coordination server ([`server`]) that owns the device registry, the
//!   task queue and the result store, exposed over a small REST API
//!   ([`protocol`]),
//! - client workers ([`worker`]) that register themselves, long-poll for
//!   assignments, execute registered task functions on local data and submit
//!   results back,
//! - a non-blocking workflow library ([`manager`] on top of [`backend`]) used
//!   by the aggregation side to create tasks and collect whatever results are
//!   currently available.
//!
//! Everything the workflow side does goes through a [`transport::Transport`].
//! The production transport speaks HTTP to a real server; the test-mode
//! transport drives the very same server state machine in process and executes
//! task functions sequentially, so a workflow developed in test mode behaves
//! identically when deployed against a distributed setup.

pub mod backend;
pub mod clock;
pub mod config;
pub mod core;
pub mod error;
pub mod logging;
pub mod manager;
pub mod protocol;
pub mod server;
pub mod transport;
pub mod worker;

pub use crate::clock::{Clock, SimulatedClock, SystemClock};
pub use crate::core::{
    result_list_of, DeviceRecord, DeviceSummary, Handle, ParameterVector, TaskKind, TaskResult,
    TaskSpec, TaskState, TaskStatus,
};
pub use crate::error::{ApiErrorCode, Error, Result};
pub use crate::manager::{InitParams, ManagerOptions, TaskRequest, WorkflowManager};
pub use crate::worker::{FunctionRegistry, WorkerConfig};
