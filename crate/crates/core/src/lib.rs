//! Task-parallel runtime with data-flow dependencies.
//!
//! Tasks declare the keys they read and write; the runtime orders
//! conflicting tasks in creation order and runs the rest in parallel. Loops
//! can be recorded once as a cyclic task graph and replayed without
//! re-creating tasks or synchronizing between iterations.

pub mod access;
pub mod dctg;
pub mod deps;
pub mod error;
mod node;
pub mod oracle;
pub mod runtime;
pub mod scheduler;
pub mod trace;

pub use access::{AccessKey, AccessMode, DataAccess};
pub use dctg::{DctgInfo, GraphMode, Iterations, NodeInfo, TaskiterOptions};
pub use deps::{Edge, EdgeKind, TaskId};
pub use error::RuntimeError;
pub use node::ConditionFn;
pub use runtime::{
    BypassRecord, Histogram, MainSpawner, Metrics, Runtime, RuntimeConfig, Spawner, Task, TaskContext, Variant,
};
pub use scheduler::{Placement, PolicyConfig, SchedTelemetry};
pub use trace::{EventKind, TraceEvent};
