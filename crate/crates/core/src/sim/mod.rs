//! Deterministic discrete-event cloud backend.

mod cloud;
mod queue;
mod trace;

pub use cloud::{DeliveryError, FaultInjection, FaultKind, LoadModel, SimCloud, DEFAULT_MONITOR_INTERVAL};
pub use queue::{EventQueue, PastEvent};
pub use trace::{parse_trace_line, Trace, TraceLine};
