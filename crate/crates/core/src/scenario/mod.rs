//! Scenario harness: declarative scenarios, the runner, metrics and trace
//! comparison.

pub mod bundled;
pub mod diff;
pub mod report;
pub mod runner;
pub mod spec;

pub use diff::{diff_trace_text, diff_traces, TraceDiff, UnreadableTrace};
pub use report::MetricsReport;
pub use runner::{run_scenario, run_scenario_with_store, ClientRecord, RunOutcome};
pub use spec::{FaultTarget, MainConfig, ScenarioError, ScenarioEvent, ScenarioSpec, TimedEvent};
