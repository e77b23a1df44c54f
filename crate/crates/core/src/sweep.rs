//! Batch runs over many scenario variants.
//!
//! Each simulation is single-threaded and deterministic; a batch is
//! embarrassingly parallel. With the `parallel` feature (default) batches fan
//! out over rayon's pool, otherwise they run in order. Results come back in
//! input order either way and are identical.

use crate::ids::{Seconds, VirtualTime};
use crate::scenario::{run_scenario, RunOutcome, ScenarioSpec};

pub fn run_batch_sequential(specs: &[ScenarioSpec]) -> Vec<RunOutcome> {
    specs.iter().map(run_scenario).collect()
}

#[cfg(feature = "parallel")]
pub fn run_batch_parallel(specs: &[ScenarioSpec]) -> Vec<RunOutcome> {
    use rayon::prelude::*;
    specs.par_iter().map(run_scenario).collect()
}

/// Runs every spec, in parallel when the `parallel` feature is enabled.
pub fn run_batch(specs: &[ScenarioSpec]) -> Vec<RunOutcome> {
    #[cfg(feature = "parallel")]
    {
        run_batch_parallel(specs)
    }
    #[cfg(not(feature = "parallel"))]
    {
        run_batch_sequential(specs)
    }
}

/// Copies of `spec`, one per seed.
pub fn seed_variants(spec: &ScenarioSpec, seeds: impl IntoIterator<Item = u64>) -> Vec<ScenarioSpec> {
    seeds
        .into_iter()
        .map(|seed| ScenarioSpec { seed, ..spec.clone() })
        .collect()
}

/// Copies of `spec` with a manager crash inserted at each point.
pub fn crash_variants(spec: &ScenarioSpec, points: &[VirtualTime], restart_delay: Seconds) -> Vec<ScenarioSpec> {
    points.iter().map(|&at| spec.with_crash(at, restart_delay)).collect()
}
