//! Benchmark orchestrator: boots a fresh node and registry per scenario
//! point, applies sensor and query load, and reports node counters,
//! latencies and realized energy as CSV.

mod report;
mod run;
mod scenario;

pub use report::{summary, to_csv, write_csv, CSV_HEADER};
pub use run::{run_point, sensor_vsd, PointResult, MOCK_EPOCH};
pub use scenario::{Axis, ClockMode, Scenario, ScenarioError};

/// Runs every point in order.
pub fn run_bench(scn: &Scenario) -> Vec<PointResult> {
    scn.points
        .iter()
        .map(|&p| {
            tracing::info!(point = p, "bench point starting");
            run_point(scn, p)
        })
        .collect()
}
