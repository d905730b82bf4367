//! Metrics, experiments and sweeps.

mod experiment;
mod metrics;
mod sweep;

pub use experiment::{
    run_experiment, run_experiment_with, Aggregate, CostMode, ExpansionComparison, ExperimentConfig,
    ExperimentReport, SeedReport, Summary,
};
pub use metrics::{
    acceptance_rate_exact, expected_speedup, measure_cost_coefficient, table1_check, CostMeasurement,
    MetricsRecord, Table1Row, TABLE1_GAMMA, TABLE1_TOLERANCE, TABLE1_TRIPLES,
};
pub use sweep::{sweep, SweepAxis, SweepConfig, SweepRow, SweepTable};
