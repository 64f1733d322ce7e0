//! Simulation designs, the Monte Carlo driver and result files.

mod dgp;
mod experiment;
mod records;

pub use dgp::{simulate_dataset, toeplitz_omega, DgpConfig, DgpFamily};
pub use experiment::{
    canonical_method, fit_pair, replication_seed, run_experiment, AveragingDiagnostics, Cell, ElDiagnostics, ExperimentConfig,
    ExperimentResult, MethodRecord, ReplicationRecord, ResultRow,
};
pub use records::{rows, AverageRecord, FitRecord, TestRecord};
