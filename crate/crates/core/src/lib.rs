//! Continuous-time neural networks whose inference and plasticity evolve as
//! one coupled ODE system, with the tooling to study how the timing of inputs
//! and error signals shapes learning.

pub mod baseline;
pub mod data;
pub mod harness;
pub mod linalg;
pub mod network;
pub mod ode;
pub mod overlap;
pub mod routing;
pub mod schedule;

pub use baseline::{train_baseline, BaselineConfig, BaselineError, BaselineResult, Mlp};
pub use data::{DataError, Dataset};
pub use harness::{
    compare_with_baseline, run_single, run_sweep, DataConfig, ExperimentConfig, HarnessError, RunRecord,
    SweepParameter,
};
pub use linalg::Matrix;
pub use network::{
    Activation, ConfigError, Network, NetworkConfig, NetworkError, NetworkState, OutputError, VInit,
};
pub use ode::{Integrator, SolverConfig, SolverError, SolverStats};
pub use overlap::{closed_form_update, plasticity_threshold, triangular_limit, OverlapError, TimingScenario};
pub use routing::{ErrorSource, RoutingKind, RoutingStrategy};
pub use schedule::{DitherRatio, Interpolation, PresentationSchedule, ScheduleError};
