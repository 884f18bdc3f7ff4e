//! Simulation and mean-field verification toolkit for the multi-strategy
//! Moran process under weak selection.
//!
//! The chain lives on the count lattice of the probability simplex
//! ([`engine`]); its large-population, weak-selection limit is the
//! replicator flow ([`flow`]). Ensembles are compared to the limit in the
//! 1-Wasserstein distance ([`transport`]) by the experiment harness
//! ([`lab`]).

/// Version of this library, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub mod engine;
pub mod error;
pub mod flow;
pub mod io;
pub mod lab;
pub mod rng;
pub mod simplex;
pub mod transport;
pub mod validation;

pub use engine::{
    exact_drift, simulate, simulate_steps, simulate_stream, step, transition_table, DiscreteState, Outcome,
    ScalingSchedule, Sizing, Trajectory, TransitionTable,
};
pub use error::{Error, Result};
pub use flow::{flow, flow_with_stats, pushforward, FlowConfig, FlowStats};
pub use lab::{
    convergence_experiment, limit_ensemble, regime_experiment, run_ensemble, standard_family, weak_form_residual,
    ConvergenceReport, EnsembleOutput, ExperimentSettings, InitialLaw, PathSet, Regime, RegimeReport,
    ResidualEstimate, TestFunction, Thresholds, TimeWindow, Verdict,
};
pub use simplex::{
    expected_payoff, fitness_profile, mean_fitness_expanded, replicator_field, FitnessProfile, PayoffMatrix,
    SimplexPoint,
};
pub use transport::{w1_dual_lower_bound, w1_exact, w1_sliced, w1_sliced_raw, EmpiricalMeasure, TransportPlan, Witness};
