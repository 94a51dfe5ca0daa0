//! Exact path-tree laboratory for stochastic Hamilton-Jacobi-Bellman
//! equations with controlled leading coefficients.
//!
//! The probability space is a non-recombining tree of symmetric Bernoulli
//! increments, so conditional expectations are finite averages and every
//! identity can be checked to rounding error. On top of it sit value
//! functions, regular potentials and their random measures, Snell envelopes,
//! reflected equations and a finite-difference reference for the Markovian
//! case.
//!
//! All numerics are generic over [`Real`] (`f32`, `f64`); the `*64` aliases
//! below fix the scalar to `f64`.

// `!(x > 0)` deliberately rejects NaN along with nonpositive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checks;
pub mod control;
pub mod error;
pub mod lattice;
pub mod pde;
pub mod potential;
pub mod problem;
pub mod scalar;
pub mod shift;
pub mod spatial;
pub mod stopping;
pub mod value;

pub use checks::{
    dpp_two_step_gap, filtration_spread, holder_check, path_jump, supermartingale_residual,
    Extremum, HolderReport,
};
pub use control::{
    concat_strategy, controlled_state, decision_nodes, enumerate_strategies, ControlSet,
    FeedbackRule, OpenLoop, Strategy, StrategyIter, StrategyKind, DEFAULT_STRATEGY_BUDGET,
};
pub use error::{Error, Result};
pub use lattice::{
    AdaptedProcess, NodeRef, PathTree, PotentialDecomposition, TimeGrid, DEFAULT_NODE_BUDGET,
    DEFAULT_SUPERMARTINGALE_TOL,
};
pub use pde::{gaussian_reference, hjb_fd_solve, FdScheme, FdSolution};
pub use potential::{
    cost_gap_potential, decompose_potential, gradient_norm, measure_eval,
    measure_infimum_certificate, penalize_potential, psi_split, semigroup_apply, semigroup_markov,
    solve_linear_shifted, strong_continuity_statistic, CellReport, CertificateMode,
    CertificateReport, EnergyReport, GridField, LinearSolution, PathField, Penalized, Provenance,
    PsiReport, RandomField, RegularPotential,
};
pub use problem::{
    builtin_problem, path_history, validate_assumption_a1, A1Report, CostSpec, ObservedPath,
    SamplingPlan, Violation, BUILTIN_NAMES,
};
pub use scalar::Real;
pub use shift::{detect_quantum, ShiftLattice};
pub use spatial::{l2_norm, l2_norm_fn, norm_equivalence, NormEquivalence, SpatialGrid};
pub use stopping::{
    penalized_envelope, random_obstacle, reflected_bspde_solve, skorohod_residual, snell_backward,
    snell_envelope, snell_penalized, stopping_rule_oracle, LeafField, NodeField, ObstacleSpec,
    ReflectedSolution, Snell, DEFAULT_STOPPING_BUDGET,
};
pub use value::{
    cost_functional, cost_functional_markov, optimal_feedback, value_backward, value_bruteforce,
    value_markov, Layout, ValueField, DEFAULT_FIELD_BUDGET,
};

pub type TimeGrid64 = TimeGrid<f64>;
pub type PathTree64 = PathTree<f64>;
pub type AdaptedProcess64 = AdaptedProcess<f64>;
pub type ControlSet64 = ControlSet<f64>;
pub type Strategy64 = Strategy<f64>;
pub type CostSpec64 = CostSpec<f64>;
pub type SpatialGrid64 = SpatialGrid<f64>;
pub type ValueField64 = ValueField<f64>;
pub type FdScheme64 = FdScheme<f64>;
pub type ObstacleSpec64 = ObstacleSpec<f64>;
