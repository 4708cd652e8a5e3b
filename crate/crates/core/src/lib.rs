//! Numerical laboratory for coupled semi-linear parabolic systems.
//!
//! The crate centers on one object: a system of `n` backward value
//! components riding on a one-dimensional forward diffusion. Two
//! independent solver families approximate it — Monte Carlo regression on
//! simulated paths and finite differences on a space-time grid — plus
//! probes that certify structural properties of the computed solutions:
//! componentwise ordering certificates, short-horizon expansion checks,
//! sub/supersolution residual tests, and sampled audits of the coefficient
//! assumptions everything else relies on.
//!
//! Everything is deterministic for a fixed seed, independent of thread
//! count: randomness comes from counter-based generators keyed by logical
//! indices, and parallel reductions are either exact or performed in a
//! fixed order.

pub mod audit;
pub mod backward;
pub mod comparison;
pub mod expansion;
pub mod expr;
pub mod forward;
pub mod mollify;
pub mod pdegrid;
pub mod problem;
pub mod rng;
pub mod stats;
pub mod viscosity;

pub use audit::{
    audit_assumptions, AssumptionReport, AuditOptions, AuditViolation, DriverAudit,
    OneSidedConstants,
};
pub use backward::{solve_lsmc, solve_picard, BackwardSolution, SolveError, SolveMethod};
pub use comparison::{
    certify_comparison, CompareError, ComparisonOptions, ComparisonReport, ComponentComparison,
};
pub use expansion::{
    local_expansion_probe, ExpansionError, ExpansionOptions, ExpansionPoint, ExpansionProbe,
};
pub use expr::{EvalError, ExprAst, ParseError};
pub use forward::{simulate, simulate_with_increments, PathEnsemble, SimulationError, TimeGrid};
pub use mollify::{epsilon_sweep, MollifiedProblem, MollifyError, SmoothedExpr, SweepPoint};
pub use pdegrid::{
    cross_validate, solve_fd, CrossValidateOptions, CrossValidation, GridError, GridSolution,
    ProbeComparison, Scheme, SpaceTimeMesh,
};
pub use problem::{Coefficients, ProblemError, ProblemSpec};
pub use stats::{linear_fit, log_log_exponent, mean, mean_and_stderr, LineFit};
pub use viscosity::{
    check_viscosity, regularity_audit, residual_at, ComponentViscosity, RegularityError,
    RegularityReport, TouchPoint, ViscosityError, ViscosityReport,
};
