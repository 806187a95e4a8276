//! Iterative regularization of systems of ill-posed operator equations by
//! Kaczmarz-type methods.
//!
//! The crate implements two loping variants alongside their classical
//! baselines:
//!
//! * the **loping Landweber-Kaczmarz method** (`llk`), which sweeps the
//!   equations cyclically, skips the expensive adjoint update whenever the
//!   active residual already sits below its noise threshold, and stops at
//!   the first sweep in which every update was skipped;
//! * the **embedded Landweber-Kaczmarz method** (`elk`), which lifts the
//!   unknown to one copy per equation, updates all copies in parallel
//!   against their own equations, and interleaves a balancing step that
//!   contracts the differences between copies;
//! * the **classical Landweber-Kaczmarz** iteration with a discrepancy stop
//!   on the active equation, and the plain **Landweber** iteration on the
//!   stacked single equation, as baselines.
//!
//! [`operator`] defines the block abstraction and numerical checks for the
//! assumptions the convergence theory needs (adjoint exactness, derivative
//! order, norm scaling, tangential cone constant); [`problems`] ships
//! deterministic ill-posed test problems with known solutions; [`solver`]
//! and [`embedded`] hold the iterations themselves.

pub mod embedded;
pub mod operator;
pub mod problems;
pub mod solver;
pub mod vector;

pub use embedded::{
    average_components, balancing_step, choose_lambda, component_spread, d_adjoint, d_apply,
    embedding_step, g_apply, landweber_via_averaging, run_elk, BalanceStatistic, DifferenceBlock,
    ElkPhase, ElkRun, ElkStepRecord, EmbeddedConfig, Epsilon, LambdaChoice, StackedVector,
};
pub use operator::{
    estimate_eta, estimate_norm, regularity_report, verify_adjoint, verify_frechet, Ball,
    ClosureBlock, DenseLinearBlock, FrechetOrder, OperatorBlock, OperatorSystem, RegularityReport,
};
pub use problems::{
    add_noise, builtin_problem_ids, make_linear_fredholm, make_weakly_nonlinear, problem_by_id,
    verify_problem, NoisySample, ProblemError, TestProblem,
};
pub use solver::{
    check_tau, finite_stop_bound, llk_step, lop_weight, monotonicity_gap, run_classical_lk,
    run_classical_lk_for_cycles, run_landweber, run_llk, FiniteStopBound, LkRun, NoiseLevels,
    RunResult, SolverConfig, SolverError, StepRecord, StopReason,
};
pub use vector::Vector;
