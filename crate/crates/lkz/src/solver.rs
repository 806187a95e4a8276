//! Kaczmarz-type iterative regularization of systems of ill-posed equations.
//!
//! Three single-space solvers live here:
//!
//! * [`run_llk`] — the loping Landweber-Kaczmarz method. Each step works on
//!   one equation in cyclic order and carries a bang-bang weight: the update
//!   `x - F'(x)*(F(x) - y)` is applied only while the active residual exceeds
//!   its noise threshold `tau * delta_i`, and the run stops at the first full
//!   cycle in which every weight is zero.
//! * [`run_classical_lk`] — the classical Landweber-Kaczmarz iteration with
//!   unit weights, stopped by the discrepancy principle on the active
//!   equation.
//! * [`run_landweber`] — the Landweber iteration applied to the single
//!   stacked equation `1/sqrt(N) (F_0, ..., F_{N-1})`.
//!
//! [`monotonicity_gap`] and [`finite_stop_bound`] evaluate the quantitative
//! estimates behind the stopping theory so runs can be audited numerically.

use thiserror::Error;

use crate::operator::OperatorSystem;
use crate::vector::Vector;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cone condition violated: eta must lie in [0, 1/2), got {0}")]
    EtaOutOfRange(f64),
    #[error("tau = {tau} too small: the cone constant requires tau > {infimum}")]
    TauTooSmall { tau: f64, infimum: f64 },
    #[error("{what} must be finite and non-negative")]
    BadNoiseLevel { what: &'static str },
}

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("system has {expected} equations but {what} has {got} entries")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite residual for equation {block} at step {step}")]
    NonFiniteResidual { step: usize, block: usize },
    #[error("iterate left the trust ball at step {step}: distance {dist} > rho {rho}")]
    LeftTrustBall { step: usize, dist: f64, rho: f64 },
    #[error("bound requires a stationary run, got {reason:?}")]
    NotStationary { reason: StopReason },
    #[error("bound is vacuous: min_i delta_i must be positive")]
    VacuousBound,
    #[error("bound denominator (1-2 eta) tau - 2 (1+eta) = {0} is not positive")]
    DegenerateDenominator(f64),
}

/// Per-equation noise levels `delta_i` with their maximum.
#[derive(Debug, Clone)]
pub struct NoiseLevels {
    deltas: Vec<f64>,
    delta_max: f64,
}

impl NoiseLevels {
    pub fn new(deltas: Vec<f64>) -> Result<Self, ConfigError> {
        if deltas.iter().any(|d| !d.is_finite() || *d < 0.0) {
            return Err(ConfigError::BadNoiseLevel {
                what: "every noise level",
            });
        }
        let delta_max = deltas.iter().cloned().fold(0.0, f64::max);
        Ok(Self { deltas, delta_max })
    }

    /// All levels zero: exact data.
    pub fn zero(n: usize) -> Self {
        Self {
            deltas: vec![0.0; n],
            delta_max: 0.0,
        }
    }

    pub fn uniform(n: usize, delta: f64) -> Result<Self, ConfigError> {
        Self::new(vec![delta; n])
    }

    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }

    pub fn delta(&self, i: usize) -> f64 {
        self.deltas[i]
    }

    pub fn deltas(&self) -> &[f64] {
        &self.deltas
    }

    pub fn delta_max(&self) -> f64 {
        self.delta_max
    }

    pub fn min(&self) -> f64 {
        self.deltas.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Noise level of the stacked single equation, `1/sqrt(N) |(delta_i)_i|`.
    pub fn stacked_level(&self) -> f64 {
        let sq: f64 = self.deltas.iter().map(|d| d * d).sum();
        (sq / self.deltas.len() as f64).sqrt()
    }
}

/// Infimum of admissible `tau` for a cone constant `eta`; configurations must
/// choose `tau` strictly above `2 (1+eta) / (1-2 eta)`.
pub fn check_tau(eta: f64) -> Result<f64, ConfigError> {
    if !(0.0..0.5).contains(&eta) {
        return Err(ConfigError::EtaOutOfRange(eta));
    }
    Ok(2.0 * (1.0 + eta) / (1.0 - 2.0 * eta))
}

/// Configuration shared by the single-space solvers.
#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub tau: f64,
    pub max_cycles: usize,
    pub eta_assumed: f64,
    /// Reference solution for per-step error tracking; never influences the
    /// iteration itself.
    pub record_error_to: Option<Vector>,
    /// Radius of the trust ball around the starting point. When set, a run
    /// aborts as soon as an iterate leaves the ball.
    pub rho: Option<f64>,
    /// Keep every iterate (including the start) in the run result.
    pub keep_iterates: bool,
}

impl SolverConfig {
    pub fn new(tau: f64, eta_assumed: f64) -> Result<Self, ConfigError> {
        let infimum = check_tau(eta_assumed)?;
        if !(tau > infimum) {
            return Err(ConfigError::TauTooSmall { tau, infimum });
        }
        Ok(Self {
            tau,
            max_cycles: 10_000,
            eta_assumed,
            record_error_to: None,
            rho: None,
            keep_iterates: false,
        })
    }

    pub fn with_max_cycles(mut self, max_cycles: usize) -> Self {
        self.max_cycles = max_cycles;
        self
    }

    pub fn with_reference(mut self, reference: Vector) -> Self {
        self.record_error_to = Some(reference);
        self
    }

    pub fn with_trust_radius(mut self, rho: f64) -> Self {
        self.rho = Some(rho);
        self
    }

    pub fn with_kept_iterates(mut self) -> Self {
        self.keep_iterates = true;
        self
    }
}

/// Bang-bang loping weight: active exactly when the residual strictly
/// exceeds `tau * delta_i`. Ties lope.
pub fn lop_weight(residual_norm: f64, tau: f64, delta_i: f64) -> bool {
    residual_norm > tau * delta_i
}

/// One step of a solver trace.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub n: usize,
    /// Cyclic equation index, or -1 for steps acting on all equations.
    pub active_index: i64,
    pub omega: bool,
    pub residual_norm: f64,
    pub threshold: f64,
    /// Cumulative count of adjoint evaluations up to and including this step.
    pub adjoint_evals_cum: u64,
    /// Distance of the post-step iterate to the configured reference.
    pub error_to_ref: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// A full cycle produced only zero weights; the iteration is stationary.
    StationaryCycle,
    /// The discrepancy principle fired on the active residual.
    Discrepancy,
    /// Guard stop: the cycle budget ran out. Never a convergence claim.
    MaxCycles,
}

/// Outcome of a solver run over iterate type `X` with records `R`.
#[derive(Debug, Clone)]
pub struct RunResult<X, R> {
    pub final_iterate: X,
    pub termination_index: usize,
    pub reason: StopReason,
    pub trace: Vec<R>,
    /// Present when the configuration asked to keep iterates; starts with the
    /// initial point, then one entry per step.
    pub iterates: Option<Vec<X>>,
}

pub type LkRun = RunResult<Vector, StepRecord>;

impl<X, R> RunResult<X, R> {
    pub fn is_stationary(&self) -> bool {
        self.reason == StopReason::StationaryCycle
    }
}

fn check_lengths(
    system: &OperatorSystem,
    data: &[Vector],
    noise: &NoiseLevels,
) -> Result<(), SolverError> {
    if data.len() != system.len() {
        return Err(SolverError::LengthMismatch {
            what: "data",
            expected: system.len(),
            got: data.len(),
        });
    }
    if noise.len() != system.len() {
        return Err(SolverError::LengthMismatch {
            what: "noise",
            expected: system.len(),
            got: noise.len(),
        });
    }
    Ok(())
}

/// Residual of equation `i` at `x`, with its norm.
fn block_residual(
    system: &OperatorSystem,
    i: usize,
    x: &Vector,
    data: &[Vector],
    step: usize,
) -> Result<(Vector, f64), SolverError> {
    let r = system.block(i).apply(x).sub(&data[i]);
    let rn = r.norm();
    if !rn.is_finite() {
        return Err(SolverError::NonFiniteResidual { step, block: i });
    }
    Ok((r, rn))
}

/// The Kaczmarz update `x - F_i'(x)*(r)`. Shared by every solver so that
/// paths which are mathematically identical are also bitwise identical.
fn block_update(system: &OperatorSystem, i: usize, x: &Vector, r: &Vector) -> Vector {
    x.sub(&system.block(i).deriv_adjoint_apply(x, r))
}

fn guard_ball(x: &Vector, center: &Vector, rho: Option<f64>, step: usize) -> Result<(), SolverError> {
    if let Some(rho) = rho {
        let dist = x.dist(center);
        if dist > rho {
            return Err(SolverError::LeftTrustBall { step, dist, rho });
        }
    }
    Ok(())
}

/// One loping Landweber-Kaczmarz step for the cyclically active equation.
///
/// When the weight is zero the adjoint is not evaluated and the returned
/// iterate is the input, bitwise. `adjoint_evals_before` seeds the cumulative
/// counter recorded for this step.
pub fn llk_step(
    system: &OperatorSystem,
    x: &Vector,
    n: usize,
    data: &[Vector],
    noise: &NoiseLevels,
    config: &SolverConfig,
    adjoint_evals_before: u64,
) -> Result<(Vector, StepRecord), SolverError> {
    let i = system.cyclic_index(n);
    let (r, rn) = block_residual(system, i, x, data, n)?;
    let threshold = config.tau * noise.delta(i);
    let omega = lop_weight(rn, config.tau, noise.delta(i));
    let next = if omega {
        block_update(system, i, x, &r)
    } else {
        x.clone()
    };
    let record = StepRecord {
        n,
        active_index: i as i64,
        omega,
        residual_norm: rn,
        threshold,
        adjoint_evals_cum: adjoint_evals_before + omega as u64,
        error_to_ref: config.record_error_to.as_ref().map(|xr| next.dist(xr)),
    };
    Ok((next, record))
}

/// Runs the loping Landweber-Kaczmarz method until the first cycle whose
/// weights are all zero (stationary termination) or the cycle budget is hit.
///
/// On stationary termination the index is the first step of that cycle — an
/// integer multiple of N — and every residual satisfies
/// `|F_i(x) - y_i| <= tau * delta_i` exactly.
pub fn run_llk(
    system: &OperatorSystem,
    x0: &Vector,
    data: &[Vector],
    noise: &NoiseLevels,
    config: &SolverConfig,
) -> Result<LkRun, SolverError> {
    check_lengths(system, data, noise)?;
    let n_eq = system.len();
    let mut x = x0.clone();
    let mut trace = Vec::new();
    let mut iterates = config.keep_iterates.then(|| vec![x.clone()]);
    let mut evals = 0u64;
    for cycle in 0..config.max_cycles {
        let mut all_loped = true;
        for j in 0..n_eq {
            let step = cycle * n_eq + j;
            let (next, record) = llk_step(system, &x, step, data, noise, config, evals)?;
            evals = record.adjoint_evals_cum;
            all_loped &= !record.omega;
            guard_ball(&next, x0, config.rho, step)?;
            x = next;
            if let Some(kept) = iterates.as_mut() {
                kept.push(x.clone());
            }
            trace.push(record);
        }
        if all_loped {
            return Ok(RunResult {
                final_iterate: x,
                termination_index: cycle * n_eq,
                reason: StopReason::StationaryCycle,
                trace,
                iterates,
            });
        }
    }
    Ok(RunResult {
        final_iterate: x,
        termination_index: config.max_cycles * n_eq,
        reason: StopReason::MaxCycles,
        trace,
        iterates,
    })
}

enum ClassicalMode {
    /// Stop at the first step whose active residual meets its threshold.
    Discrepancy,
    /// Run exactly this many cycles, ignoring the discrepancy stop. Used as
    /// the cost baseline when measuring loping savings.
    FixedCycles(usize),
}

fn classical_engine(
    system: &OperatorSystem,
    x0: &Vector,
    data: &[Vector],
    noise: &NoiseLevels,
    config: &SolverConfig,
    mode: ClassicalMode,
) -> Result<LkRun, SolverError> {
    check_lengths(system, data, noise)?;
    let n_eq = system.len();
    let cycles = match mode {
        ClassicalMode::Discrepancy => config.max_cycles,
        ClassicalMode::FixedCycles(c) => c,
    };
    let mut x = x0.clone();
    let mut trace = Vec::new();
    let mut iterates = config.keep_iterates.then(|| vec![x.clone()]);
    let mut evals = 0u64;
    for step in 0..cycles * n_eq {
        let i = system.cyclic_index(step);
        let (r, rn) = block_residual(system, i, &x, data, step)?;
        let threshold = config.tau * noise.delta(i);
        let discrepancy_met = rn <= threshold;
        if discrepancy_met && matches!(mode, ClassicalMode::Discrepancy) {
            trace.push(StepRecord {
                n: step,
                active_index: i as i64,
                omega: false,
                residual_norm: rn,
                threshold,
                adjoint_evals_cum: evals,
                error_to_ref: config.record_error_to.as_ref().map(|xr| x.dist(xr)),
            });
            return Ok(RunResult {
                final_iterate: x,
                termination_index: step,
                reason: StopReason::Discrepancy,
                trace,
                iterates,
            });
        }
        let next = block_update(system, i, &x, &r);
        evals += 1;
        guard_ball(&next, x0, config.rho, step)?;
        x = next;
        if let Some(kept) = iterates.as_mut() {
            kept.push(x.clone());
        }
        trace.push(StepRecord {
            n: step,
            active_index: i as i64,
            omega: true,
            residual_norm: rn,
            threshold,
            adjoint_evals_cum: evals,
            error_to_ref: config.record_error_to.as_ref().map(|xr| x.dist(xr)),
        });
    }
    Ok(RunResult {
        final_iterate: x,
        termination_index: cycles * n_eq,
        reason: StopReason::MaxCycles,
        trace,
        iterates,
    })
}

/// Classical Landweber-Kaczmarz iteration with unit weights, stopped at the
/// smallest step whose active residual satisfies the discrepancy bound.
pub fn run_classical_lk(
    system: &OperatorSystem,
    x0: &Vector,
    data: &[Vector],
    noise: &NoiseLevels,
    config: &SolverConfig,
) -> Result<LkRun, SolverError> {
    classical_engine(system, x0, data, noise, config, ClassicalMode::Discrepancy)
}

/// Classical Landweber-Kaczmarz run for a fixed number of cycles with the
/// discrepancy stop disabled: the per-cycle cost baseline for loping-savings
/// comparisons. Records past the would-be stopping index keep `omega = 1`
/// because the update is performed regardless of the residual size.
pub fn run_classical_lk_for_cycles(
    system: &OperatorSystem,
    x0: &Vector,
    data: &[Vector],
    noise: &NoiseLevels,
    config: &SolverConfig,
    cycles: usize,
) -> Result<LkRun, SolverError> {
    classical_engine(
        system,
        x0,
        data,
        noise,
        config,
        ClassicalMode::FixedCycles(cycles),
    )
}

/// Landweber iteration on the stacked single equation
/// `1/sqrt(N) (F_0, ..., F_{N-1})(x) = 1/sqrt(N) (y_0, ..., y_{N-1})`,
/// stopped by the discrepancy principle at the stacked noise level.
pub fn run_landweber(
    system: &OperatorSystem,
    x0: &Vector,
    data: &[Vector],
    noise: &NoiseLevels,
    config: &SolverConfig,
) -> Result<LkRun, SolverError> {
    check_lengths(system, data, noise)?;
    let n_eq = system.len();
    let inv_n = 1.0 / n_eq as f64;
    let threshold = config.tau * noise.stacked_level();
    let mut x = x0.clone();
    let mut trace = Vec::new();
    let mut iterates = config.keep_iterates.then(|| vec![x.clone()]);
    let mut evals = 0u64;
    for step in 0..config.max_cycles {
        let mut residuals = Vec::with_capacity(n_eq);
        let mut sq = 0.0;
        for i in 0..n_eq {
            let (r, rn) = block_residual(system, i, &x, data, step)?;
            sq += rn * rn;
            residuals.push(r);
        }
        let stacked_norm = (sq * inv_n).sqrt();
        if stacked_norm <= threshold {
            trace.push(StepRecord {
                n: step,
                active_index: -1,
                omega: false,
                residual_norm: stacked_norm,
                threshold,
                adjoint_evals_cum: evals,
                error_to_ref: config.record_error_to.as_ref().map(|xr| x.dist(xr)),
            });
            return Ok(RunResult {
                final_iterate: x,
                termination_index: step,
                reason: StopReason::Discrepancy,
                trace,
                iterates,
            });
        }
        let mut update = Vector::zeros(system.dim_x());
        for (i, r) in residuals.iter().enumerate() {
            update = update.add(&system.block(i).deriv_adjoint_apply(&x, r));
            evals += 1;
        }
        let next = x.sub(&update.scale(inv_n));
        guard_ball(&next, x0, config.rho, step)?;
        x = next;
        if let Some(kept) = iterates.as_mut() {
            kept.push(x.clone());
        }
        trace.push(StepRecord {
            n: step,
            active_index: -1,
            omega: true,
            residual_norm: stacked_norm,
            threshold,
            adjoint_evals_cum: evals,
            error_to_ref: config.record_error_to.as_ref().map(|xr| x.dist(xr)),
        });
    }
    Ok(RunResult {
        final_iterate: x,
        termination_index: config.max_cycles,
        reason: StopReason::MaxCycles,
        trace,
        iterates,
    })
}

/// Both sides of the per-step error-decay estimate: for any solution `x_ref`
/// of the exact system,
/// `|x_{n+1} - x_ref|^2 - |x_n - x_ref|^2
///  <= omega r (2 (1+eta) delta_i - (1-2 eta) r)`.
///
/// Returns `(lhs, rhs)`; conforming runs satisfy `lhs <= rhs` up to roundoff.
pub fn monotonicity_gap(
    x_n: &Vector,
    x_next: &Vector,
    x_ref: &Vector,
    record: &StepRecord,
    eta: f64,
    delta_i: f64,
) -> (f64, f64) {
    let lhs = x_next.dist_sq(x_ref) - x_n.dist_sq(x_ref);
    let r = record.residual_norm;
    let omega = record.omega as u8 as f64;
    let rhs = omega * r * (2.0 * (1.0 + eta) * delta_i - (1.0 - 2.0 * eta) * r);
    (lhs, rhs)
}

/// Three-term chain certifying finite stopping of a stationary run.
#[derive(Debug, Clone, Copy)]
pub struct FiniteStopBound {
    /// `n_star (tau min_i delta_i)^2 / N`
    pub lhs: f64,
    /// `sum_{n < n_star} omega_n r_n^2`
    pub weighted_residual_sum: f64,
    /// `tau |x_ref - x0|^2 / ((1-2 eta) tau - 2 (1+eta))`
    pub rhs: f64,
}

impl FiniteStopBound {
    pub fn chain_holds(&self) -> bool {
        self.lhs <= self.weighted_residual_sum && self.weighted_residual_sum <= self.rhs
    }
}

/// Evaluates the finite-stopping estimate for a stationary run against a
/// known solution `x_ref` and the starting point `x0`.
///
/// Every cycle before the stationary one contains at least one active step
/// whose residual exceeds `tau min_i delta_i`, which gives the lower bound;
/// summing the per-step decay estimate telescopes the upper bound from the
/// initial error.
pub fn finite_stop_bound(
    result: &LkRun,
    noise: &NoiseLevels,
    x0: &Vector,
    x_ref: &Vector,
    eta: f64,
    tau: f64,
) -> Result<FiniteStopBound, SolverError> {
    if !result.is_stationary() {
        return Err(SolverError::NotStationary {
            reason: result.reason,
        });
    }
    let min_delta = noise.min();
    if min_delta <= 0.0 {
        return Err(SolverError::VacuousBound);
    }
    let denominator = (1.0 - 2.0 * eta) * tau - 2.0 * (1.0 + eta);
    if denominator <= 0.0 {
        return Err(SolverError::DegenerateDenominator(denominator));
    }
    let n_star = result.termination_index;
    let lhs = n_star as f64 * (tau * min_delta).powi(2) / noise.len() as f64;
    let weighted_residual_sum = result
        .trace
        .iter()
        .take(n_star)
        .map(|rec| rec.omega as u8 as f64 * rec.residual_norm * rec.residual_norm)
        .sum();
    let rhs = tau * x_ref.dist_sq(x0) / denominator;
    Ok(FiniteStopBound {
        lhs,
        weighted_residual_sum,
        rhs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operator::{DenseLinearBlock, OperatorBlock};
    use std::sync::Arc;

    fn row_system(rows: &[&[f64]]) -> OperatorSystem {
        let cols = rows[0].len();
        let blocks = rows
            .iter()
            .map(|r| {
                Arc::new(DenseLinearBlock::new(1, cols, r.to_vec())) as Arc<dyn OperatorBlock>
            })
            .collect();
        OperatorSystem::new(blocks).unwrap()
    }

    fn scalar_identity_system() -> OperatorSystem {
        row_system(&[&[1.0]])
    }

    #[test]
    fn lop_weight_is_strict() {
        assert!(lop_weight(0.5, 3.0, 0.1));
        assert!(!lop_weight(0.3, 3.0, 0.1), "boundary must lope");
        assert!(lop_weight(1e-12, 3.0, 0.0));
        assert!(!lop_weight(0.0, 3.0, 0.0));
    }

    #[test]
    fn check_tau_values() {
        assert_eq!(check_tau(0.0).unwrap(), 2.0);
        assert_eq!(check_tau(0.25).unwrap(), 5.0);
        assert!(matches!(check_tau(0.5), Err(ConfigError::EtaOutOfRange(_))));
        assert!(matches!(check_tau(-0.1), Err(ConfigError::EtaOutOfRange(_))));
    }

    #[test]
    fn config_rejects_tau_at_the_infimum() {
        assert!(SolverConfig::new(2.0, 0.0).is_err());
        assert!(SolverConfig::new(2.0 + 1e-12, 0.0).is_ok());
        assert!(SolverConfig::new(5.0, 0.25).is_err());
        assert!(SolverConfig::new(5.1, 0.25).is_ok());
    }

    #[test]
    fn loped_step_returns_input_bitwise() {
        let system = scalar_identity_system();
        let x = Vector::new(vec![0.25]);
        let data = [Vector::new(vec![0.25 - 0.2])];
        let noise = NoiseLevels::uniform(1, 0.1).unwrap();
        let config = SolverConfig::new(3.0, 0.0).unwrap();
        // residual 0.2 <= 3 * 0.1, so the step lopes.
        let (next, rec) = llk_step(&system, &x, 0, &data, &noise, &config, 7).unwrap();
        assert!(!rec.omega);
        assert_eq!(next, x);
        assert_eq!(rec.adjoint_evals_cum, 7);
        assert_eq!(rec.threshold, 3.0 * 0.1);
    }

    #[test]
    fn scalar_active_step_matches_hand_value() {
        // F(x) = x, y = 0, x = 1, delta = 0.1, tau = 3: residual 1 > 0.3,
        // update x - 1*(1-0) = 0.
        let system = scalar_identity_system();
        let x = Vector::new(vec![1.0]);
        let data = [Vector::new(vec![0.0])];
        let noise = NoiseLevels::uniform(1, 0.1).unwrap();
        let config = SolverConfig::new(3.0, 0.0).unwrap();
        let (next, rec) = llk_step(&system, &x, 0, &data, &noise, &config, 0).unwrap();
        assert!(rec.omega);
        assert_eq!(rec.residual_norm, 1.0);
        assert_eq!(next.coords(), &[0.0]);
        assert_eq!(rec.adjoint_evals_cum, 1);
    }

    #[test]
    fn identity_two_block_toy_converges_in_one_cycle() {
        // Identity rows split into two equations, exact data zero: from
        // (1, 1) one cycle reaches the solution, the next cycle is
        // stationary.
        let system = row_system(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let data = [Vector::new(vec![0.0]), Vector::new(vec![0.0])];
        let noise = NoiseLevels::zero(2);
        let config = SolverConfig::new(3.0, 0.0).unwrap();
        let run = run_llk(&system, &Vector::new(vec![1.0, 1.0]), &data, &noise, &config).unwrap();
        assert_eq!(run.final_iterate.coords(), &[0.0, 0.0]);
        assert_eq!(run.reason, StopReason::StationaryCycle);
        assert_eq!(run.termination_index, 2);
        assert_eq!(run.termination_index % system.len(), 0);
    }

    #[test]
    fn start_at_solution_terminates_at_cycle_zero() {
        let system = row_system(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let xdag = Vector::new(vec![0.5, -0.25]);
        let data = [Vector::new(vec![0.5]), Vector::new(vec![-0.25])];
        let noise = NoiseLevels::zero(2);
        let config = SolverConfig::new(3.0, 0.0).unwrap();
        let run = run_llk(&system, &xdag, &data, &noise, &config).unwrap();
        assert_eq!(run.reason, StopReason::StationaryCycle);
        assert_eq!(run.termination_index, 0);
        assert!(run.trace.iter().all(|r| r.residual_norm == 0.0 && !r.omega));
    }

    #[test]
    fn classical_stops_immediately_when_first_residual_is_small() {
        let system = scalar_identity_system();
        let data = [Vector::new(vec![1.0])];
        let noise = NoiseLevels::uniform(1, 0.5).unwrap();
        let config = SolverConfig::new(3.0, 0.0).unwrap();
        // residual |0.9 - 1.0| = 0.1 <= 1.5
        let run =
            run_classical_lk(&system, &Vector::new(vec![0.9]), &data, &noise, &config).unwrap();
        assert_eq!(run.reason, StopReason::Discrepancy);
        assert_eq!(run.termination_index, 0);
        assert_eq!(run.final_iterate.coords(), &[0.9]);
    }

    #[test]
    fn landweber_on_single_block_matches_classical() {
        let system = row_system(&[&[0.8, 0.1]]);
        let data = [Vector::new(vec![0.3])];
        let noise = NoiseLevels::uniform(1, 1e-3).unwrap();
        let config = SolverConfig::new(3.0, 0.0).unwrap().with_max_cycles(200);
        let lw = run_landweber(&system, &Vector::zeros(2), &data, &noise, &config).unwrap();
        let lk = run_classical_lk(&system, &Vector::zeros(2), &data, &noise, &config).unwrap();
        assert_eq!(lw.final_iterate, lk.final_iterate);
        assert_eq!(lw.termination_index, lk.termination_index);
        for (a, b) in lw.trace.iter().zip(&lk.trace) {
            assert_eq!(a.residual_norm, b.residual_norm);
            assert_eq!(a.threshold, b.threshold);
            assert_eq!(a.omega, b.omega);
        }
    }

    #[test]
    fn monotonicity_gap_is_zero_for_loped_steps() {
        let rec = StepRecord {
            n: 0,
            active_index: 0,
            omega: false,
            residual_norm: 0.2,
            threshold: 0.3,
            adjoint_evals_cum: 0,
            error_to_ref: None,
        };
        let x = Vector::new(vec![1.0, 2.0]);
        let xref = Vector::new(vec![0.0, 0.0]);
        let (lhs, rhs) = monotonicity_gap(&x, &x, &xref, &rec, 0.0, 0.1);
        assert_eq!(lhs, 0.0);
        assert_eq!(rhs, 0.0);
    }

    #[test]
    fn active_linear_step_has_negative_rhs() {
        // With eta = 0 the right side is r (2 delta - r), negative whenever
        // the weight fired under tau > 2.
        let rec = StepRecord {
            n: 0,
            active_index: 0,
            omega: true,
            residual_norm: 0.5,
            threshold: 0.3,
            adjoint_evals_cum: 1,
            error_to_ref: None,
        };
        let x = Vector::new(vec![1.0]);
        let (_, rhs) = monotonicity_gap(&x, &x, &Vector::zeros(1), &rec, 0.0, 0.1);
        assert!(rhs < 0.0);
    }

    #[test]
    fn finite_stop_bound_trivial_run() {
        let system = row_system(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let xdag = Vector::new(vec![0.2, 0.1]);
        let data = [Vector::new(vec![0.2]), Vector::new(vec![0.1])];
        let noise = NoiseLevels::uniform(2, 0.05).unwrap();
        let config = SolverConfig::new(3.0, 0.0).unwrap();
        let run = run_llk(&system, &xdag, &data, &noise, &config).unwrap();
        assert_eq!(run.termination_index, 0);
        let bound = finite_stop_bound(&run, &noise, &xdag, &xdag, 0.0, 3.0).unwrap();
        assert_eq!(bound.lhs, 0.0);
        assert!(bound.chain_holds());
    }

    #[test]
    fn finite_stop_bound_denominator_value() {
        // eta = 0, tau = 3 gives (1-0)*3 - 2*(1+0) = 1, so rhs = 3 |x_ref - x0|^2.
        let system = scalar_identity_system();
        let data = [Vector::new(vec![0.0])];
        let noise = NoiseLevels::uniform(1, 0.4).unwrap();
        let config = SolverConfig::new(3.0, 0.0).unwrap();
        let run = run_llk(&system, &Vector::new(vec![1.0]), &data, &noise, &config).unwrap();
        let x0 = Vector::new(vec![1.0]);
        let xref = Vector::new(vec![0.0]);
        let bound = finite_stop_bound(&run, &noise, &x0, &xref, 0.0, 3.0).unwrap();
        assert_eq!(bound.rhs, 3.0);
        assert!(bound.chain_holds());
    }

    #[test]
    fn finite_stop_bound_rejects_zero_noise() {
        let system = scalar_identity_system();
        let data = [Vector::new(vec![1.0])];
        let noise = NoiseLevels::zero(1);
        let config = SolverConfig::new(3.0, 0.0).unwrap();
        let run = run_llk(&system, &Vector::new(vec![1.0]), &data, &noise, &config).unwrap();
        assert!(run.is_stationary());
        assert!(matches!(
            finite_stop_bound(&run, &noise, &Vector::zeros(1), &Vector::zeros(1), 0.0, 3.0),
            Err(SolverError::VacuousBound)
        ));
    }

    #[test]
    fn trust_ball_violation_aborts() {
        // F(x) = x against data 10 from x0 = 0 jumps straight to 10, far
        // outside a radius-1 ball.
        let system = scalar_identity_system();
        let data = [Vector::new(vec![10.0])];
        let noise = NoiseLevels::uniform(1, 1e-3).unwrap();
        let config = SolverConfig::new(3.0, 0.0).unwrap().with_trust_radius(1.0);
        let err = run_llk(&system, &Vector::zeros(1), &data, &noise, &config).unwrap_err();
        assert!(matches!(err, SolverError::LeftTrustBall { .. }));
    }

    #[test]
    fn stacked_noise_level_scales_like_the_data() {
        let noise = NoiseLevels::new(vec![0.3, 0.4]).unwrap();
        assert!((noise.stacked_level() - (0.25f64 / 2.0).sqrt()).abs() < 1e-15);
        assert_eq!(noise.delta_max(), 0.4);
        assert_eq!(noise.min(), 0.3);
    }
}
