//! Embedded Landweber-Kaczmarz method on the product space `X^N`.
//!
//! The unknown is lifted to one copy per equation, `(x^0, ..., x^{N-1})`,
//! constrained to be a constant vector. Each cycle alternates an embedding
//! step — every component takes its own Landweber-Kaczmarz step against its
//! own equation — with a balancing step that contracts differences between
//! the components by one Landweber-Kaczmarz step for the cyclic difference
//! equation `lambda D x = 0`. Both steps carry loping weights and the run
//! stops once both weights vanish in the same cycle.

use thiserror::Error;

use crate::operator::{OperatorBlock, OperatorSystem};
use crate::solver::{lop_weight, NoiseLevels, RunResult, SolverError, StopReason};
use crate::vector::Vector;

/// Element of `X^N`: one component per equation, cyclically indexed.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedVector {
    components: Vec<Vector>,
}

impl StackedVector {
    pub fn new(components: Vec<Vector>) -> Self {
        assert!(!components.is_empty(), "need at least one component");
        let dim = components[0].dim();
        assert!(
            components.iter().all(|c| c.dim() == dim),
            "components must share one dimension"
        );
        Self { components }
    }

    /// The constant vector `(x, ..., x)` with `n` copies.
    pub fn constant(x: &Vector, n: usize) -> Self {
        Self::new(vec![x.clone(); n])
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim_x(&self) -> usize {
        self.components[0].dim()
    }

    pub fn component(&self, i: usize) -> &Vector {
        &self.components[i]
    }

    pub fn components(&self) -> &[Vector] {
        &self.components
    }

    /// Component with cyclic index arithmetic (`x^N = x^0`).
    pub fn cyclic(&self, i: isize) -> &Vector {
        let n = self.components.len() as isize;
        &self.components[(i.rem_euclid(n)) as usize]
    }

    pub fn sub(&self, other: &Self) -> Self {
        assert_eq!(self.len(), other.len());
        Self::new(
            self.components
                .iter()
                .zip(&other.components)
                .map(|(a, b)| a.sub(b))
                .collect(),
        )
    }

    pub fn scale(&self, factor: f64) -> Self {
        Self::new(self.components.iter().map(|c| c.scale(factor)).collect())
    }

    pub fn dot(&self, other: &Self) -> f64 {
        assert_eq!(self.len(), other.len());
        self.components
            .iter()
            .zip(&other.components)
            .map(|(a, b)| a.dot(b))
            .sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.components.iter().map(Vector::norm_sq).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn dist(&self, other: &Self) -> f64 {
        self.sub(other).norm()
    }

    /// Flattens to a single vector of dimension `N * dim_x`.
    pub fn flatten(&self) -> Vector {
        let mut out = Vec::with_capacity(self.len() * self.dim_x());
        for c in &self.components {
            out.extend_from_slice(c.coords());
        }
        Vector::new(out)
    }

    /// Splits a flat vector back into `n` components.
    pub fn unflatten(v: &Vector, n: usize) -> Self {
        assert_eq!(v.dim() % n, 0, "flat dimension must divide into n parts");
        let dim = v.dim() / n;
        Self::new(
            (0..n)
                .map(|i| Vector::new(v.coords()[i * dim..(i + 1) * dim].to_vec()))
                .collect(),
        )
    }
}

/// Cyclic forward difference: component `i` of the result is `x^{i+1} - x^i`.
pub fn d_apply(x: &StackedVector) -> StackedVector {
    let n = x.len();
    StackedVector::new(
        (0..n)
            .map(|i| x.component((i + 1) % n).sub(x.component(i)))
            .collect(),
    )
}

/// Exact adjoint of [`d_apply`] under the stacked inner product: component
/// `i` is `w^{i-1} - w^i` (cyclic).
pub fn d_adjoint(w: &StackedVector) -> StackedVector {
    let n = w.len();
    StackedVector::new(
        (0..n)
            .map(|i| w.component((i + n - 1) % n).sub(w.component(i)))
            .collect(),
    )
}

/// Balancing operator `G = lambda^2 D* D`: component `i` is
/// `lambda^2 (2 x^i - x^{i-1} - x^{i+1})`, the circulant second difference.
/// Constant stacked vectors are annihilated exactly.
pub fn g_apply(x: &StackedVector, lambda: f64) -> StackedVector {
    let n = x.len();
    let lambda_sq = lambda * lambda;
    StackedVector::new(
        (0..n)
            .map(|i| {
                let prev = x.component((i + n - 1) % n);
                let next = x.component((i + 1) % n);
                let cur = x.component(i);
                Vector::new(
                    cur.coords()
                        .iter()
                        .zip(prev.coords())
                        .zip(next.coords())
                        .map(|((&c, &p), &q)| lambda_sq * (2.0 * c - p - q))
                        .collect(),
                )
            })
            .collect(),
    )
}

/// Largest admissible scaling for the difference equation: `1 / |D|` with
/// `|D| = max_k 2 |sin(pi k / N)|`. Always at least 1/2; for `n < 2` the
/// difference operator is zero and the sentinel 1 is returned (balancing is
/// a no-op in that case).
pub fn choose_lambda(n: usize) -> f64 {
    if n < 2 {
        return 1.0;
    }
    let mut norm_d: f64 = 0.0;
    for k in 0..n {
        norm_d = norm_d.max(2.0 * (std::f64::consts::PI * k as f64 / n as f64).sin().abs());
    }
    1.0 / norm_d
}

/// Mean of the components; the regularized output of an embedded run.
pub fn average_components(x: &StackedVector) -> Vector {
    let mut sum = Vector::zeros(x.dim_x());
    for c in x.components() {
        sum = sum.add(c);
    }
    sum.scale(1.0 / x.len() as f64)
}

/// Largest distance of any component from the component mean.
pub fn component_spread(x: &StackedVector) -> f64 {
    let mean = average_components(x);
    x.components()
        .iter()
        .map(|c| c.dist(&mean))
        .fold(0.0, f64::max)
}

/// The cyclic difference operator `D` on the flattened product space, exposed
/// as an operator block so the generic verification tools apply to it.
pub struct DifferenceBlock {
    n_components: usize,
    component_dim: usize,
}

impl DifferenceBlock {
    pub fn new(n_components: usize, component_dim: usize) -> Self {
        assert!(n_components >= 1 && component_dim >= 1);
        Self {
            n_components,
            component_dim,
        }
    }
}

impl OperatorBlock for DifferenceBlock {
    fn dim_x(&self) -> usize {
        self.n_components * self.component_dim
    }

    fn dim_y(&self) -> usize {
        self.n_components * self.component_dim
    }

    fn apply(&self, x: &Vector) -> Vector {
        d_apply(&StackedVector::unflatten(x, self.n_components)).flatten()
    }

    fn deriv_apply(&self, _x: &Vector, h: &Vector) -> Vector {
        self.apply(h)
    }

    fn deriv_adjoint_apply(&self, _x: &Vector, w: &Vector) -> Vector {
        d_adjoint(&StackedVector::unflatten(w, self.n_components)).flatten()
    }
}

#[derive(Debug, Error)]
pub enum EmbeddedConfigError {
    #[error("tau must exceed 2, got {0}")]
    TauTooSmall(f64),
    #[error("epsilon scale must be positive and finite, got {0}")]
    BadEpsilonScale(f64),
    #[error("lambda = {lambda} violates |lambda D| <= 1 (|D| = {norm_d})")]
    LambdaTooLarge { lambda: f64, norm_d: f64 },
}

/// Artificial noise level for the balancing equation, as a function of the
/// data noise. Strictly increasing with `epsilon(0) = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Epsilon {
    /// `epsilon(delta) = delta`, the natural choice.
    Identity,
    /// `epsilon(delta) = c * delta` for a positive constant.
    Scaled(f64),
}

impl Epsilon {
    pub fn value(&self, delta: f64) -> f64 {
        match self {
            Epsilon::Identity => delta,
            Epsilon::Scaled(c) => c * delta,
        }
    }
}

/// How the balancing scale `lambda` is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaChoice {
    /// `1 / |D|` from [`choose_lambda`]; the fastest conforming value.
    Exact,
    /// The safe fallback 1/2, admissible for every N.
    Half,
    /// A caller-supplied value, validated against `|lambda D| <= 1`.
    Fixed(f64),
}

impl LambdaChoice {
    pub fn resolve(&self, n: usize) -> f64 {
        match self {
            LambdaChoice::Exact => choose_lambda(n),
            LambdaChoice::Half => 0.5,
            LambdaChoice::Fixed(v) => *v,
        }
    }
}

/// Which statistic drives the balancing loping weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BalanceStatistic {
    /// `|G x|` compared against `tau epsilon(delta)`: the literal rule.
    GradientNorm,
    /// `|lambda D x|`, the residual of the difference equation itself.
    KaczmarzResidual,
}

/// Configuration of the embedded solver.
#[derive(Debug, Clone)]
pub struct EmbeddedConfig {
    pub tau: f64,
    pub lambda: LambdaChoice,
    pub epsilon: Epsilon,
    pub max_cycles: usize,
    pub balance_statistic: BalanceStatistic,
    /// Trust radius around the starting point, enforced per component.
    pub rho: Option<f64>,
    /// Reference solution; per-step error is recorded for the component mean.
    pub record_error_to: Option<Vector>,
}

impl EmbeddedConfig {
    pub fn new(tau: f64) -> Result<Self, EmbeddedConfigError> {
        if !(tau > 2.0) {
            return Err(EmbeddedConfigError::TauTooSmall(tau));
        }
        Ok(Self {
            tau,
            lambda: LambdaChoice::Exact,
            epsilon: Epsilon::Identity,
            max_cycles: 10_000,
            balance_statistic: BalanceStatistic::GradientNorm,
            rho: None,
            record_error_to: None,
        })
    }

    pub fn with_lambda(mut self, lambda: LambdaChoice) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn with_epsilon(mut self, epsilon: Epsilon) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn with_max_cycles(mut self, max_cycles: usize) -> Self {
        self.max_cycles = max_cycles;
        self
    }

    pub fn with_balance_statistic(mut self, statistic: BalanceStatistic) -> Self {
        self.balance_statistic = statistic;
        self
    }

    pub fn with_trust_radius(mut self, rho: f64) -> Self {
        self.rho = Some(rho);
        self
    }

    pub fn with_reference(mut self, reference: Vector) -> Self {
        self.record_error_to = Some(reference);
        self
    }

    fn validate_lambda(&self, n: usize) -> Result<f64, EmbeddedConfigError> {
        if let Epsilon::Scaled(c) = self.epsilon {
            if !(c > 0.0 && c.is_finite()) {
                return Err(EmbeddedConfigError::BadEpsilonScale(c));
            }
        }
        let lambda = self.lambda.resolve(n);
        if n >= 2 {
            let mut norm_d: f64 = 0.0;
            for k in 0..n {
                norm_d =
                    norm_d.max(2.0 * (std::f64::consts::PI * k as f64 / n as f64).sin().abs());
            }
            if lambda * norm_d > 1.0 + 1e-8 {
                return Err(EmbeddedConfigError::LambdaTooLarge { lambda, norm_d });
            }
        }
        Ok(lambda)
    }
}

/// Half-step phase of the embedded iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElkPhase {
    Embedding,
    Balancing,
}

/// Record of one half-step of an embedded run.
#[derive(Debug, Clone)]
pub struct ElkStepRecord {
    pub n: usize,
    pub phase: ElkPhase,
    pub omega: bool,
    /// The loping statistic: the stacked residual norm for embedding steps,
    /// the configured balancing statistic otherwise.
    pub statistic: f64,
    pub threshold: f64,
    pub adjoint_evals_cum: u64,
    /// Distance of the post-step component mean to the reference.
    pub error_to_ref: Option<f64>,
    /// Post-step component spread around the mean.
    pub component_spread: f64,
}

pub type ElkRun = RunResult<StackedVector, ElkStepRecord>;

fn stacked_residuals(
    system: &OperatorSystem,
    x: &StackedVector,
    data: &[Vector],
    step: usize,
) -> Result<(Vec<Vector>, f64), SolverError> {
    let mut parts = Vec::with_capacity(system.len());
    let mut sq = 0.0;
    for i in 0..system.len() {
        let r = system.block(i).apply(x.component(i)).sub(&data[i]);
        let rn = r.norm();
        if !rn.is_finite() {
            return Err(SolverError::NonFiniteResidual { step, block: i });
        }
        sq += rn * rn;
        parts.push(r);
    }
    Ok((parts, sq.sqrt()))
}

fn record_for(
    config: &EmbeddedConfig,
    x: &StackedVector,
    n: usize,
    phase: ElkPhase,
    omega: bool,
    statistic: f64,
    threshold: f64,
    adjoint_evals_cum: u64,
) -> ElkStepRecord {
    ElkStepRecord {
        n,
        phase,
        omega,
        statistic,
        threshold,
        adjoint_evals_cum,
        error_to_ref: config
            .record_error_to
            .as_ref()
            .map(|xr| average_components(x).dist(xr)),
        component_spread: component_spread(x),
    }
}

/// Embedding half-step: every component takes one Landweber-Kaczmarz step
/// against its own equation, gated by a single loping weight on the stacked
/// residual against `tau * delta_max`.
pub fn embedding_step(
    system: &OperatorSystem,
    x: &StackedVector,
    data: &[Vector],
    noise: &NoiseLevels,
    config: &EmbeddedConfig,
    n: usize,
    adjoint_evals_before: u64,
) -> Result<(StackedVector, ElkStepRecord), SolverError> {
    let (residuals, stacked_norm) = stacked_residuals(system, x, data, n)?;
    let delta = noise.delta_max();
    let omega = lop_weight(stacked_norm, config.tau, delta);
    let (next, evals) = if omega {
        let components = x
            .components()
            .iter()
            .enumerate()
            .map(|(i, xi)| xi.sub(&system.block(i).deriv_adjoint_apply(xi, &residuals[i])))
            .collect();
        (
            StackedVector::new(components),
            adjoint_evals_before + system.len() as u64,
        )
    } else {
        (x.clone(), adjoint_evals_before)
    };
    let record = record_for(
        config,
        &next,
        n,
        ElkPhase::Embedding,
        omega,
        stacked_norm,
        config.tau * delta,
        evals,
    );
    Ok((next, record))
}

/// Balancing half-step: one Landweber-Kaczmarz step for `lambda D x = 0`,
/// i.e. multiplication by `I - G`, gated by the configured statistic against
/// `tau * epsilon(delta_max)`.
pub fn balancing_step(
    x: &StackedVector,
    noise: &NoiseLevels,
    config: &EmbeddedConfig,
    n: usize,
    adjoint_evals_before: u64,
) -> Result<(StackedVector, ElkStepRecord), SolverError> {
    let lambda = config.lambda.resolve(x.len());
    let g = g_apply(x, lambda);
    let statistic = match config.balance_statistic {
        BalanceStatistic::GradientNorm => g.norm(),
        BalanceStatistic::KaczmarzResidual => lambda * d_apply(x).norm(),
    };
    let epsilon = config.epsilon.value(noise.delta_max());
    let omega = lop_weight(statistic, config.tau, epsilon);
    let next = if omega { x.sub(&g) } else { x.clone() };
    let record = record_for(
        config,
        &next,
        n,
        ElkPhase::Balancing,
        omega,
        statistic,
        config.tau * epsilon,
        adjoint_evals_before,
    );
    Ok((next, record))
}

#[derive(Debug, Error)]
pub enum ElkError {
    #[error(transparent)]
    Config(#[from] EmbeddedConfigError),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// Runs the embedded Landweber-Kaczmarz method from the constant stacked
/// start `(x0, ..., x0)`.
///
/// Stops with a stationary result at the first cycle in which both loping
/// weights are zero; then the stacked residual satisfies
/// `|F(x) - y| <= tau delta` and the balancing statistic is at most
/// `tau epsilon(delta)`, both exactly.
pub fn run_elk(
    system: &OperatorSystem,
    x0: &Vector,
    data: &[Vector],
    noise: &NoiseLevels,
    config: &EmbeddedConfig,
) -> Result<ElkRun, ElkError> {
    if data.len() != system.len() {
        return Err(ElkError::Solver(SolverError::LengthMismatch {
            what: "data",
            expected: system.len(),
            got: data.len(),
        }));
    }
    if noise.len() != system.len() {
        return Err(ElkError::Solver(SolverError::LengthMismatch {
            what: "noise",
            expected: system.len(),
            got: noise.len(),
        }));
    }
    config.validate_lambda(system.len())?;
    let mut x = StackedVector::constant(x0, system.len());
    let mut trace = Vec::new();
    let mut evals = 0u64;
    for n in 0..config.max_cycles {
        let (after_embed, embed_rec) =
            embedding_step(system, &x, data, noise, config, n, evals)?;
        evals = embed_rec.adjoint_evals_cum;
        guard_components(&after_embed, x0, config.rho, n)?;
        let embed_active = embed_rec.omega;
        trace.push(embed_rec);

        let (after_balance, balance_rec) =
            balancing_step(&after_embed, noise, config, n, evals)?;
        guard_components(&after_balance, x0, config.rho, n)?;
        let balance_active = balance_rec.omega;
        trace.push(balance_rec);
        x = after_balance;

        if !embed_active && !balance_active {
            return Ok(RunResult {
                final_iterate: x,
                termination_index: n,
                reason: StopReason::StationaryCycle,
                trace,
                iterates: None,
            });
        }
    }
    Ok(RunResult {
        final_iterate: x,
        termination_index: config.max_cycles,
        reason: StopReason::MaxCycles,
        trace,
        iterates: None,
    })
}

fn guard_components(
    x: &StackedVector,
    center: &Vector,
    rho: Option<f64>,
    step: usize,
) -> Result<(), SolverError> {
    if let Some(rho) = rho {
        for c in x.components() {
            let dist = c.dist(center);
            if dist > rho {
                return Err(SolverError::LeftTrustBall { step, dist, rho });
            }
        }
    }
    Ok(())
}

/// One Landweber step computed as the mean of the N independent single-block
/// steps; agrees with one step of [`crate::solver::run_landweber`] to
/// floating-point accuracy.
pub fn landweber_via_averaging(
    system: &OperatorSystem,
    x: &Vector,
    data: &[Vector],
) -> Result<Vector, SolverError> {
    if data.len() != system.len() {
        return Err(SolverError::LengthMismatch {
            what: "data",
            expected: system.len(),
            got: data.len(),
        });
    }
    let mut sum = Vector::zeros(x.dim());
    for i in 0..system.len() {
        let r = system.block(i).apply(x).sub(&data[i]);
        if !r.is_finite() {
            return Err(SolverError::NonFiniteResidual { step: 0, block: i });
        }
        sum = sum.add(&x.sub(&system.block(i).deriv_adjoint_apply(x, &r)));
    }
    Ok(sum.scale(1.0 / system.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operator::{verify_adjoint, DenseLinearBlock, OperatorBlock};
    use std::sync::Arc;

    fn scalar_stack(values: &[f64]) -> StackedVector {
        StackedVector::new(values.iter().map(|&v| Vector::new(vec![v])).collect())
    }

    #[test]
    fn d_apply_annihilates_constants() {
        let x = StackedVector::constant(&Vector::new(vec![1.5, -2.0]), 4);
        assert_eq!(d_apply(&x).norm(), 0.0);
    }

    #[test]
    fn d_apply_two_scalar_components() {
        let x = scalar_stack(&[2.0, 5.0]);
        let d = d_apply(&x);
        assert_eq!(d.component(0).coords(), &[3.0]);
        assert_eq!(d.component(1).coords(), &[-3.0]);
        // Norm identity with the component differences.
        let direct: f64 = (0..2)
            .map(|i| x.cyclic(i as isize + 1).sub(x.component(i)).norm_sq())
            .sum();
        assert_eq!(d.norm_sq(), direct);
    }

    #[test]
    fn d_adjoint_matches_transposed_difference_matrix() {
        // Oracle: enumerate the 3x3 scalar matrix of D and transpose it.
        let d_matrix = [[-1.0, 1.0, 0.0], [0.0, -1.0, 1.0], [1.0, 0.0, -1.0]];
        let w = [1.0, 0.0, 0.0];
        let mut expected = [0.0; 3];
        for (i, row) in d_matrix.iter().enumerate() {
            for (j, a) in row.iter().enumerate() {
                expected[j] += a * w[i];
            }
        }
        assert_eq!(expected, [-1.0, 1.0, 0.0]);
        let out = d_adjoint(&scalar_stack(&w));
        let got: Vec<f64> = out.components().iter().map(|c| c[0]).collect();
        assert_eq!(got, expected);
        assert_eq!(d_adjoint(&StackedVector::constant(&Vector::new(vec![2.0]), 3)).norm(), 0.0);
    }

    #[test]
    fn difference_block_is_an_exact_adjoint_pair() {
        let block = DifferenceBlock::new(5, 3);
        let err = verify_adjoint(&block, &Vector::zeros(15), 60, 41).unwrap();
        assert!(err <= 1e-12, "adjoint statistic {err}");
    }

    #[test]
    fn g_apply_matches_first_column_of_the_circulant() {
        let x = scalar_stack(&[1.0, 0.0, 0.0]);
        let g = g_apply(&x, 0.5);
        let got: Vec<f64> = g.components().iter().map(|c| c[0]).collect();
        assert_eq!(got, vec![0.5, -0.25, -0.25]);
    }

    #[test]
    fn g_apply_annihilates_constants_exactly() {
        let x = StackedVector::constant(&Vector::new(vec![0.3, -1.7, 2.2]), 6);
        assert_eq!(g_apply(&x, choose_lambda(6)).norm(), 0.0);
    }

    #[test]
    fn g_quadratic_form_matches_difference_energy() {
        let x = StackedVector::new(vec![
            Vector::new(vec![0.4, -1.0]),
            Vector::new(vec![2.0, 0.3]),
            Vector::new(vec![-0.7, 1.1]),
        ]);
        let lambda = choose_lambda(3);
        let lhs = g_apply(&x, lambda).dot(&x);
        let rhs = lambda * lambda * d_apply(&x).norm_sq();
        assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs().max(1.0));
    }

    #[test]
    fn choose_lambda_small_cases() {
        assert_eq!(choose_lambda(2), 0.5);
        let expected = 1.0 / 3.0f64.sqrt();
        assert!((choose_lambda(3) - expected).abs() < 1e-15);
        assert_eq!(choose_lambda(1), 1.0);
        for n in 2..=16 {
            assert!(choose_lambda(n) >= 0.5 - 1e-15);
        }
    }

    #[test]
    fn choose_lambda_matches_brute_force_singular_values() {
        // Dense D for N in {2, 3, 5} on scalar components via basis vectors;
        // largest singular value from nalgebra as the oracle.
        for n in [2usize, 3, 5] {
            let mut dense = nalgebra::DMatrix::<f64>::zeros(n, n);
            for j in 0..n {
                let mut e = vec![0.0; n];
                e[j] = 1.0;
                let col = d_apply(&scalar_stack(&e));
                for i in 0..n {
                    dense[(i, j)] = col.component(i)[0];
                }
            }
            let sigma_max = dense.svd(false, false).singular_values[0];
            let lambda = choose_lambda(n);
            assert!(
                (lambda - 1.0 / sigma_max).abs() < 1e-12,
                "n = {n}: lambda {lambda} vs 1/sigma {}",
                1.0 / sigma_max
            );
        }
    }

    #[test]
    fn average_components_examples() {
        let x = scalar_stack(&[0.0, 1.0]);
        assert_eq!(average_components(&x).coords(), &[0.5]);
        let c = Vector::new(vec![0.7, -0.2]);
        let avg = average_components(&StackedVector::constant(&c, 5));
        assert!(avg.dist(&c) <= 1e-15 * c.norm());
    }

    fn two_block_system() -> (OperatorSystem, Vec<Vector>) {
        let a: Arc<dyn OperatorBlock> =
            Arc::new(DenseLinearBlock::new(1, 2, vec![0.8, 0.1]));
        let b: Arc<dyn OperatorBlock> =
            Arc::new(DenseLinearBlock::new(1, 2, vec![-0.2, 0.7]));
        let system = OperatorSystem::new(vec![a, b]).unwrap();
        let data = vec![Vector::new(vec![0.5]), Vector::new(vec![-0.1])];
        (system, data)
    }

    #[test]
    fn loped_embedding_step_is_identity() {
        let (system, data) = two_block_system();
        let noise = NoiseLevels::uniform(2, 10.0).unwrap();
        let config = EmbeddedConfig::new(3.0).unwrap();
        let x = StackedVector::constant(&Vector::zeros(2), 2);
        let (next, rec) = embedding_step(&system, &x, &data, &noise, &config, 0, 3).unwrap();
        assert!(!rec.omega);
        assert_eq!(next, x);
        assert_eq!(rec.adjoint_evals_cum, 3);
    }

    #[test]
    fn embedding_step_components_update_independently() {
        let (system, data) = two_block_system();
        let noise = NoiseLevels::zero(2);
        let config = EmbeddedConfig::new(3.0).unwrap();
        let x0 = Vector::new(vec![0.1, -0.3]);
        let x = StackedVector::constant(&x0, 2);
        let (next, rec) = embedding_step(&system, &x, &data, &noise, &config, 0, 0).unwrap();
        assert!(rec.omega);
        assert_eq!(rec.adjoint_evals_cum, 2);
        for i in 0..2 {
            let r = system.block(i).apply(&x0).sub(&data[i]);
            let single = x0.sub(&system.block(i).deriv_adjoint_apply(&x0, &r));
            assert_eq!(next.component(i), &single);
        }
    }

    #[test]
    fn single_block_embedding_is_a_plain_landweber_step() {
        let a: Arc<dyn OperatorBlock> =
            Arc::new(DenseLinearBlock::new(2, 2, vec![0.6, 0.1, -0.2, 0.5]));
        let system = OperatorSystem::new(vec![a]).unwrap();
        let data = vec![Vector::new(vec![0.3, -0.4])];
        let noise = NoiseLevels::zero(1);
        let config = EmbeddedConfig::new(3.0).unwrap();
        let x0 = Vector::new(vec![0.2, 0.2]);
        let (next, _) =
            embedding_step(&system, &StackedVector::constant(&x0, 1), &data, &noise, &config, 0, 0)
                .unwrap();
        let r = system.block(0).apply(&x0).sub(&data[0]);
        let expected = x0.sub(&system.block(0).deriv_adjoint_apply(&x0, &r));
        assert_eq!(next.component(0), &expected);
    }

    #[test]
    fn balancing_equalizes_two_components_with_half_lambda() {
        // lambda = 1/2: G maps (1, 0) to (1/2, -1/2), so I - G yields
        // (1/2, 1/2) in a single balancing step.
        let noise = NoiseLevels::zero(2);
        let config = EmbeddedConfig::new(3.0).unwrap();
        let x = scalar_stack(&[1.0, 0.0]);
        let (next, rec) = balancing_step(&x, &noise, &config, 0, 5).unwrap();
        assert!(rec.omega);
        assert_eq!(rec.adjoint_evals_cum, 5, "balancing costs no block adjoints");
        assert_eq!(next.component(0).coords(), &[0.5]);
        assert_eq!(next.component(1).coords(), &[0.5]);
    }

    #[test]
    fn balancing_lopes_below_the_artificial_noise_level() {
        let noise = NoiseLevels::uniform(2, 1.0).unwrap();
        let config = EmbeddedConfig::new(3.0).unwrap();
        // |G x| = sqrt(2)/2 < 3, so the weight is off and x is unchanged.
        let x = scalar_stack(&[1.0, 0.0]);
        let (next, rec) = balancing_step(&x, &noise, &config, 0, 0).unwrap();
        assert!(!rec.omega);
        assert_eq!(next, x);
    }

    #[test]
    fn balancing_is_inactive_on_constant_vectors() {
        let noise = NoiseLevels::zero(3);
        let config = EmbeddedConfig::new(3.0).unwrap();
        let x = StackedVector::constant(&Vector::new(vec![0.4]), 3);
        let (next, rec) = balancing_step(&x, &noise, &config, 0, 0).unwrap();
        assert!(!rec.omega);
        assert_eq!(next, x);
    }

    #[test]
    fn elk_from_exact_solution_is_stationary_at_cycle_zero() {
        let (system, _) = two_block_system();
        let xdag = Vector::new(vec![0.25, -0.5]);
        let data: Vec<Vector> = (0..2).map(|i| system.block(i).apply(&xdag)).collect();
        let noise = NoiseLevels::zero(2);
        let config = EmbeddedConfig::new(3.0).unwrap();
        let run = run_elk(&system, &xdag, &data, &noise, &config).unwrap();
        assert_eq!(run.reason, StopReason::StationaryCycle);
        assert_eq!(run.termination_index, 0);
        assert_eq!(average_components(&run.final_iterate), xdag);
    }

    #[test]
    fn landweber_via_averaging_trivial_cases() {
        let (system, _) = two_block_system();
        let xdag = Vector::new(vec![0.25, -0.5]);
        let data: Vec<Vector> = (0..2).map(|i| system.block(i).apply(&xdag)).collect();
        // Zero residuals: returns x unchanged up to the averaging arithmetic.
        let out = landweber_via_averaging(&system, &xdag, &data).unwrap();
        assert!(out.dist(&xdag) <= 1e-15);
    }

    #[test]
    fn fixed_lambda_is_validated() {
        let (system, data) = two_block_system();
        let noise = NoiseLevels::zero(2);
        let config = EmbeddedConfig::new(3.0)
            .unwrap()
            .with_lambda(LambdaChoice::Fixed(0.9));
        // |D| = 2 for N = 2, so 0.9 * 2 > 1.
        assert!(matches!(
            run_elk(&system, &Vector::zeros(2), &data, &noise, &config),
            Err(ElkError::Config(EmbeddedConfigError::LambdaTooLarge { .. }))
        ));
    }
}
