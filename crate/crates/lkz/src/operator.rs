//! Operator blocks, systems of blocks, and numerical verification of the
//! regularity assumptions the convergence theory rests on.
//!
//! A block models one equation `F_i(x) = y^i` of a system: it evaluates the
//! operator, its derivative at a base point, and the adjoint of that
//! derivative. The verification routines here probe the properties a
//! conforming block must have: an exact adjoint pair, second-order Taylor
//! remainders, derivative norm at most one, and a small tangential cone
//! constant on the trust ball.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::vector::{unit_direction, Vector};

/// Division guard for relative error statistics.
pub const MACHINE_FLOOR: f64 = 1e-300;

/// Remainders below this multiple of the evaluation scale are treated as
/// floating-point noise rather than structure.
const ROUNDOFF_REL: f64 = 1e-13;

/// One operator equation: evaluation, derivative action, adjoint action.
///
/// `deriv_apply(x, .)` must be linear in the direction argument and
/// `deriv_adjoint_apply(x, .)` must be its exact inner-product adjoint;
/// both properties are checkable with [`verify_adjoint`] and the derivative
/// itself with [`verify_frechet`]. Implementations must be pure so that
/// concurrent read-only use is safe.
pub trait OperatorBlock: Send + Sync {
    fn dim_x(&self) -> usize;
    fn dim_y(&self) -> usize;

    /// Evaluates `F(x)`.
    fn apply(&self, x: &Vector) -> Vector;

    /// Evaluates the derivative `F'(x) h`.
    fn deriv_apply(&self, x: &Vector, h: &Vector) -> Vector;

    /// Evaluates the adjoint `F'(x)* w`.
    fn deriv_adjoint_apply(&self, x: &Vector, w: &Vector) -> Vector;
}

/// Dense matrix block `x -> A x` with constant derivative.
#[derive(Debug, Clone)]
pub struct DenseLinearBlock {
    rows: usize,
    cols: usize,
    /// Row-major entries.
    entries: Vec<f64>,
}

impl DenseLinearBlock {
    pub fn new(rows: usize, cols: usize, entries: Vec<f64>) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        assert_eq!(entries.len(), rows * cols, "entry count mismatch");
        Self { rows, cols, entries }
    }

    pub fn identity(dim: usize) -> Self {
        let mut entries = vec![0.0; dim * dim];
        for i in 0..dim {
            entries[i * dim + i] = 1.0;
        }
        Self::new(dim, dim, entries)
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self::new(
            self.rows,
            self.cols,
            self.entries.iter().map(|a| a * factor).collect(),
        )
    }

    fn matvec(&self, x: &Vector) -> Vector {
        assert_eq!(x.dim(), self.cols, "dimension mismatch in matvec");
        let mut out = vec![0.0; self.rows];
        for (i, row) in self.entries.chunks_exact(self.cols).enumerate() {
            out[i] = row.iter().zip(x.coords()).map(|(a, b)| a * b).sum();
        }
        Vector::new(out)
    }

    fn matvec_transposed(&self, w: &Vector) -> Vector {
        assert_eq!(w.dim(), self.rows, "dimension mismatch in transposed matvec");
        let mut out = vec![0.0; self.cols];
        for (i, row) in self.entries.chunks_exact(self.cols).enumerate() {
            let wi = w[i];
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * wi;
            }
        }
        Vector::new(out)
    }
}

impl OperatorBlock for DenseLinearBlock {
    fn dim_x(&self) -> usize {
        self.cols
    }

    fn dim_y(&self) -> usize {
        self.rows
    }

    fn apply(&self, x: &Vector) -> Vector {
        self.matvec(x)
    }

    fn deriv_apply(&self, _x: &Vector, h: &Vector) -> Vector {
        self.matvec(h)
    }

    fn deriv_adjoint_apply(&self, _x: &Vector, w: &Vector) -> Vector {
        self.matvec_transposed(w)
    }
}

type ApplyFn = dyn Fn(&Vector) -> Vector + Send + Sync;
type DerivFn = dyn Fn(&Vector, &Vector) -> Vector + Send + Sync;

/// Block defined by closures; the general escape hatch for custom operators.
pub struct ClosureBlock {
    dim_x: usize,
    dim_y: usize,
    apply: Box<ApplyFn>,
    deriv: Box<DerivFn>,
    deriv_adjoint: Box<DerivFn>,
}

impl ClosureBlock {
    pub fn new(
        dim_x: usize,
        dim_y: usize,
        apply: impl Fn(&Vector) -> Vector + Send + Sync + 'static,
        deriv: impl Fn(&Vector, &Vector) -> Vector + Send + Sync + 'static,
        deriv_adjoint: impl Fn(&Vector, &Vector) -> Vector + Send + Sync + 'static,
    ) -> Self {
        Self {
            dim_x,
            dim_y,
            apply: Box::new(apply),
            deriv: Box::new(deriv),
            deriv_adjoint: Box::new(deriv_adjoint),
        }
    }
}

impl OperatorBlock for ClosureBlock {
    fn dim_x(&self) -> usize {
        self.dim_x
    }

    fn dim_y(&self) -> usize {
        self.dim_y
    }

    fn apply(&self, x: &Vector) -> Vector {
        (self.apply)(x)
    }

    fn deriv_apply(&self, x: &Vector, h: &Vector) -> Vector {
        (self.deriv)(x, h)
    }

    fn deriv_adjoint_apply(&self, x: &Vector, w: &Vector) -> Vector {
        (self.deriv_adjoint)(x, w)
    }
}

#[derive(Debug, Error)]
pub enum SystemError {
    #[error("a system needs at least one block")]
    Empty,
    #[error("block {index} has domain dimension {got}, expected {expected}")]
    DomainMismatch {
        index: usize,
        got: usize,
        expected: usize,
    },
}

/// Ordered family of operator blocks sharing one domain space.
#[derive(Clone)]
pub struct OperatorSystem {
    blocks: Vec<Arc<dyn OperatorBlock>>,
}

impl OperatorSystem {
    pub fn new(blocks: Vec<Arc<dyn OperatorBlock>>) -> Result<Self, SystemError> {
        let first = blocks.first().ok_or(SystemError::Empty)?;
        let dim_x = first.dim_x();
        for (index, block) in blocks.iter().enumerate() {
            if block.dim_x() != dim_x {
                return Err(SystemError::DomainMismatch {
                    index,
                    got: block.dim_x(),
                    expected: dim_x,
                });
            }
        }
        Ok(Self { blocks })
    }

    /// Number of equations N.
    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim_x(&self) -> usize {
        self.blocks[0].dim_x()
    }

    pub fn block(&self, i: usize) -> &dyn OperatorBlock {
        self.blocks[i].as_ref()
    }

    pub fn blocks(&self) -> &[Arc<dyn OperatorBlock>] {
        &self.blocks
    }

    /// Cyclic equation index `[n] = n mod N`.
    pub fn cyclic_index(&self, n: usize) -> usize {
        n % self.len()
    }

    /// The single-equation form `1/sqrt(N) * (F_0, ..., F_{N-1})` acting into
    /// the stacked data space.
    pub fn stacked_block(&self) -> StackedSystemBlock {
        StackedSystemBlock {
            blocks: self.blocks.clone(),
            dim_x: self.dim_x(),
            dim_y: self.blocks.iter().map(|b| b.dim_y()).sum(),
            scale: 1.0 / (self.len() as f64).sqrt(),
        }
    }
}

/// Column stack of a system's blocks, rescaled so the stacked derivative norm
/// stays at most one when each block conforms.
pub struct StackedSystemBlock {
    blocks: Vec<Arc<dyn OperatorBlock>>,
    dim_x: usize,
    dim_y: usize,
    scale: f64,
}

impl StackedSystemBlock {
    fn stack(&self, parts: impl Iterator<Item = Vector>) -> Vector {
        let mut out = Vec::with_capacity(self.dim_y);
        for part in parts {
            out.extend_from_slice(part.coords());
        }
        Vector::new(out).scale(self.scale)
    }
}

impl OperatorBlock for StackedSystemBlock {
    fn dim_x(&self) -> usize {
        self.dim_x
    }

    fn dim_y(&self) -> usize {
        self.dim_y
    }

    fn apply(&self, x: &Vector) -> Vector {
        self.stack(self.blocks.iter().map(|b| b.apply(x)))
    }

    fn deriv_apply(&self, x: &Vector, h: &Vector) -> Vector {
        self.stack(self.blocks.iter().map(|b| b.deriv_apply(x, h)))
    }

    fn deriv_adjoint_apply(&self, x: &Vector, w: &Vector) -> Vector {
        let mut out = Vector::zeros(self.dim_x);
        let mut offset = 0;
        for block in &self.blocks {
            let part = Vector::new(w.coords()[offset..offset + block.dim_y()].to_vec());
            out = out.add(&block.deriv_adjoint_apply(x, &part));
            offset += block.dim_y();
        }
        out.scale(self.scale)
    }
}

/// Closed trust ball; operators are assumed total on it.
#[derive(Debug, Clone)]
pub struct Ball {
    pub center: Vector,
    pub radius: f64,
}

impl Ball {
    pub fn new(center: Vector, radius: f64) -> Self {
        assert!(radius > 0.0, "ball radius must be positive");
        Self { center, radius }
    }

    pub fn contains(&self, x: &Vector) -> bool {
        x.dist(&self.center) <= self.radius
    }
}

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("operator produced a non-finite value during {context}")]
    NonFiniteOutput { context: &'static str },
    #[error("need at least {min} {what}, got {got}")]
    TooFewProbes {
        what: &'static str,
        min: usize,
        got: usize,
    },
    #[error("step ladder must be positive and strictly decreasing")]
    InvalidStepLadder,
    #[error("no ladder step keeps the probe inside the domain ball")]
    AllStepsOutsideDomain,
    #[error("remainder ladder leaves fewer than two resolvable points")]
    UnresolvableLadder,
    #[error("operator is locally constant: every sampled pair was degenerate")]
    LocallyConstant,
}

/// Outcome of a Taylor-remainder order fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FrechetOrder {
    /// Remainders sit at floating-point noise level at every step: the
    /// derivative is exact (linear operator, or quadrature-exact model).
    Exact,
    /// Fitted log-log slope of the remainder; roughly 2 for a correct
    /// derivative of a smooth operator.
    Slope(f64),
}

impl FrechetOrder {
    pub fn is_exact(&self) -> bool {
        matches!(self, FrechetOrder::Exact)
    }

    pub fn slope(&self) -> Option<f64> {
        match self {
            FrechetOrder::Exact => None,
            FrechetOrder::Slope(s) => Some(*s),
        }
    }
}

/// Worst relative adjoint mismatch over random unit probe pairs.
///
/// Returns `max |<F'(x)h, w> - <h, F'(x)*w>| / (|F'(x)h| |w| + floor)` over
/// `trials` draws of unit `h`, `w`. An exact adjoint pair stays at the
/// roundoff level (~1e-15); a wrong adjoint shows up at order one.
pub fn verify_adjoint(
    block: &dyn OperatorBlock,
    x: &Vector,
    trials: usize,
    seed: u64,
) -> Result<f64, VerifyError> {
    if trials < 1 {
        return Err(VerifyError::TooFewProbes {
            what: "trials",
            min: 1,
            got: trials,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let h = unit_direction(block.dim_x(), &mut rng);
        let w = unit_direction(block.dim_y(), &mut rng);
        let fh = block.deriv_apply(x, &h);
        if !fh.is_finite() {
            return Err(VerifyError::NonFiniteOutput {
                context: "derivative application in the adjoint test",
            });
        }
        let fw = block.deriv_adjoint_apply(x, &w);
        if !fw.is_finite() {
            return Err(VerifyError::NonFiniteOutput {
                context: "adjoint application in the adjoint test",
            });
        }
        let mismatch = (fh.dot(&w) - h.dot(&fw)).abs();
        worst = worst.max(mismatch / (fh.norm() * w.norm() + MACHINE_FLOOR));
    }
    Ok(worst)
}

/// Fits the decay order of the Taylor remainder `|F(x+t h) - F(x) - t F'(x)h|`
/// over a decreasing step ladder.
///
/// Steps that leave `ball` (when given) are dropped; remainders at roundoff
/// level are reported as [`FrechetOrder::Exact`].
pub fn verify_frechet(
    block: &dyn OperatorBlock,
    x: &Vector,
    h: &Vector,
    step_ladder: &[f64],
    ball: Option<&Ball>,
) -> Result<FrechetOrder, VerifyError> {
    if step_ladder.len() < 3 {
        return Err(VerifyError::TooFewProbes {
            what: "ladder steps",
            min: 3,
            got: step_ladder.len(),
        });
    }
    if step_ladder
        .windows(2)
        .any(|w| w[0] <= w[1] || !w[0].is_finite())
        || step_ladder.iter().any(|&t| t <= 0.0)
    {
        return Err(VerifyError::InvalidStepLadder);
    }

    let fx = block.apply(x);
    let dfh = block.deriv_apply(x, h);
    if !fx.is_finite() || !dfh.is_finite() {
        return Err(VerifyError::NonFiniteOutput {
            context: "base evaluation in the derivative test",
        });
    }

    let mut resolvable = Vec::new();
    let mut saturated = 0usize;
    let mut inside = 0usize;
    for &t in step_ladder {
        let probe = x.add(&h.scale(t));
        if let Some(ball) = ball {
            if !ball.contains(&probe) {
                continue;
            }
        }
        inside += 1;
        let f_probe = block.apply(&probe);
        if !f_probe.is_finite() {
            return Err(VerifyError::NonFiniteOutput {
                context: "probe evaluation in the derivative test",
            });
        }
        let remainder = f_probe.sub(&fx).sub(&dfh.scale(t)).norm();
        let noise_scale = ROUNDOFF_REL * (fx.norm() + f_probe.norm() + t.abs() * dfh.norm());
        if remainder <= noise_scale {
            saturated += 1;
        } else {
            resolvable.push((t.ln(), remainder.ln()));
        }
    }

    if inside == 0 {
        return Err(VerifyError::AllStepsOutsideDomain);
    }
    if resolvable.is_empty() {
        return Ok(FrechetOrder::Exact);
    }
    if resolvable.len() < 2 {
        if saturated > 0 {
            // A single resolvable point next to saturated ones still means
            // the remainder lives at noise level.
            return Ok(FrechetOrder::Exact);
        }
        return Err(VerifyError::UnresolvableLadder);
    }

    // Least-squares slope of ln(remainder) against ln(t).
    let n = resolvable.len() as f64;
    let sx: f64 = resolvable.iter().map(|p| p.0).sum();
    let sy: f64 = resolvable.iter().map(|p| p.1).sum();
    let sxx: f64 = resolvable.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = resolvable.iter().map(|p| p.0 * p.1).sum();
    Ok(FrechetOrder::Slope((n * sxy - sx * sy) / (n * sxx - sx * sx)))
}

/// Lower estimate of the derivative norm `|F'(x)|` by power iteration on
/// `h -> F'(x)* F'(x) h`.
pub fn estimate_norm(
    block: &dyn OperatorBlock,
    x: &Vector,
    iters: usize,
    seed: u64,
) -> Result<f64, VerifyError> {
    if iters < 10 {
        return Err(VerifyError::TooFewProbes {
            what: "power iterations",
            min: 10,
            got: iters,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut h = unit_direction(block.dim_x(), &mut rng);
    let mut reseeds = 0;
    let mut rayleigh = 0.0;
    let mut i = 0;
    while i < iters {
        let g = block.deriv_adjoint_apply(x, &block.deriv_apply(x, &h));
        if !g.is_finite() {
            return Err(VerifyError::NonFiniteOutput {
                context: "normal-operator application in the norm estimate",
            });
        }
        let gn = g.norm();
        if gn <= MACHINE_FLOOR {
            // Start vector fell into the null space; reseed a few times
            // before concluding the operator is numerically zero here.
            if reseeds >= 4 {
                return Ok(0.0);
            }
            reseeds += 1;
            h = unit_direction(block.dim_x(), &mut rng);
            continue;
        }
        rayleigh = h.dot(&g);
        h = g.scale(1.0 / gn);
        i += 1;
    }
    Ok(rayleigh.max(0.0).sqrt())
}

/// Empirical lower estimate of the tangential cone constant on the ball.
///
/// Samples pairs uniformly in `B_radius(center)` and maximizes
/// `|F(x) - F(xb) - F'(x)(x - xb)| / |F(x) - F(xb)|`; pairs whose denominator
/// vanishes are skipped, and numerators at roundoff level count as zero so a
/// linear block reports exactly 0.
pub fn estimate_eta(
    block: &dyn OperatorBlock,
    center: &Vector,
    radius: f64,
    samples: usize,
    seed: u64,
) -> Result<f64, VerifyError> {
    assert!(radius > 0.0, "eta estimation needs a positive radius");
    if samples < 1 {
        return Err(VerifyError::TooFewProbes {
            what: "samples",
            min: 1,
            got: samples,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = block.dim_x();
    let exponent = 1.0 / dim as f64;
    let draw = |rng: &mut ChaCha8Rng| {
        let r = radius * rand::Rng::random::<f64>(rng).powf(exponent);
        center.add(&unit_direction(dim, rng).scale(r))
    };
    let mut best: f64 = 0.0;
    let mut usable = 0usize;
    for _ in 0..samples {
        let xa = draw(&mut rng);
        let xb = draw(&mut rng);
        let fa = block.apply(&xa);
        let fb = block.apply(&xb);
        let lin = block.deriv_apply(&xa, &xa.sub(&xb));
        if !fa.is_finite() || !fb.is_finite() || !lin.is_finite() {
            return Err(VerifyError::NonFiniteOutput {
                context: "sampling in the cone-constant estimate",
            });
        }
        let den = fa.dist(&fb);
        if den <= MACHINE_FLOOR {
            continue;
        }
        usable += 1;
        let num = fa.sub(&fb).sub(&lin).norm();
        let noise_scale = ROUNDOFF_REL * (fa.norm() + fb.norm() + lin.norm());
        if num > noise_scale {
            best = best.max(num / den);
        }
    }
    if usable == 0 {
        return Err(VerifyError::LocallyConstant);
    }
    Ok(best)
}

/// Measured regularity of one block over its trust ball.
#[derive(Debug, Clone)]
pub struct RegularityReport {
    pub block_index: usize,
    pub adjoint_error: f64,
    pub frechet_order: FrechetOrder,
    pub norm_estimate: f64,
    pub eta_estimate: f64,
    pub ball_radius: f64,
}

impl RegularityReport {
    /// Whether the block meets the assumptions the solvers rely on.
    pub fn conforms(&self) -> bool {
        let order_ok = match self.frechet_order {
            FrechetOrder::Exact => true,
            FrechetOrder::Slope(s) => (1.7..=2.3).contains(&s),
        };
        self.adjoint_error <= 1e-10
            && order_ok
            && self.norm_estimate <= 1.0 + 1e-8
            && self.eta_estimate < 0.45
    }
}

/// Runs the full verification suite for one block at the ball center.
pub fn regularity_report(
    block: &dyn OperatorBlock,
    block_index: usize,
    ball: &Ball,
    trials: usize,
    eta_samples: usize,
    seed: u64,
) -> Result<RegularityReport, VerifyError> {
    let x = &ball.center;
    let adjoint_error = verify_adjoint(block, x, trials, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f0f0);
    let h = unit_direction(block.dim_x(), &mut rng);
    let ladder = [ball.radius * 1e-1, ball.radius * 1e-2, ball.radius * 1e-3];
    let frechet_order = verify_frechet(block, x, &h, &ladder, Some(ball))?;
    let norm_estimate = estimate_norm(block, x, 60, seed.wrapping_add(1))?;
    let eta_estimate = estimate_eta(block, x, ball.radius, eta_samples, seed.wrapping_add(2))?;
    Ok(RegularityReport {
        block_index,
        adjoint_error,
        frechet_order,
        norm_estimate,
        eta_estimate,
        ball_radius: ball.radius,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_block(
        f: impl Fn(f64) -> f64 + Send + Sync + 'static,
        df: impl Fn(f64) -> f64 + Send + Sync + Copy + 'static,
    ) -> ClosureBlock {
        ClosureBlock::new(
            1,
            1,
            move |x| Vector::new(vec![f(x[0])]),
            move |x, h| Vector::new(vec![df(x[0]) * h[0]]),
            move |x, w| Vector::new(vec![df(x[0]) * w[0]]),
        )
    }

    #[test]
    fn adjoint_test_accepts_exact_pair() {
        let block = DenseLinearBlock::new(3, 2, vec![1.0, -2.0, 0.5, 3.0, 2.0, -1.0]);
        let x = Vector::zeros(2);
        let err = verify_adjoint(&block, &x, 100, 11).unwrap();
        assert!(err <= 1e-12, "exact pair reported {err}");
    }

    #[test]
    fn adjoint_test_flags_wrong_adjoint() {
        // A = [[0,1],[0,0]] with the "adjoint" deliberately A instead of A^T:
        // for h=(0,1), w=(1,0) the mismatch |<Ah,w> - <h,Aw>| = 1 at scale 1.
        let block = ClosureBlock::new(
            2,
            2,
            |x| Vector::new(vec![x[1], 0.0]),
            |_, h| Vector::new(vec![h[1], 0.0]),
            |_, w| Vector::new(vec![w[1], 0.0]),
        );
        let err = verify_adjoint(&block, &Vector::zeros(2), 100, 5).unwrap();
        assert!(err > 0.1, "asymmetric mismatch reported only {err}");
    }

    #[test]
    fn adjoint_test_is_finite_for_zero_operator() {
        let block = DenseLinearBlock::new(2, 2, vec![0.0; 4]);
        let err = verify_adjoint(&block, &Vector::zeros(2), 10, 9).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn frechet_linear_is_exact() {
        let block = DenseLinearBlock::new(2, 2, vec![2.0, 1.0, 0.0, -1.0]);
        let order = verify_frechet(
            &block,
            &Vector::new(vec![0.3, -0.7]),
            &Vector::new(vec![1.0, 0.5]),
            &[1e-1, 1e-2, 1e-3],
            None,
        )
        .unwrap();
        assert!(order.is_exact());
    }

    #[test]
    fn frechet_quadratic_slope_is_two() {
        // F(x) = x^2 at x=1, h=1: remainder is exactly t^2.
        let block = scalar_block(|x| x * x, |x| 2.0 * x);
        let order = verify_frechet(
            &block,
            &Vector::new(vec![1.0]),
            &Vector::new(vec![1.0]),
            &[1e-1, 1e-2, 1e-3],
            None,
        )
        .unwrap();
        let slope = order.slope().expect("quadratic remainder is resolvable");
        assert!((slope - 2.0).abs() < 1e-4, "slope {slope}");
    }

    #[test]
    fn frechet_wrong_derivative_slope_is_one() {
        // Derivative off by a factor of two leaves a first-order remainder.
        let block = scalar_block(|x| x * x, |x| 4.0 * x);
        let order = verify_frechet(
            &block,
            &Vector::new(vec![1.0]),
            &Vector::new(vec![1.0]),
            &[1e-1, 1e-2, 1e-3],
            None,
        )
        .unwrap();
        let slope = order.slope().unwrap();
        assert!((slope - 1.0).abs() < 0.1, "slope {slope}");
    }

    #[test]
    fn frechet_rejects_bad_ladders() {
        let block = DenseLinearBlock::identity(1);
        let x = Vector::zeros(1);
        let h = Vector::new(vec![1.0]);
        assert!(matches!(
            verify_frechet(&block, &x, &h, &[1e-1, 1e-2], None),
            Err(VerifyError::TooFewProbes { .. })
        ));
        assert!(matches!(
            verify_frechet(&block, &x, &h, &[1e-2, 1e-1, 1e-3], None),
            Err(VerifyError::InvalidStepLadder)
        ));
    }

    #[test]
    fn frechet_shrinks_ladder_to_the_ball() {
        let block = DenseLinearBlock::identity(1);
        let ball = Ball::new(Vector::zeros(1), 0.05);
        let h = Vector::new(vec![1.0]);
        // 1e-1 falls outside the ball and is dropped; the rest still verify.
        let order =
            verify_frechet(&block, &Vector::zeros(1), &h, &[1e-1, 1e-2, 1e-3], Some(&ball))
                .unwrap();
        assert!(order.is_exact());
        let tiny = Ball::new(Vector::zeros(1), 1e-5);
        assert!(matches!(
            verify_frechet(&block, &Vector::zeros(1), &h, &[1e-1, 1e-2, 1e-3], Some(&tiny)),
            Err(VerifyError::AllStepsOutsideDomain)
        ));
    }

    #[test]
    fn norm_estimate_identity() {
        let block = DenseLinearBlock::identity(5);
        let est = estimate_norm(&block, &Vector::zeros(5), 50, 3).unwrap();
        assert!((est - 1.0).abs() <= 1e-8, "estimate {est}");
    }

    #[test]
    fn norm_estimate_diagonal() {
        let block = DenseLinearBlock::new(2, 2, vec![0.5, 0.0, 0.0, 0.25]);
        let est = estimate_norm(&block, &Vector::zeros(2), 60, 4).unwrap();
        assert!((est - 0.5).abs() <= 1e-8, "estimate {est}");
    }

    #[test]
    fn norm_estimate_zero_operator_reseeds_and_reports_zero() {
        let block = DenseLinearBlock::new(2, 2, vec![0.0; 4]);
        let est = estimate_norm(&block, &Vector::zeros(2), 20, 8).unwrap();
        assert_eq!(est, 0.0);
    }

    #[test]
    fn stacked_block_of_unit_blocks_stays_contractive() {
        let blocks: Vec<Arc<dyn OperatorBlock>> = (0..4)
            .map(|_| Arc::new(DenseLinearBlock::identity(3)) as Arc<dyn OperatorBlock>)
            .collect();
        let system = OperatorSystem::new(blocks).unwrap();
        let stacked = system.stacked_block();
        let est = estimate_norm(&stacked, &Vector::zeros(3), 50, 17).unwrap();
        assert!(est <= 1.0 + 1e-8, "estimate {est}");
        // The stacked block is also an exact adjoint pair.
        let adj = verify_adjoint(&stacked, &Vector::zeros(3), 50, 19).unwrap();
        assert!(adj <= 1e-12);
    }

    #[test]
    fn eta_linear_is_exactly_zero() {
        let block = DenseLinearBlock::new(2, 2, vec![0.9, -0.4, 0.3, 0.8]);
        let eta = estimate_eta(&block, &Vector::zeros(2), 1.0, 300, 21).unwrap();
        assert_eq!(eta, 0.0);
    }

    #[test]
    fn eta_weakly_nonlinear_scalar_stays_below_half() {
        // F(x) = x + 0.05 x^2 on the unit ball around 0. The exact supremum
        // of the cone ratio is computed on a fine grid as the oracle.
        let block = scalar_block(|x| x + 0.05 * x * x, |x| 1.0 + 0.1 * x);
        let mut grid_sup: f64 = 0.0;
        let steps = 400;
        for i in 0..=steps {
            for j in 0..=steps {
                let xa = -1.0 + 2.0 * i as f64 / steps as f64;
                let xb = -1.0 + 2.0 * j as f64 / steps as f64;
                let fa = xa + 0.05 * xa * xa;
                let fb = xb + 0.05 * xb * xb;
                let den = (fa - fb).abs();
                if den > 1e-14 {
                    let num = (fa - fb - (1.0 + 0.1 * xa) * (xa - xb)).abs();
                    grid_sup = grid_sup.max(num / den);
                }
            }
        }
        assert!(grid_sup < 0.5, "grid oracle {grid_sup}");
        let eta = estimate_eta(&block, &Vector::zeros(1), 1.0, 2000, 23).unwrap();
        assert!(eta <= grid_sup + 1e-9, "sampled {eta} above oracle {grid_sup}");
        assert!(eta < 0.5);
    }

    #[test]
    fn eta_cubic_fails_the_condition() {
        // F(x) = x^3 on the unit ball: at x=1, xb=-1 the ratio is
        // |2 - 3*2| / 2 = 2, so the estimate must reach at least 1/2.
        let block = scalar_block(|x| x * x * x, |x| 3.0 * x * x);
        let eta = estimate_eta(&block, &Vector::zeros(1), 1.0, 2000, 29).unwrap();
        assert!(eta >= 0.5, "sampled {eta}");
    }

    #[test]
    fn eta_constant_operator_errors() {
        let block = scalar_block(|_| 1.0, |_| 0.0);
        assert!(matches!(
            estimate_eta(&block, &Vector::zeros(1), 1.0, 50, 31),
            Err(VerifyError::LocallyConstant)
        ));
    }

    #[test]
    fn system_requires_matching_domains() {
        let a: Arc<dyn OperatorBlock> = Arc::new(DenseLinearBlock::identity(2));
        let b: Arc<dyn OperatorBlock> = Arc::new(DenseLinearBlock::identity(3));
        assert!(matches!(
            OperatorSystem::new(vec![a, b]),
            Err(SystemError::DomainMismatch { index: 1, .. })
        ));
        assert!(matches!(OperatorSystem::new(vec![]), Err(SystemError::Empty)));
    }
}
