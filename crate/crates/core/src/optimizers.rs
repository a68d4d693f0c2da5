//! First-order methods over l2 balls and all of R^p.
//!
//! The iteration loops ([`frank_wolfe`], [`projected_gd`], [`nesterov`]) only
//! see a [`GradientOracle`]; the `run_*` entry points wire an oracle from a
//! dataset, a loss and a [`GradSource`] and attach per-iterate metrics.

use std::ops::Range;

use nalgebra::SymmetricEigen;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data_synth::Dataset;
use crate::error::{invalid, Error, Result};
use crate::losses::{curvature_constants, CurvatureSource, LossFamily, LossModel};
use crate::privacy_accountant::{noise_variance, NoiseVariant};
use crate::rng::stream_rng;
use crate::robust_mean::{bucket_count, bucket_ranges, geometric_median, GmomConfig};
use crate::{Matrix, Vector};

const NOISE_STREAM: u64 = 0x6e6f697365;
const SHUFFLE_STREAM: u64 = 0x73687566;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ConstraintSet {
    L2Ball { radius: f64 },
    AllSpace,
}

impl ConstraintSet {
    pub fn ball(radius: f64) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(invalid(format!("ball radius must be positive, got {radius}")));
        }
        Ok(ConstraintSet::L2Ball { radius })
    }

    pub fn radius(&self) -> Option<f64> {
        match *self {
            ConstraintSet::L2Ball { radius } => Some(radius),
            ConstraintSet::AllSpace => None,
        }
    }

    /// Strong-convexity modulus of the set (`1/radius` for a ball).
    pub fn set_convexity(&self) -> Option<f64> {
        self.radius().map(|r| 1.0 / r)
    }

    pub fn diameter(&self) -> Option<f64> {
        self.radius().map(|r| 2.0 * r)
    }

    pub fn project(&self, v: &Vector) -> Vector {
        match *self {
            ConstraintSet::L2Ball { radius } => project_l2_ball(v, radius),
            ConstraintSet::AllSpace => v.clone(),
        }
    }

    fn require_radius(&self, what: &str) -> Result<f64> {
        match *self {
            ConstraintSet::L2Ball { radius } if radius > 0.0 => Ok(radius),
            ConstraintSet::L2Ball { .. } => Err(invalid("ball radius must be positive")),
            ConstraintSet::AllSpace => Err(invalid(format!("{what} needs an l2-ball constraint"))),
        }
    }
}

/// Minimiser of `<g, v>` over the ball of radius `radius`; the origin when `g = 0`.
pub fn lmo_l2_ball(g: &Vector, radius: f64) -> Vector {
    let norm = g.norm();
    if norm > 0.0 {
        g * (-radius / norm)
    } else {
        Vector::zeros(g.len())
    }
}

/// Euclidean projection onto the ball of radius `radius`.
pub fn project_l2_ball(v: &Vector, radius: f64) -> Vector {
    let norm = v.norm();
    if norm <= radius {
        v.clone()
    } else {
        v * (radius / norm)
    }
}

/// `steps` contiguous ranges of `floor(n / steps)` samples; the tail is unused.
pub fn split_chunks(n: usize, steps: usize) -> Result<Vec<Range<usize>>> {
    if steps == 0 {
        return Err(invalid("cannot split into zero chunks"));
    }
    if steps > n {
        return Err(invalid(format!("cannot split {n} samples into {steps} chunks")));
    }
    let size = n / steps;
    Ok((0..steps).map(|t| t * size..(t + 1) * size).collect())
}

/// Source of gradients for one step of an iterative method.
pub trait GradientOracle {
    fn dim(&self) -> usize;
    /// Gradient (estimate) for step `step` (0-based) at `theta`.
    fn gradient(&mut self, step: usize, theta: &Vector) -> Result<Vector>;
}

/// `F(theta) = 1/2 (theta - center)^T H (theta - center)` with exact gradients.
#[derive(Clone, Debug)]
pub struct QuadraticOracle {
    pub hessian: Matrix,
    pub center: Vector,
}

impl QuadraticOracle {
    pub fn value(&self, theta: &Vector) -> f64 {
        let d = theta - &self.center;
        0.5 * d.dot(&(&self.hessian * &d))
    }
}

impl GradientOracle for QuadraticOracle {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn gradient(&mut self, _step: usize, theta: &Vector) -> Result<Vector> {
        Ok(&self.hessian * (theta - &self.center))
    }
}

/// Iterates and the step size applied at each step.
#[derive(Clone, Debug, Default)]
pub struct Path {
    pub iterates: Vec<Vector>,
    pub step_sizes: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FwStep {
    /// `2 / (t + 2)`.
    Classic,
    Fixed(f64),
}

fn check_start(theta: &Vector, dim: usize) -> Result<()> {
    if theta.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: theta.len(),
        });
    }
    Ok(())
}

/// Frank-Wolfe over the ball: `theta <- (1 - step) theta + step lmo(g)`.
pub fn frank_wolfe(
    oracle: &mut dyn GradientOracle,
    radius: f64,
    schedule: FwStep,
    steps: usize,
    theta0: &Vector,
) -> Result<Path> {
    check_start(theta0, oracle.dim())?;
    if theta0.norm() > radius * (1.0 + 1e-12) {
        return Err(invalid("Frank-Wolfe must start inside the ball"));
    }
    if let FwStep::Fixed(s) = schedule {
        if !(s > 0.0 && s <= 1.0) {
            return Err(invalid(format!("Frank-Wolfe step must lie in (0, 1], got {s}")));
        }
    }
    let mut path = Path {
        iterates: vec![theta0.clone()],
        step_sizes: Vec::with_capacity(steps),
    };
    let mut theta = theta0.clone();
    for t in 0..steps {
        let g = oracle.gradient(t, &theta)?;
        let v = lmo_l2_ball(&g, radius);
        let step = match schedule {
            FwStep::Classic => 2.0 / (t as f64 + 2.0),
            FwStep::Fixed(s) => s,
        };
        theta = &theta * (1.0 - step) + v * step;
        path.iterates.push(theta.clone());
        path.step_sizes.push(step);
    }
    Ok(path)
}

/// Projected gradient descent with a constant step.
pub fn projected_gd(
    oracle: &mut dyn GradientOracle,
    constraint: &ConstraintSet,
    step_size: f64,
    steps: usize,
    theta0: &Vector,
) -> Result<Path> {
    check_start(theta0, oracle.dim())?;
    if !(step_size > 0.0) {
        return Err(invalid("step size must be positive"));
    }
    let mut path = Path {
        iterates: vec![theta0.clone()],
        step_sizes: Vec::with_capacity(steps),
    };
    let mut theta = theta0.clone();
    for t in 0..steps {
        let g = oracle.gradient(t, &theta)?;
        theta = constraint.project(&(&theta - g * step_size));
        path.iterates.push(theta.clone());
        path.step_sizes.push(step_size);
    }
    Ok(path)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Momentum {
    Constant { value: f64 },
    /// `(t - 1) / (t + 2)` at step `t = 1, 2, ...`.
    Increasing,
}

/// Two-point momentum recursion started from `theta0, theta1`:
/// `y = theta_t + m_t (theta_t - theta_{t-1})`, `theta_{t+1} = y - step grad(y)`.
/// Returns `steps + 2` iterates.
pub fn nesterov(
    oracle: &mut dyn GradientOracle,
    step_size: f64,
    momentum: Momentum,
    steps: usize,
    theta0: &Vector,
    theta1: &Vector,
) -> Result<Path> {
    check_start(theta0, oracle.dim())?;
    check_start(theta1, oracle.dim())?;
    if !(step_size > 0.0) {
        return Err(invalid("step size must be positive"));
    }
    let mut path = Path {
        iterates: vec![theta0.clone(), theta1.clone()],
        step_sizes: Vec::with_capacity(steps),
    };
    let mut prev = theta0.clone();
    let mut cur = theta1.clone();
    for k in 0..steps {
        let t = (k + 1) as f64;
        let m = match momentum {
            Momentum::Constant { value } => value,
            Momentum::Increasing => (t - 1.0) / (t + 2.0),
        };
        let y = &cur + (&cur - &prev) * m;
        let g = oracle.gradient(k, &y)?;
        let next = y - g * step_size;
        prev = std::mem::replace(&mut cur, next);
        path.iterates.push(cur.clone());
        path.step_sizes.push(step_size);
    }
    Ok(path)
}

/// Fixed step of the accelerated Frank-Wolfe method.
pub fn accel_step_size(set_convexity: f64, grad_floor: f64, smoothness: f64) -> f64 {
    (set_convexity * grad_floor / (4.0 * smoothness)).min(1.0)
}

/// Per-step contraction factor of the accelerated Frank-Wolfe gap.
pub fn accel_rate(set_convexity: f64, grad_floor: f64, smoothness: f64) -> f64 {
    (1.0 - set_convexity * grad_floor / (8.0 * smoothness)).max(0.5)
}

/// Gradient-norm floor implied by a unit-free ratio `ratio = set_convexity * floor / smoothness`.
pub fn grad_floor_from_ratio(ratio: f64, smoothness: f64, set_convexity: f64) -> f64 {
    ratio * smoothness / set_convexity
}

/// Gradient-norm floor for the logistic model with a ball shrinking like `n^(-2/5)`.
pub fn logistic_grad_floor(n: usize, concentration: f64, failure_prob: f64) -> f64 {
    let n = n as f64;
    n.powf(-0.4) - (concentration * (2.0 / failure_prob).ln() / n).sqrt()
}

/// Momentum for the strongly convex regime.
pub fn strongly_convex_momentum(smoothness: f64, strong_convexity: f64) -> f64 {
    let (a, b) = (smoothness.sqrt(), strong_convexity.sqrt());
    (a - b) / (a + b)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StabilityReport {
    /// Contraction factor of noisy projected GD.
    pub k_gd: f64,
    pub lower_window: f64,
    pub upper_window: f64,
    pub stable_gd: bool,
    pub nesterov_window_ok: bool,
}

/// Lower edge of the Nesterov stability window as a function of the condition number.
pub fn nesterov_window_lower(x: f64) -> f64 {
    ((x + 1.0) * (1.0 - 1.0 / x.sqrt()).sqrt() - x + 1.0) / 2.0
}

/// Upper edge of the Nesterov stability window as a function of the condition number.
pub fn nesterov_window_upper(x: f64) -> f64 {
    let s = (x.sqrt() - 1.0) / (x.sqrt() + 1.0);
    (1.0 - 2.0 * (x - 1.0) * s) / (2.0 * (1.0 + 2.0 * s))
}

/// Stability checks for a gradient estimator whose error grows like
/// `slope * ||theta - theta_opt||`.
pub fn stability_constants(smoothness: f64, strong_convexity: f64, slope: f64) -> Result<StabilityReport> {
    if !(strong_convexity > 0.0) {
        return Err(invalid("strong convexity must be positive"));
    }
    if smoothness < strong_convexity {
        return Err(invalid("smoothness must be at least the strong convexity"));
    }
    let x = smoothness / strong_convexity;
    let lower = nesterov_window_lower(x);
    let upper = nesterov_window_upper(x);
    let rel = slope / strong_convexity;
    Ok(StabilityReport {
        k_gd: (smoothness - strong_convexity + 2.0 * slope) / (smoothness + strong_convexity),
        lower_window: lower,
        upper_window: upper,
        stable_gd: slope < strong_convexity / 2.0,
        nesterov_window_ok: lower < rel && rel < upper && x > 1.0 && x < 1.76,
    })
}

/// Minimiser of `1/2 theta^T H theta - b^T theta` over the ball of radius
/// `radius`, for symmetric positive semidefinite `H`.
pub fn ball_quadratic_minimizer(h: &Matrix, b: &Vector, radius: f64) -> Result<Vector> {
    let p = b.len();
    if h.nrows() != p || h.ncols() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            got: h.nrows(),
        });
    }
    let eig = SymmetricEigen::new((h + h.transpose()) * 0.5);
    let lam: Vec<f64> = eig.eigenvalues.iter().map(|&l| l.max(0.0)).collect();
    let lmax = lam.iter().cloned().fold(0.0, f64::max);
    let c = eig.eigenvectors.tr_mul(b);
    let zero_eig = |l: f64| l <= 1e-13 * lmax.max(1e-300);
    let bnorm = b.norm();

    let solve = |shift: f64| -> Vector {
        let coeffs = Vector::from_iterator(
            p,
            (0..p).map(|i| {
                let d = lam[i] + shift;
                if d <= 0.0 || (shift == 0.0 && zero_eig(lam[i])) {
                    0.0
                } else {
                    c[i] / d
                }
            }),
        );
        &eig.eigenvectors * coeffs
    };

    let singular_pull = (0..p).any(|i| zero_eig(lam[i]) && c[i].abs() > 1e-13 * bnorm.max(1e-300));
    if !singular_pull {
        let free = solve(0.0);
        if free.norm() <= radius {
            return Ok(free);
        }
    }
    // Boundary solution: find shift > 0 with ||(H + shift I)^{-1} b|| = radius.
    let mut lo = 0.0f64;
    let mut hi = bnorm / radius;
    if hi <= 0.0 {
        return Ok(Vector::zeros(p));
    }
    while solve(hi).norm() > radius {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if solve(mid).norm() > radius {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(project_l2_ball(&solve(hi), radius))
}

/// Minimum of the empirical loss over `constraint`, and the minimiser.
///
/// Squared and ridge losses are solved exactly; other losses use long
/// exact-gradient projected GD with step `1/smoothness`.
pub fn reference_minimum(data: &Dataset, model: &LossModel, constraint: &ConstraintSet) -> Result<(f64, Vector)> {
    let n = data.n() as f64;
    let theta = match model.family {
        LossFamily::Squared | LossFamily::Ridge { .. } => {
            let mut h = data.x.tr_mul(&data.x) / n;
            for i in 0..data.p() {
                h[(i, i)] += model.penalty();
            }
            let b = data.x.tr_mul(&data.y) / n;
            match constraint.radius() {
                Some(r) => ball_quadratic_minimizer(&h, &b, r)?,
                None => h
                    .cholesky()
                    .map(|c| c.solve(&b))
                    .ok_or_else(|| Error::Singular("unconstrained least squares is singular".into()))?,
            }
        }
        LossFamily::GlmLogistic | LossFamily::PseudoHuber { .. } => {
            let radius = constraint.radius().unwrap_or(1.0);
            let smooth = curvature_constants(&LossModel { bounds: None, ..*model }, CurvatureSource::Dataset(data), radius)?
                .smoothness;
            let step = 1.0 / smooth.max(1e-12);
            let mut theta = Vector::zeros(data.p());
            for _ in 0..100_000 {
                let (_, g) = model.value_and_gradient_on(&theta, data, 0..data.n())?;
                let next = constraint.project(&(&theta - g * step));
                let moved = (&next - &theta).norm();
                theta = next;
                if moved <= 1e-13 * (1.0 + theta.norm()) {
                    break;
                }
            }
            theta
        }
    };
    Ok((model.empirical_value(&theta, data)?, theta))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    FwClassic,
    FwAccel,
    FwAccelPrivate,
    FwClassicPrivate,
    Pgd,
    NesterovSc,
    NesterovSmooth,
    DpSgd,
}

impl Algorithm {
    pub const ALL: [Algorithm; 8] = [
        Algorithm::FwClassic,
        Algorithm::FwAccel,
        Algorithm::FwAccelPrivate,
        Algorithm::FwClassicPrivate,
        Algorithm::Pgd,
        Algorithm::NesterovSc,
        Algorithm::NesterovSmooth,
        Algorithm::DpSgd,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::FwClassic => "fw-classic",
            Algorithm::FwAccel => "fw-accel",
            Algorithm::FwAccelPrivate => "fw-accel-private",
            Algorithm::FwClassicPrivate => "fw-classic-private",
            Algorithm::Pgd => "pgd",
            Algorithm::NesterovSc => "nesterov-sc",
            Algorithm::NesterovSmooth => "nesterov-smooth",
            Algorithm::DpSgd => "dp-sgd",
        }
    }

    fn is_private(self) -> bool {
        matches!(self, Algorithm::FwAccelPrivate | Algorithm::FwClassicPrivate | Algorithm::DpSgd)
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| invalid(format!("unknown algorithm `{s}`")))
    }
}

/// How gradients are formed at each step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GradSource {
    /// Full-sample mean gradient.
    Exact,
    /// Mean gradient plus Gaussian noise calibrated by the accountant.
    /// Frank-Wolfe averages the full sample; GD and Nesterov average chunk `t`.
    Private { epsilon: f64, delta: f64, lipschitz: f64 },
    /// Geometric median-of-means of per-sample gradients. The overall
    /// failure probability is split evenly across steps.
    Robust { failure_prob: f64 },
}

/// Which samples feed the robust estimator at step `t`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Chunking {
    /// Disjoint chunk `t` of `floor(n / T)` samples.
    #[default]
    Split,
    /// The full sample at every step.
    Reuse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub algorithm: Algorithm,
    pub steps: usize,
    /// Overrides the derived step size.
    #[serde(default)]
    pub step_size: Option<f64>,
    /// Overrides the derived momentum.
    #[serde(default)]
    pub momentum: Option<f64>,
    /// Lower bound on the gradient norm over the set (accelerated Frank-Wolfe).
    #[serde(default)]
    pub grad_floor: Option<f64>,
    #[serde(default)]
    pub smoothness: Option<f64>,
    #[serde(default)]
    pub strong_convexity: Option<f64>,
    #[serde(default)]
    pub theta0: Option<Vec<f64>>,
    #[serde(default)]
    pub theta1: Option<Vec<f64>>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub chunking: Chunking,
    /// Loss value subtracted to report excess loss.
    #[serde(default)]
    pub reference_loss: Option<f64>,
}

impl OptimizerConfig {
    pub fn new(algorithm: Algorithm, steps: usize) -> Self {
        OptimizerConfig {
            algorithm,
            steps,
            step_size: None,
            momentum: None,
            grad_floor: None,
            smoothness: None,
            strong_convexity: None,
            theta0: None,
            theta1: None,
            seed: 0,
            chunking: Chunking::Split,
            reference_loss: None,
        }
    }

    fn start(&self, p: usize, which: &Option<Vec<f64>>) -> Result<Vector> {
        match which {
            Some(v) => {
                check_start(&Vector::from_row_slice(v), p)?;
                Ok(Vector::from_row_slice(v))
            }
            None => Ok(Vector::zeros(p)),
        }
    }

    fn need_smoothness(&self) -> Result<f64> {
        match self.smoothness {
            Some(s) if s > 0.0 => Ok(s),
            _ => Err(invalid(format!("{} needs a positive smoothness constant", self.algorithm))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterateMetrics {
    pub t: usize,
    pub loss: f64,
    pub excess_loss: Option<f64>,
    pub l2_err: Option<f64>,
    /// Step size applied to move from this iterate; absent for the last one.
    pub eta_t: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub iterates: Vec<Vector>,
    pub metrics: Vec<IterateMetrics>,
    /// Per-coordinate variance of the injected noise, for private runs.
    pub noise_variance: Option<f64>,
    /// Number of Gaussian noise vectors drawn.
    pub noise_draws: usize,
    pub seed: u64,
    pub config: OptimizerConfig,
}

impl Trajectory {
    pub fn last(&self) -> &Vector {
        self.iterates.last().expect("trajectories are never empty")
    }

    pub fn final_metrics(&self) -> &IterateMetrics {
        self.metrics.last().expect("trajectories are never empty")
    }

    /// `t,loss,excess_loss,l2_err,eta_t` rows; absent values are left empty.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "loss", "excess_loss", "l2_err", "eta_t"])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for m in &self.metrics {
            w.write_record([
                m.t.to_string(),
                m.loss.to_string(),
                opt(m.excess_loss),
                opt(m.l2_err),
                opt(m.eta_t),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

enum Estimator {
    Mean,
    Gmom(GmomConfig),
}

/// Gradient oracle over a dataset.
pub struct DataOracle<'a> {
    data: &'a Dataset,
    model: &'a LossModel,
    chunks: Option<Vec<Range<usize>>>,
    estimator: Estimator,
    noise: Option<(f64, ChaCha8Rng)>,
    draws: usize,
}

impl<'a> DataOracle<'a> {
    /// Exact full-sample gradients.
    pub fn exact(data: &'a Dataset, model: &'a LossModel) -> Self {
        DataOracle {
            data,
            model,
            chunks: None,
            estimator: Estimator::Mean,
            noise: None,
            draws: 0,
        }
    }

    pub fn noise_draws(&self) -> usize {
        self.draws
    }

    fn rows(&self, step: usize) -> Result<Range<usize>> {
        match &self.chunks {
            None => Ok(0..self.data.n()),
            Some(c) => c
                .get(step)
                .cloned()
                .ok_or_else(|| invalid(format!("no data chunk for step {step}"))),
        }
    }
}

impl GradientOracle for DataOracle<'_> {
    fn dim(&self) -> usize {
        self.data.p()
    }

    fn gradient(&mut self, step: usize, theta: &Vector) -> Result<Vector> {
        let rows = self.rows(step)?;
        let mut g = match &self.estimator {
            Estimator::Mean => self.model.value_and_gradient_on(theta, self.data, rows)?.1,
            Estimator::Gmom(cfg) => {
                // Bucket means are mean gradients over contiguous row blocks.
                let estimate = || -> Result<Vector> {
                    let buckets = bucket_ranges(rows.len(), bucket_count(cfg.failure_prob)?)?;
                    let means = buckets
                        .into_iter()
                        .map(|b| {
                            let r = rows.start + b.start..rows.start + b.end;
                            Ok(self.model.value_and_gradient_on(theta, self.data, r)?.1)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    Ok(geometric_median(&means, cfg.tol, cfg.max_iter)?.point)
                };
                estimate().map_err(|e| e.context(format!("gradient estimate at step {step}")))?
            }
        };
        if let Some((var, rng)) = &mut self.noise {
            let sd = var.sqrt();
            for gi in g.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *gi += sd * z;
            }
            self.draws += 1;
        }
        Ok(g)
    }
}

fn build_oracle<'a>(
    data: &'a Dataset,
    model: &'a LossModel,
    config: &OptimizerConfig,
    source: &GradSource,
) -> Result<(DataOracle<'a>, Option<f64>)> {
    let alg = config.algorithm;
    let fw = matches!(
        alg,
        Algorithm::FwClassic | Algorithm::FwAccel | Algorithm::FwAccelPrivate | Algorithm::FwClassicPrivate
    );
    if matches!(alg, Algorithm::FwAccelPrivate | Algorithm::FwClassicPrivate) && !matches!(source, GradSource::Private { .. }) {
        return Err(invalid(format!("{alg} needs a private gradient source")));
    }
    let mut oracle = DataOracle::exact(data, model);
    let mut variance = None;
    match *source {
        GradSource::Exact => {}
        GradSource::Private { epsilon, delta, lipschitz } => {
            let (variant, n) = if fw {
                let v = match alg {
                    Algorithm::FwClassic | Algorithm::FwClassicPrivate => NoiseVariant::Classic,
                    _ => NoiseVariant::Accelerated,
                };
                (v, data.n())
            } else {
                let chunks = split_chunks(data.n(), config.steps)?;
                let size = chunks[0].len();
                oracle.chunks = Some(chunks);
                (NoiseVariant::ChunkedGd, size)
            };
            let var = noise_variance(lipschitz, n, config.steps, epsilon, delta, variant)?;
            oracle.noise = Some((var, stream_rng(config.seed, NOISE_STREAM)));
            variance = Some(var);
        }
        GradSource::Robust { failure_prob } => {
            if !(failure_prob > 0.0 && failure_prob < 1.0) {
                return Err(invalid("failure probability must lie in (0, 1)"));
            }
            let per_step = failure_prob / config.steps.max(1) as f64;
            oracle.estimator = Estimator::Gmom(GmomConfig::new(per_step));
            if config.chunking == Chunking::Split {
                oracle.chunks = Some(split_chunks(data.n(), config.steps)?);
            }
        }
    }
    Ok((oracle, variance))
}

fn finish(
    data: &Dataset,
    model: &LossModel,
    config: &OptimizerConfig,
    path: Path,
    noise_variance: Option<f64>,
    noise_draws: usize,
) -> Result<Trajectory> {
    let metrics = path
        .iterates
        .iter()
        .enumerate()
        .map(|(t, theta)| {
            let loss = model.empirical_value(theta, data)?;
            Ok(IterateMetrics {
                t,
                loss,
                excess_loss: config.reference_loss.map(|r| loss - r),
                l2_err: data.theta_star.as_ref().map(|s| (theta - s).norm()),
                eta_t: step_size_at(&path, t),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Trajectory {
        iterates: path.iterates,
        metrics,
        noise_variance,
        noise_draws,
        seed: config.seed,
        config: config.clone(),
    })
}

fn step_size_at(path: &Path, t: usize) -> Option<f64> {
    // Nesterov paths carry one more iterate than step sizes before the first step.
    let offset = path.iterates.len() - 1 - path.step_sizes.len();
    t.checked_sub(offset).and_then(|k| path.step_sizes.get(k).copied())
}

/// Frank-Wolfe (classic or accelerated, optionally private or robust).
pub fn run_fw(
    data: &Dataset,
    model: &LossModel,
    constraint: &ConstraintSet,
    config: &OptimizerConfig,
    source: &GradSource,
) -> Result<Trajectory> {
    let radius = constraint.require_radius("Frank-Wolfe")?;
    let schedule = match config.algorithm {
        Algorithm::FwClassic | Algorithm::FwClassicPrivate => FwStep::Classic,
        Algorithm::FwAccel | Algorithm::FwAccelPrivate => FwStep::Fixed(match config.step_size {
            Some(s) => s,
            None => {
                let floor = config
                    .grad_floor
                    .filter(|r| *r > 0.0)
                    .ok_or_else(|| invalid("accelerated Frank-Wolfe needs a positive gradient floor"))?;
                accel_step_size(1.0 / radius, floor, config.need_smoothness()?)
            }
        }),
        other => return Err(invalid(format!("{other} is not a Frank-Wolfe method"))),
    };
    let theta0 = config.start(data.p(), &config.theta0)?;
    let (mut oracle, var) = build_oracle(data, model, config, source)?;
    let path = frank_wolfe(&mut oracle, radius, schedule, config.steps, &theta0)?;
    let draws = oracle.noise_draws();
    finish(data, model, config, path, var, draws)
}

/// Projected gradient descent; the projection is the identity over all space.
pub fn run_pgd(
    data: &Dataset,
    model: &LossModel,
    constraint: &ConstraintSet,
    config: &OptimizerConfig,
    source: &GradSource,
) -> Result<Trajectory> {
    if config.algorithm != Algorithm::Pgd {
        return Err(invalid(format!("{} is not projected gradient descent", config.algorithm)));
    }
    let step = match config.step_size {
        Some(s) => s,
        None => {
            let smooth = config.need_smoothness()?;
            match config.strong_convexity {
                Some(sc) if sc > 0.0 => 2.0 / (sc + smooth),
                _ => 1.0 / smooth,
            }
        }
    };
    let theta0 = config.start(data.p(), &config.theta0)?;
    let (mut oracle, var) = build_oracle(data, model, config, source)?;
    let path = projected_gd(&mut oracle, constraint, step, config.steps, &theta0)?;
    let draws = oracle.noise_draws();
    finish(data, model, config, path, var, draws)
}

/// Nesterov's method over all space, strongly convex or smooth regime.
pub fn run_nesterov(
    data: &Dataset,
    model: &LossModel,
    config: &OptimizerConfig,
    source: &GradSource,
) -> Result<Trajectory> {
    let smooth = config.need_smoothness()?;
    let momentum = match config.algorithm {
        Algorithm::NesterovSc => {
            let m = match (config.momentum, config.strong_convexity) {
                (Some(m), _) => m,
                (None, Some(sc)) if sc > 0.0 => strongly_convex_momentum(smooth, sc),
                _ => return Err(invalid("nesterov-sc needs a positive strong convexity constant")),
            };
            Momentum::Constant { value: m }
        }
        Algorithm::NesterovSmooth => match config.momentum {
            Some(m) => Momentum::Constant { value: m },
            None => Momentum::Increasing,
        },
        other => return Err(invalid(format!("{other} is not a Nesterov method"))),
    };
    let step = config.step_size.unwrap_or(1.0 / smooth);
    let theta0 = config.start(data.p(), &config.theta0)?;
    let theta1 = match &config.theta1 {
        Some(_) => config.start(data.p(), &config.theta1)?,
        None => theta0.clone(),
    };
    let (mut oracle, var) = build_oracle(data, model, config, source)?;
    let path = nesterov(&mut oracle, step, momentum, config.steps, &theta0, &theta1)?;
    let draws = oracle.noise_draws();
    finish(data, model, config, path, var, draws)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpSgdConfig {
    pub epsilon: f64,
    pub delta: f64,
    #[serde(default)]
    pub seed: u64,
    /// Largest sample size accepted (the method runs `n^2` steps).
    #[serde(default = "default_max_n")]
    pub max_n: usize,
    /// Lipschitz constant; derived from the loss domain bounds when absent.
    #[serde(default)]
    pub lipschitz: Option<f64>,
    #[serde(default)]
    pub theta0: Option<Vec<f64>>,
    #[serde(default)]
    pub reference_loss: Option<f64>,
}

fn default_max_n() -> usize {
    400
}

impl DpSgdConfig {
    pub fn new(epsilon: f64, delta: f64, seed: u64) -> Self {
        DpSgdConfig {
            epsilon,
            delta,
            seed,
            max_n: default_max_n(),
            lipschitz: None,
            theta0: None,
            reference_loss: None,
        }
    }
}

/// Private SGD over a ball: `n^2` steps, one sample per step drawn without
/// replacement within each pass, Gaussian noise on every per-sample gradient.
pub fn run_dp_sgd(data: &Dataset, model: &LossModel, constraint: &ConstraintSet, config: &DpSgdConfig) -> Result<Trajectory> {
    let radius = constraint.require_radius("DP-SGD")?;
    let n = data.n();
    let p = data.p();
    if n > config.max_n {
        return Err(invalid(format!(
            "DP-SGD runs n^2 steps; n = {n} exceeds the limit {} (raise max_n to override)",
            config.max_n
        )));
    }
    let lipschitz = match config.lipschitz {
        Some(l) => l,
        None => curvature_constants(model, CurvatureSource::Dataset(data), radius)?.require_lipschitz()?,
    };
    let steps = n * n;
    let var = noise_variance(lipschitz, n, steps, config.epsilon, config.delta, NoiseVariant::Sgd)?;
    let sd = var.sqrt();
    let diameter = 2.0 * radius;
    let denom = (n * n) as f64 * lipschitz + p as f64 * var;

    let mut opt_cfg = OptimizerConfig::new(Algorithm::DpSgd, steps);
    opt_cfg.seed = config.seed;
    opt_cfg.theta0 = config.theta0.clone();
    opt_cfg.reference_loss = config.reference_loss;
    let mut theta = opt_cfg.start(p, &config.theta0)?;
    theta = project_l2_ball(&theta, radius);

    let mut noise_rng = stream_rng(config.seed, NOISE_STREAM);
    let mut order_rng = stream_rng(config.seed, SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..n).collect();
    let mut path = Path {
        iterates: vec![theta.clone()],
        step_sizes: Vec::with_capacity(steps),
    };
    for t in 0..steps {
        if t % n == 0 {
            order.shuffle(&mut order_rng);
        }
        let i = order[t % n];
        let mut g = model.per_sample_gradient(&theta, &data.row(i), data.y[i])?;
        for gi in g.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut noise_rng);
            *gi += sd * z;
        }
        // Steps are counted from one so the first step is finite.
        let step = if denom > 0.0 { diameter / ((t + 1) as f64 * denom).sqrt() } else { 0.0 };
        theta = project_l2_ball(&(&theta - g * step), radius);
        path.iterates.push(theta.clone());
        path.step_sizes.push(step);
    }
    finish(data, model, &opt_cfg, path, Some(var), steps)
}

/// Dispatch on `config.algorithm`.
pub fn run(
    data: &Dataset,
    model: &LossModel,
    constraint: &ConstraintSet,
    config: &OptimizerConfig,
    source: &GradSource,
) -> Result<Trajectory> {
    match config.algorithm {
        Algorithm::FwClassic | Algorithm::FwAccel | Algorithm::FwAccelPrivate | Algorithm::FwClassicPrivate => {
            run_fw(data, model, constraint, config, source)
        }
        Algorithm::Pgd => run_pgd(data, model, constraint, config, source),
        Algorithm::NesterovSc | Algorithm::NesterovSmooth => {
            if *constraint != ConstraintSet::AllSpace {
                return Err(invalid("Nesterov's method runs over all space only"));
            }
            run_nesterov(data, model, config, source)
        }
        Algorithm::DpSgd => {
            let (epsilon, delta, lipschitz) = match *source {
                GradSource::Private { epsilon, delta, lipschitz } => (epsilon, delta, lipschitz),
                _ => return Err(invalid("dp-sgd needs a private gradient source")),
            };
            let mut cfg = DpSgdConfig::new(epsilon, delta, config.seed);
            cfg.lipschitz = Some(lipschitz);
            cfg.theta0 = config.theta0.clone();
            cfg.reference_loss = config.reference_loss;
            run_dp_sgd(data, model, constraint, &cfg)
        }
    }
    .map(|mut tr| {
        if config.algorithm.is_private() {
            tr.config.algorithm = config.algorithm;
        }
        tr
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[f64]) -> Vector {
        Vector::from_row_slice(xs)
    }

    #[test]
    fn lmo_and_projection_by_hand() {
        assert!((lmo_l2_ball(&v(&[3.0, 4.0]), 1.0) - v(&[-0.6, -0.8])).norm() < 1e-15);
        assert_eq!(lmo_l2_ball(&v(&[0.0, 0.0]), 1.0), v(&[0.0, 0.0]));
        assert!((project_l2_ball(&v(&[3.0, 4.0]), 1.0) - v(&[0.6, 0.8])).norm() < 1e-15);
        assert_eq!(project_l2_ball(&v(&[0.3, 0.4]), 1.0), v(&[0.3, 0.4]));
    }

    #[test]
    fn chunk_arithmetic() {
        let c = split_chunks(100, 7).unwrap();
        assert_eq!(c.len(), 7);
        assert!(c.iter().all(|r| r.len() == 14));
        assert_eq!(c.last().unwrap().end, 98);
        assert_eq!(split_chunks(5, 1).unwrap(), vec![0..5]);
        assert_eq!(split_chunks(3, 3).unwrap(), vec![0..1, 1..2, 2..3]);
        assert!(split_chunks(3, 4).is_err());
    }

    #[test]
    fn window_edges_at_one() {
        assert_eq!(nesterov_window_lower(1.0), 0.0);
        assert_eq!(nesterov_window_upper(1.0), 0.5);
    }

    #[test]
    fn zero_slope_recovers_noiseless_rate() {
        let r = stability_constants(3.0, 1.0, 0.0).unwrap();
        assert!((r.k_gd - 0.5).abs() < 1e-15);
        assert!(r.stable_gd);
        assert!(stability_constants(1.0, 0.0, 0.1).is_err());
    }

    #[test]
    fn trust_region_interior_and_boundary() {
        let h = Matrix::from_diagonal(&v(&[2.0, 1.0]));
        let inside = ball_quadratic_minimizer(&h, &v(&[0.2, 0.1]), 1.0).unwrap();
        assert!((inside - v(&[0.1, 0.1])).norm() < 1e-14);
        // Identity Hessian: boundary solution is the radial projection.
        let eye = Matrix::identity(2, 2);
        let out = ball_quadratic_minimizer(&eye, &v(&[3.0, 4.0]), 1.0).unwrap();
        assert!((out - v(&[0.6, 0.8])).norm() < 1e-12);
    }

    #[test]
    fn algorithm_names_round_trip() {
        for a in Algorithm::ALL {
            assert_eq!(a.as_str().parse::<Algorithm>().unwrap(), a);
        }
    }
}
