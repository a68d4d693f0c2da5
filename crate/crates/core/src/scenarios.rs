//! The seven simulation protocols, a deterministic cell runner, result
//! tables and log-log slope fits.
//!
//! A cell is one `(variant, n, epsilon, algorithm, seed)` combination. The
//! dataset of a cell depends only on `(scenario, variant, n, seed)`, so all
//! algorithms and privacy levels in a scenario are compared on the same
//! samples. Optimizer noise gets its own derived seed.

use std::cmp::Ordering;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data_synth::{gen_linear_heavy_tailed, gen_logistic_glm, gen_separable, CovariateLaw, Dataset, NoiseSpec};
use crate::error::{invalid, Error, Result};
use crate::losses::{curvature_constants, logistic_curvature, CurvatureSource, LossFamily, LossModel};
use crate::optimizers::{
    accel_rate, logistic_grad_floor, reference_minimum, run, Algorithm, Chunking, ConstraintSet, GradSource,
    OptimizerConfig, Trajectory,
};
use crate::rng::derive_seed;
use crate::{Matrix, Vector};

/// Smallest sample size after scaling.
pub const MIN_SCALED_N: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ScenarioId {
    F1,
    F2,
    F3,
    F4,
    F5,
    F6,
    F7,
}

impl ScenarioId {
    pub const ALL: [ScenarioId; 7] = [
        ScenarioId::F1,
        ScenarioId::F2,
        ScenarioId::F3,
        ScenarioId::F4,
        ScenarioId::F5,
        ScenarioId::F6,
        ScenarioId::F7,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioId::F1 => "F1",
            ScenarioId::F2 => "F2",
            ScenarioId::F3 => "F3",
            ScenarioId::F4 => "F4",
            ScenarioId::F5 => "F5",
            ScenarioId::F6 => "F6",
            ScenarioId::F7 => "F7",
        }
    }

    /// Default scale for quick runs; the three largest protocols shrink to 0.2.
    pub fn desk_scale(self) -> f64 {
        match self {
            ScenarioId::F3 | ScenarioId::F5 | ScenarioId::F6 => 0.2,
            _ => 1.0,
        }
    }

    fn index(self) -> u64 {
        self as u64 + 1
    }
}

impl fmt::Display for ScenarioId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScenarioId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ScenarioId::ALL
            .into_iter()
            .find(|id| id.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| invalid(format!("unknown scenario `{s}` (expected F1..F7)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub id: ScenarioId,
    pub n_grid: Vec<usize>,
    pub p: usize,
    /// Privacy levels; empty for non-private protocols.
    #[serde(default)]
    pub epsilons: Vec<f64>,
    #[serde(default)]
    pub delta: Option<f64>,
    /// Overall failure probability of robust gradient estimation.
    #[serde(default)]
    pub failure_prob: Option<f64>,
    pub seeds: Vec<u64>,
    pub algorithms: Vec<Algorithm>,
    /// Covariance ranks swept by F6; empty elsewhere.
    #[serde(default)]
    pub ranks: Vec<usize>,
    /// Fixed iteration count, when the protocol pins one.
    #[serde(default)]
    pub steps: Option<usize>,
    /// Samples fed to the robust estimator at each step.
    #[serde(default)]
    pub chunking: Chunking,
    /// Factor applied to `n_grid`; 1 means the grid is as catalogued.
    #[serde(default = "unit_scale")]
    pub scale: f64,
}

fn unit_scale() -> f64 {
    1.0
}

fn default_seeds() -> Vec<u64> {
    (1..=20).collect()
}

/// All seven protocols with their catalogued parameters.
pub fn scenario_catalog() -> Vec<ScenarioSpec> {
    let base = |id, n_grid: Vec<usize>, p, algorithms: Vec<Algorithm>| ScenarioSpec {
        id,
        n_grid,
        p,
        epsilons: Vec::new(),
        delta: None,
        failure_prob: None,
        seeds: default_seeds(),
        algorithms,
        ranks: Vec::new(),
        steps: None,
        chunking: Chunking::Split,
        scale: 1.0,
    };
    let private_fw = vec![Algorithm::FwAccelPrivate, Algorithm::FwClassicPrivate];
    let robust_fw = vec![Algorithm::FwAccel, Algorithm::FwClassic];
    let gd_pair = vec![Algorithm::Pgd, Algorithm::NesterovSc];
    vec![
        ScenarioSpec {
            epsilons: vec![0.5, 0.9],
            delta: Some(1.0 / 3.0),
            ..base(ScenarioId::F1, vec![1250, 2500, 5000, 10_000], 10, private_fw.clone())
        },
        ScenarioSpec {
            epsilons: vec![0.5, 0.9],
            delta: Some(1.0 / 3.0),
            failure_prob: Some(1.0 / 3.0),
            ..base(ScenarioId::F2, vec![1000, 2000, 4000, 5500], 3, private_fw)
        },
        ScenarioSpec {
            epsilons: vec![0.1, 0.9],
            delta: Some(1.0 / 3.0),
            ..base(
                ScenarioId::F3,
                vec![12_500, 25_000, 50_000, 100_000],
                10,
                vec![Algorithm::Pgd, Algorithm::NesterovSmooth],
            )
        },
        ScenarioSpec {
            failure_prob: Some(0.1),
            steps: Some(20),
            chunking: Chunking::Reuse,
            ..base(ScenarioId::F4, vec![600, 900, 1200, 1500], 100, gd_pair.clone())
        },
        ScenarioSpec {
            failure_prob: Some(0.1),
            ..base(ScenarioId::F5, vec![7500, 15_000, 30_000, 60_000], 100, gd_pair)
        },
        ScenarioSpec {
            failure_prob: Some(0.1),
            ranks: vec![3, 6, 9],
            chunking: Chunking::Reuse,
            ..base(ScenarioId::F6, vec![6250, 12_500, 25_000, 50_000], 10, robust_fw.clone())
        },
        ScenarioSpec {
            failure_prob: Some(0.1),
            chunking: Chunking::Reuse,
            ..base(ScenarioId::F7, vec![2500, 5000, 10_000, 20_000], 10, robust_fw)
        },
    ]
}

/// Catalogued spec for `id`.
pub fn scenario(id: ScenarioId) -> ScenarioSpec {
    scenario_catalog()
        .into_iter()
        .find(|s| s.id == id)
        .expect("catalog covers every id")
}

/// `max(floor(n * scale), MIN_SCALED_N)`.
pub fn scaled_n(n: usize, scale: f64) -> usize {
    ((n as f64 * scale).floor() as usize).max(MIN_SCALED_N)
}

impl ScenarioSpec {
    /// Copy with every sample size shrunk by `scale`; the factor is recorded.
    pub fn scaled(&self, scale: f64) -> Result<ScenarioSpec> {
        if !(scale > 0.0 && scale <= 1.0) {
            return Err(invalid(format!("scale must lie in (0, 1], got {scale}")));
        }
        let mut out = self.clone();
        out.n_grid = self.n_grid.iter().map(|&n| scaled_n(n, scale)).collect();
        out.scale = self.scale * scale;
        Ok(out)
    }

    /// Overlay the keys of a JSON object onto this spec.
    pub fn merge_json(&self, overrides: &serde_json::Value) -> Result<ScenarioSpec> {
        let patch = overrides
            .as_object()
            .ok_or_else(|| invalid("scenario overrides must be a JSON object"))?;
        let mut value = serde_json::to_value(self)?;
        let target = value.as_object_mut().expect("specs serialize to objects");
        for (k, v) in patch {
            if !target.contains_key(k) {
                return Err(invalid(format!("unknown scenario field `{k}`")));
            }
            target.insert(k.clone(), v.clone());
        }
        let merged: ScenarioSpec = serde_json::from_value(value)?;
        merged.validate()?;
        Ok(merged)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_grid.is_empty() || self.n_grid.contains(&0) {
            return Err(invalid("n_grid must hold positive sample sizes"));
        }
        if self.seeds.is_empty() {
            return Err(invalid("at least one seed is required"));
        }
        if self.algorithms.is_empty() {
            return Err(invalid("at least one algorithm is required"));
        }
        if self.p == 0 {
            return Err(invalid("p must be positive"));
        }
        if self.id == ScenarioId::F6 && (self.ranks.is_empty() || self.ranks.iter().any(|&m| m == 0 || m >= self.p)) {
            return Err(invalid("F6 ranks must lie in 1..p"));
        }
        Ok(())
    }

    /// Every cell in the order rows are emitted.
    pub fn cells(&self) -> Vec<Cell> {
        let variants: Vec<Option<usize>> = if self.ranks.is_empty() {
            vec![None]
        } else {
            self.ranks.iter().map(|&m| Some(m)).collect()
        };
        let epsilons: Vec<Option<f64>> = if self.epsilons.is_empty() {
            vec![None]
        } else {
            self.epsilons.iter().map(|&e| Some(e)).collect()
        };
        let mut out = Vec::new();
        for &rank in &variants {
            for &n in &self.n_grid {
                for &epsilon in &epsilons {
                    for &algorithm in &self.algorithms {
                        for &seed in &self.seeds {
                            out.push(Cell {
                                rank,
                                n,
                                epsilon,
                                algorithm,
                                seed,
                            });
                        }
                    }
                }
            }
        }
        out
    }

    fn label(&self, cell: &Cell) -> String {
        match cell.rank {
            Some(m) => format!("{}:m{}", self.id, m),
            None => self.id.to_string(),
        }
    }

    fn metrics(&self) -> &'static [Metric] {
        match self.id {
            ScenarioId::F1 => &[Metric::ExcessEmpiricalLoss],
            ScenarioId::F2 => &[Metric::ExcessEmpiricalLoss, Metric::L2Error],
            _ => &[Metric::L2Error, Metric::ExcessRiskProxy],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub rank: Option<usize>,
    pub n: usize,
    pub epsilon: Option<f64>,
    pub algorithm: Algorithm,
    pub seed: u64,
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n={}", self.n)?;
        if let Some(m) = self.rank {
            write!(f, " m={m}")?;
        }
        if let Some(e) = self.epsilon {
            write!(f, " epsilon={e}")?;
        }
        write!(f, " algorithm={} seed={}", self.algorithm, self.seed)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    ExcessEmpiricalLoss,
    L2Error,
    ExcessRiskProxy,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::ExcessEmpiricalLoss => "excess_empirical_loss",
            Metric::L2Error => "l2_error",
            Metric::ExcessRiskProxy => "excess_risk_proxy",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [Metric::ExcessEmpiricalLoss, Metric::L2Error, Metric::ExcessRiskProxy]
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| invalid(format!("unknown metric `{s}`")))
    }
}

/// Everything needed to run one cell.
pub struct Prepared {
    pub data: Dataset,
    pub model: LossModel,
    pub constraint: ConstraintSet,
    pub config: OptimizerConfig,
    pub source: GradSource,
    /// Population second moment, for the excess-risk proxy.
    pub covariance: Option<Matrix>,
}

/// Output of one cell.
pub struct CellOutcome {
    pub trajectory: Trajectory,
    pub metrics: Vec<(Metric, f64)>,
}

fn steps_from(x: f64) -> usize {
    ((x - 1e-9).ceil() as usize).max(1)
}

fn ones(p: usize) -> Vector {
    Vector::from_element(p, 1.0)
}

fn need<T>(v: Option<T>, what: &str) -> Result<T> {
    v.ok_or_else(|| invalid(format!("scenario needs {what}")))
}

fn private(spec: &ScenarioSpec, cell: &Cell, lipschitz: f64) -> Result<GradSource> {
    Ok(GradSource::Private {
        epsilon: need(cell.epsilon, "an epsilon")?,
        delta: need(spec.delta, "a delta")?,
        lipschitz,
    })
}

fn robust(spec: &ScenarioSpec) -> Result<GradSource> {
    Ok(GradSource::Robust {
        failure_prob: need(spec.failure_prob, "a failure probability")?,
    })
}

/// Radius of the ball used by the logistic protocol.
pub fn logistic_radius(p: usize, n: usize) -> f64 {
    let p = p as f64;
    12.0 * p / (logistic_curvature(p.sqrt()) * (n as f64).powf(0.4))
}

/// Iteration count of classic private Frank-Wolfe.
pub fn classic_fw_steps(n: usize, epsilon: f64, curvature: f64, lipschitz: f64, width: f64) -> usize {
    steps_from((n as f64 * epsilon * curvature / (lipschitz * width)).powf(2.0 / 3.0))
}

/// Iterations for projected GD in the strongly convex robust protocol.
pub fn pgd_steps(n: usize, smoothness: f64, strong_convexity: f64) -> usize {
    steps_from((n as f64).sqrt().ln() / ((smoothness + strong_convexity) / smoothness).ln())
}

/// Iterations for Nesterov's method in the strongly convex robust protocol.
pub fn nesterov_steps(n: usize, smoothness: f64, strong_convexity: f64) -> usize {
    let rate = 1.0 - (strong_convexity / smoothness).sqrt();
    steps_from((n as f64).sqrt().ln() / (0.5 * (1.0 / rate).ln()))
}

/// Covariance spectrum of the strongly convex robust protocols: evenly
/// spaced between 2/3 and 1.
pub fn graded_spectrum(p: usize) -> Vec<f64> {
    let (lo, hi) = (2.0 / 3.0, 1.0);
    if p == 1 {
        return vec![hi];
    }
    (0..p).map(|j| lo + (hi - lo) * j as f64 / (p - 1) as f64).collect()
}

/// Norm of the part of `theta_star` outside the first `m` coordinates.
pub fn unidentified_norm(theta_star: &Vector, m: usize) -> f64 {
    theta_star.rows(m, theta_star.len() - m).norm()
}

/// Ball radius, curvature floor, penalty and iteration count of accelerated
/// Frank-Wolfe in the rank-deficient protocol.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RankDeficientAccel {
    pub residual: f64,
    pub penalty: f64,
    pub radius: f64,
    pub grad_floor: f64,
    pub steps: usize,
}

pub fn rank_deficient_accel(theta_star: &Vector, m: usize, n: usize) -> RankDeficientAccel {
    let p = theta_star.len();
    let residual = unidentified_norm(theta_star, m);
    let penalty = residual / 3.0;
    let cov_diag: Vec<f64> = (0..p).map(|j| if j < m { 1.0 } else { 0.0 }).collect();
    let shrunk = |shift: f64| -> f64 {
        cov_diag
            .iter()
            .zip(theta_star.iter())
            .map(|(s, t)| (s * t / (s + shift)).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let radius = 0.5 * (shrunk(2.0 * residual) + shrunk(residual));
    let top = theta_star.rows(0, m).norm();
    let s = 1.0;
    let grad_floor = penalty * s * s * top * residual / (2.0 * (s + residual).powi(3));
    RankDeficientAccel {
        residual,
        penalty,
        radius,
        grad_floor,
        steps: steps_from((n as f64).ln() / (1.0 / accel_rate(1.0 / radius, grad_floor, 1.0 + penalty)).ln()),
    }
}

/// Build the data, loss, constraint and optimizer configuration of a cell.
pub fn prepare_cell(spec: &ScenarioSpec, cell: &Cell) -> Result<Prepared> {
    let p = spec.p;
    let n = cell.n;
    let data_seed = derive_seed(
        cell.seed,
        &[spec.id.index(), cell.rank.unwrap_or(0) as u64, n as u64],
    );
    let mut config = OptimizerConfig::new(cell.algorithm, 1);
    config.seed = derive_seed(
        data_seed,
        &[
            Algorithm::ALL.iter().position(|a| *a == cell.algorithm).unwrap_or(0) as u64,
            cell.epsilon.map(f64::to_bits).unwrap_or(0),
        ],
    );
    config.chunking = spec.chunking;
    let heavy = NoiseSpec::StudentT { nu: 3.0 };

    let prepared = match spec.id {
        ScenarioId::F1 => {
            let data = gen_separable(n, p, data_seed)?;
            let sp = (p as f64).sqrt();
            let radius = 1.0 / (4.0 * sp);
            let model = LossModel::squared().with_bounds(sp, 1.0);
            let curv = curvature_constants(&model, CurvatureSource::Dataset(&data), radius)?;
            let lipschitz = sp + p as f64 * radius;
            config.smoothness = Some(curv.smoothness);
            match cell.algorithm {
                Algorithm::FwAccelPrivate | Algorithm::FwAccel => {
                    // Unit ratio between gradient floor and smoothness over the set.
                    let floor = curv.smoothness * radius;
                    config.grad_floor = Some(floor);
                    let c = accel_rate(1.0 / radius, floor, curv.smoothness);
                    config.steps = steps_from((n as f64).ln() / (1.0 / c).ln());
                }
                _ => {
                    let eps = need(cell.epsilon, "an epsilon")?;
                    config.steps = classic_fw_steps(n, eps, curv.fw_curvature, lipschitz, curv.gaussian_width);
                }
            }
            Prepared {
                source: private(spec, cell, lipschitz)?,
                constraint: ConstraintSet::ball(radius)?,
                data,
                model,
                config,
                covariance: None,
            }
        }
        ScenarioId::F2 => {
            let theta_star = ones(p);
            let half = 1.0 / (p as f64).sqrt();
            let data = gen_logistic_glm(n, p, &theta_star, half, data_seed)?;
            let radius = logistic_radius(p, n);
            let model = LossModel::new(LossFamily::GlmLogistic)?.with_bounds(1.0, 1.0);
            let curv = curvature_constants(&model, CurvatureSource::Dataset(&data), radius)?;
            let lipschitz = 2.0;
            config.smoothness = Some(curv.smoothness);
            match cell.algorithm {
                Algorithm::FwAccelPrivate | Algorithm::FwAccel => {
                    let floor = logistic_grad_floor(n, 1.0, need(spec.failure_prob, "a failure probability")?);
                    if !(floor > 0.0) {
                        return Err(invalid(format!("gradient floor is not positive at n = {n}")));
                    }
                    config.grad_floor = Some(floor);
                    config.steps = steps_from((n as f64).powf(0.4) * (n as f64).ln());
                }
                _ => {
                    let eps = need(cell.epsilon, "an epsilon")?;
                    config.steps = classic_fw_steps(n, eps, curv.fw_curvature, lipschitz, curv.gaussian_width);
                }
            }
            Prepared {
                source: private(spec, cell, lipschitz)?,
                constraint: ConstraintSet::ball(radius)?,
                data,
                model,
                config,
                covariance: None,
            }
        }
        ScenarioId::F3 => {
            let theta_star = ones(p);
            let law = CovariateLaw::UniformBox {
                half_width: 1.0 / (p as f64).sqrt(),
            };
            let data = gen_linear_heavy_tailed(n, p, &theta_star, &law, heavy, data_seed)?;
            let model = LossModel::new(LossFamily::PseudoHuber { scale: 0.2 })?;
            let smoothness = 1.0 / (3.0 * p as f64);
            config.smoothness = Some(smoothness);
            config.step_size = Some(1.0 / smoothness);
            config.steps = steps_from((n as f64).powf(0.2));
            if cell.algorithm == Algorithm::NesterovSmooth {
                config.theta1 = Some(vec![1.1; p]);
            }
            Prepared {
                source: private(spec, cell, 0.2)?,
                constraint: ConstraintSet::AllSpace,
                data,
                model,
                config,
                covariance: Some(law.covariance(p)),
            }
        }
        ScenarioId::F4 | ScenarioId::F5 => {
            let theta_star = ones(p);
            let law = CovariateLaw::Diagonal {
                values: graded_spectrum(p),
            };
            let data = gen_linear_heavy_tailed(n, p, &theta_star, &law, heavy, data_seed)?;
            let (smoothness, strong) = (1.0, 2.0 / 3.0);
            config.smoothness = Some(smoothness);
            config.strong_convexity = Some(strong);
            config.steps = match (spec.steps, cell.algorithm) {
                (Some(t), _) => t,
                (None, Algorithm::NesterovSc) => nesterov_steps(n, smoothness, strong),
                (None, _) => pgd_steps(n, smoothness, strong),
            };
            Prepared {
                source: robust(spec)?,
                constraint: ConstraintSet::AllSpace,
                data,
                model: LossModel::squared(),
                config,
                covariance: Some(law.covariance(p)),
            }
        }
        ScenarioId::F6 => {
            let m = need(cell.rank, "a covariance rank")?;
            let theta_star = ones(p) / (p as f64).sqrt();
            let law = CovariateLaw::RankM { m };
            let data = gen_linear_heavy_tailed(n, p, &theta_star, &law, heavy, data_seed)?;
            let (penalty, radius) = match cell.algorithm {
                Algorithm::FwAccel => {
                    let a = rank_deficient_accel(&theta_star, m, n);
                    config.grad_floor = Some(a.grad_floor);
                    config.steps = a.steps;
                    (a.penalty, a.radius)
                }
                _ => {
                    config.steps = steps_from((n as f64).cbrt());
                    ((n as f64).powf(-1.0 / 9.0), theta_star.norm())
                }
            };
            config.smoothness = Some(1.0 + penalty);
            Prepared {
                source: robust(spec)?,
                constraint: ConstraintSet::ball(radius)?,
                data,
                model: LossModel::new(LossFamily::Ridge { penalty })?,
                config,
                covariance: Some(law.covariance(p)),
            }
        }
        ScenarioId::F7 => {
            let theta_star = ones(p);
            let law = CovariateLaw::Identity;
            let data = gen_linear_heavy_tailed(n, p, &theta_star, &law, heavy, data_seed)?;
            let gap = 0.5 / (n as f64).powf(0.2);
            let radius = match cell.algorithm {
                Algorithm::FwAccel => {
                    let radius = theta_star.norm() - gap;
                    config.grad_floor = Some(gap);
                    let c = accel_rate(1.0 / radius, gap, 1.0);
                    config.steps = steps_from((n as f64).powf(0.4).ln() / (1.0 / c).ln());
                    radius
                }
                _ => {
                    config.steps = steps_from((n as f64).cbrt());
                    theta_star.norm() + 0.5
                }
            };
            config.smoothness = Some(1.0);
            Prepared {
                source: robust(spec)?,
                constraint: ConstraintSet::ball(radius)?,
                data,
                model: LossModel::squared(),
                config,
                covariance: Some(law.covariance(p)),
            }
        }
    };
    Ok(prepared)
}

/// Run one cell and compute its final metrics.
pub fn run_cell(spec: &ScenarioSpec, cell: &Cell) -> Result<CellOutcome> {
    let inner = || -> Result<CellOutcome> {
        let mut prep = prepare_cell(spec, cell)?;
        let wants_excess = spec.metrics().contains(&Metric::ExcessEmpiricalLoss);
        if wants_excess {
            let (loss, _) = reference_minimum(&prep.data, &prep.model, &prep.constraint)?;
            prep.config.reference_loss = Some(loss);
        }
        let trajectory = run(&prep.data, &prep.model, &prep.constraint, &prep.config, &prep.source)?;
        let last = trajectory.last();
        let fm = trajectory.final_metrics();
        let mut metrics = Vec::new();
        for &metric in spec.metrics() {
            let value = match metric {
                Metric::ExcessEmpiricalLoss => fm.excess_loss,
                Metric::L2Error => fm.l2_err,
                Metric::ExcessRiskProxy => match (&prep.covariance, &prep.data.theta_star) {
                    (Some(cov), Some(star)) => {
                        let d = last - star;
                        Some(0.5 * d.dot(&(cov * &d)))
                    }
                    _ => None,
                },
            };
            if let Some(v) = value {
                metrics.push((metric, v));
            }
        }
        Ok(CellOutcome { trajectory, metrics })
    };
    inner().map_err(|e| e.context(format!("{} cell {}", spec.id, cell)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub scenario: String,
    pub algorithm: Algorithm,
    pub n: usize,
    pub p: usize,
    pub epsilon: Option<f64>,
    pub seed: u64,
    pub metric: Metric,
    pub value: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

fn cmp_opt(a: Option<f64>, b: Option<f64>) -> Ordering {
    match (a, b) {
        (None, None) => Ordering::Equal,
        (None, Some(_)) => Ordering::Less,
        (Some(_), None) => Ordering::Greater,
        (Some(x), Some(y)) => x.total_cmp(&y),
    }
}

impl ResultTable {
    /// Rows ordered by (scenario, algorithm, n, epsilon, seed, metric).
    pub fn sorted(&self) -> ResultTable {
        let mut rows = self.rows.clone();
        rows.sort_by(|a, b| {
            a.scenario
                .cmp(&b.scenario)
                .then_with(|| a.algorithm.as_str().cmp(b.algorithm.as_str()))
                .then(a.n.cmp(&b.n))
                .then_with(|| cmp_opt(a.epsilon, b.epsilon))
                .then(a.seed.cmp(&b.seed))
                .then_with(|| a.metric.as_str().cmp(b.metric.as_str()))
        });
        ResultTable { rows }
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["scenario", "algorithm", "n", "p", "epsilon", "seed", "metric", "value"])?;
        for r in &self.sorted().rows {
            w.write_record([
                r.scenario.clone(),
                r.algorithm.to_string(),
                r.n.to_string(),
                r.p.to_string(),
                r.epsilon.map(|e| e.to_string()).unwrap_or_default(),
                r.seed.to_string(),
                r.metric.to_string(),
                r.value.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }

    pub fn read_csv<R: std::io::Read>(input: R) -> Result<ResultTable> {
        let mut r = csv::Reader::from_reader(input);
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let field = |i: usize| rec.get(i).unwrap_or("");
            let num = |i: usize| -> Result<f64> {
                field(i)
                    .parse::<f64>()
                    .map_err(|_| invalid(format!("bad number `{}` in results csv", field(i))))
            };
            let int = |i: usize| -> Result<u64> {
                field(i)
                    .parse::<u64>()
                    .map_err(|_| invalid(format!("bad integer `{}` in results csv", field(i))))
            };
            rows.push(ResultRow {
                scenario: field(0).to_string(),
                algorithm: field(1).parse()?,
                n: int(2)? as usize,
                p: int(3)? as usize,
                epsilon: if field(4).is_empty() { None } else { Some(num(4)?) },
                seed: int(5)?,
                metric: field(6).parse()?,
                value: num(7)?,
            });
        }
        Ok(ResultTable { rows })
    }

    /// Median of `metric` per sample size, restricted to `algorithm`,
    /// `epsilon` and (when given) one scenario label.
    pub fn medians(
        &self,
        scenario: Option<&str>,
        metric: Metric,
        algorithm: Algorithm,
        epsilon: Option<f64>,
    ) -> Vec<(usize, f64)> {
        let mut by_n: std::collections::BTreeMap<usize, Vec<f64>> = Default::default();
        for r in &self.rows {
            if r.metric == metric
                && r.algorithm == algorithm
                && cmp_opt(r.epsilon, epsilon) == Ordering::Equal
                && scenario.is_none_or(|s| s == r.scenario)
            {
                by_n.entry(r.n).or_default().push(r.value);
            }
        }
        by_n.into_iter().map(|(n, v)| (n, median(v))).collect()
    }
}

/// Median; the mean of the two middle values for even counts.
pub fn median(mut v: Vec<f64>) -> f64 {
    assert!(!v.is_empty(), "median of nothing");
    v.sort_by(f64::total_cmp);
    let k = v.len() / 2;
    if v.len() % 2 == 1 {
        v[k]
    } else {
        0.5 * (v[k - 1] + v[k])
    }
}

/// Write `table` sorted to `path`.
pub fn export_csv(table: &ResultTable, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::from(e).context(format!("writing {}", path.display())))?;
    table.write_csv(std::io::BufWriter::new(file))
}

/// Least-squares slope of `log(median metric)` against `log(n)`.
pub fn fit_log_slope(table: &ResultTable, metric: Metric, algorithm: Algorithm, epsilon: Option<f64>) -> Result<f64> {
    slope_of(&table.medians(None, metric, algorithm, epsilon))
}

/// Least-squares slope of `log(value)` against `log(n)` over `(n, value)` pairs.
pub fn slope_of(points: &[(usize, f64)]) -> Result<f64> {
    if points.len() < 3 {
        return Err(invalid(format!(
            "slope fit needs at least 3 sample sizes, got {}",
            points.len()
        )));
    }
    if let Some((n, v)) = points.iter().find(|(_, v)| !(*v > 0.0)) {
        return Err(invalid(format!("median {v} at n = {n} is not positive")));
    }
    let xs: Vec<f64> = points.iter().map(|(n, _)| (*n as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|(_, v)| v.ln()).collect();
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    Ok(sxy / sxx)
}

fn rows_for(spec: &ScenarioSpec, cell: &Cell, outcome: &CellOutcome) -> Vec<ResultRow> {
    outcome
        .metrics
        .iter()
        .map(|&(metric, value)| ResultRow {
            scenario: spec.label(cell),
            algorithm: cell.algorithm,
            n: cell.n,
            p: spec.p,
            epsilon: cell.epsilon,
            seed: cell.seed,
            metric,
            value,
        })
        .collect()
}

/// Run every cell of `spec` at `scale` on `jobs` worker threads.
/// Results do not depend on `jobs`.
pub fn run_scenario(spec: &ScenarioSpec, scale: f64, jobs: usize) -> Result<ResultTable> {
    spec.validate()?;
    let spec = spec.scaled(scale)?;
    let cells = spec.cells();
    let eval = |cell: &Cell| -> Result<Vec<ResultRow>> { run_cell(&spec, cell).map(|o| rows_for(&spec, cell, &o)) };
    let results: Vec<Result<Vec<ResultRow>>> = map_cells(&cells, jobs.max(1), eval)?;
    let mut rows = Vec::new();
    for r in results {
        rows.extend(r?);
    }
    Ok(ResultTable { rows })
}

#[cfg(feature = "parallel")]
fn map_cells<F, T>(cells: &[Cell], jobs: usize, f: F) -> Result<Vec<T>>
where
    F: Fn(&Cell) -> T + Sync + Send,
    T: Send,
{
    use rayon::prelude::*;
    if jobs == 1 {
        return Ok(cells.iter().map(f).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| invalid(format!("cannot start {jobs} worker threads: {e}")))?;
    Ok(pool.install(|| cells.par_iter().map(&f).collect()))
}

#[cfg(not(feature = "parallel"))]
fn map_cells<F, T>(cells: &[Cell], _jobs: usize, f: F) -> Result<Vec<T>>
where
    F: Fn(&Cell) -> T,
{
    Ok(cells.iter().map(f).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catalog_has_seven() {
        let c = scenario_catalog();
        assert_eq!(c.len(), 7);
        for s in &c {
            s.validate().unwrap();
        }
    }

    #[test]
    fn scaling_floors_and_records() {
        let s = scenario(ScenarioId::F4).scaled(0.05).unwrap();
        assert_eq!(s.n_grid, vec![50, 50, 60, 75]);
        assert_eq!(s.scale, 0.05);
        assert!(scenario(ScenarioId::F4).scaled(0.0).is_err());
        assert!(scenario(ScenarioId::F4).scaled(1.5).is_err());
    }

    #[test]
    fn exact_power_slopes() {
        let inv: Vec<(usize, f64)> = [100, 200, 400, 800].iter().map(|&n| (n, 1.0 / n as f64)).collect();
        assert!((slope_of(&inv).unwrap() + 1.0).abs() < 1e-9);
        assert!(slope_of(&inv[..2]).is_err());
        assert!(slope_of(&[(1, 1.0), (2, 0.0), (3, 1.0)]).is_err());
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn scenario_ids_parse() {
        assert_eq!("f4".parse::<ScenarioId>().unwrap(), ScenarioId::F4);
        assert!("F8".parse::<ScenarioId>().is_err());
    }

    #[test]
    fn overrides_merge_and_reject_unknown_keys() {
        let base = scenario(ScenarioId::F4);
        let merged = base.merge_json(&serde_json::json!({"seeds": [7, 8]})).unwrap();
        assert_eq!(merged.seeds, vec![7, 8]);
        assert_eq!(merged.n_grid, base.n_grid);
        assert!(base.merge_json(&serde_json::json!({"bogus": 1})).is_err());
        assert!(base.merge_json(&serde_json::json!({"seeds": []})).is_err());
    }

    #[test]
    fn cell_count() {
        let s = scenario(ScenarioId::F6);
        assert_eq!(s.cells().len(), 3 * 4 * 2 * 20);
        let s = scenario(ScenarioId::F1);
        assert_eq!(s.cells().len(), 4 * 2 * 2 * 20);
    }
}
