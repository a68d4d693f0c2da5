//! Seeded synthetic datasets.
//!
//! Row `i` of every generator is drawn from its own ChaCha stream, so a
//! dataset is a pure function of its arguments and the seed, and any subset
//! of rows can be regenerated (or generated in parallel) without touching
//! the others.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use libm::erf;

use crate::error::{invalid, Error, Result};
use crate::rng::stream_rng;
use crate::{Matrix, Vector};

/// Attempts allowed per accepted draw in the rejection samplers.
pub const REJECTION_CAP: u64 = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelTag {
    Linear,
    GlmLogistic,
    Separable,
}

impl ModelTag {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelTag::Linear => "linear",
            ModelTag::GlmLogistic => "glm-logistic",
            ModelTag::Separable => "separable",
        }
    }
}

impl fmt::Display for ModelTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ModelTag::Linear),
            "glm-logistic" | "logistic" => Ok(ModelTag::GlmLogistic),
            "separable" => Ok(ModelTag::Separable),
            other => Err(invalid(format!("unknown model tag `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// n x p design matrix, one sample per row.
    pub x: Matrix,
    pub y: Vector,
    pub theta_star: Option<Vector>,
    pub model_tag: ModelTag,
    pub seed: u64,
}

impl Dataset {
    pub fn new(x: Matrix, y: Vector, model_tag: ModelTag) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::DimensionMismatch {
                expected: x.nrows(),
                got: y.len(),
            });
        }
        Ok(Dataset {
            x,
            y,
            theta_star: None,
            model_tag,
            seed: 0,
        })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Row `i` as a column vector.
    pub fn row(&self, i: usize) -> Vector {
        self.x.row(i).transpose()
    }

    /// Largest Euclidean row norm.
    pub fn max_row_norm(&self) -> f64 {
        self.x
            .row_iter()
            .map(|r| r.norm())
            .fold(0.0, f64::max)
    }
}

/// Additive noise law for the linear model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum NoiseSpec {
    StudentT { nu: f64 },
    TruncatedGaussian { sigma2: f64, bound: f64 },
    Gaussian { sigma2: f64 },
    None,
}

impl NoiseSpec {
    fn validate(&self) -> Result<()> {
        match *self {
            NoiseSpec::StudentT { nu } if !(nu > 0.0) => {
                Err(invalid("student-t degrees of freedom must be positive"))
            }
            NoiseSpec::TruncatedGaussian { sigma2, bound } if !(sigma2 > 0.0 && bound > 0.0) => {
                Err(invalid("truncated gaussian needs sigma2 > 0 and bound > 0"))
            }
            NoiseSpec::Gaussian { sigma2 } if !(sigma2 >= 0.0) => {
                Err(invalid("gaussian variance must be non-negative"))
            }
            _ => Ok(()),
        }
    }

    /// Variance of the law, when finite and known in closed form.
    pub fn variance(&self) -> Option<f64> {
        match *self {
            NoiseSpec::StudentT { nu } if nu > 2.0 => Some(nu / (nu - 2.0)),
            NoiseSpec::StudentT { .. } => None,
            NoiseSpec::TruncatedGaussian { sigma2, bound } => {
                Some(truncated_normal_variance(sigma2, bound))
            }
            NoiseSpec::Gaussian { sigma2 } => Some(sigma2),
            NoiseSpec::None => Some(0.0),
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Result<f64> {
        Ok(match *self {
            NoiseSpec::StudentT { nu } => student_t(nu, rng),
            NoiseSpec::TruncatedGaussian { sigma2, bound } => {
                truncated_normal(sigma2.sqrt(), bound, rng)?
            }
            NoiseSpec::Gaussian { sigma2 } => sigma2.sqrt() * std_normal(rng),
            NoiseSpec::None => 0.0,
        })
    }
}

/// Covariate law for the linear model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CovariateLaw {
    Identity,
    /// Independent Gaussian coordinates with these variances.
    Diagonal { values: Vec<f64> },
    /// Unit variance on the first `m` coordinates, constant zero elsewhere.
    RankM { m: usize },
    /// Independent uniform coordinates on `[-half_width, half_width]`.
    UniformBox { half_width: f64 },
}

impl CovariateLaw {
    /// Population second-moment matrix E[x x^T].
    pub fn covariance(&self, p: usize) -> Matrix {
        let diag: Vec<f64> = match self {
            CovariateLaw::Identity => vec![1.0; p],
            CovariateLaw::Diagonal { values } => values.clone(),
            CovariateLaw::RankM { m } => (0..p).map(|j| if j < *m { 1.0 } else { 0.0 }).collect(),
            CovariateLaw::UniformBox { half_width } => vec![half_width * half_width / 3.0; p],
        };
        Matrix::from_diagonal(&Vector::from_vec(diag))
    }

    fn validate(&self, p: usize) -> Result<()> {
        match self {
            CovariateLaw::Diagonal { values } => {
                if values.len() != p {
                    return Err(Error::DimensionMismatch {
                        expected: p,
                        got: values.len(),
                    });
                }
                if values.iter().any(|v| !(*v >= 0.0)) {
                    return Err(invalid("diagonal covariance entries must be non-negative"));
                }
            }
            CovariateLaw::RankM { m } if *m > p => {
                return Err(invalid(format!("rank {m} exceeds dimension {p}")));
            }
            CovariateLaw::UniformBox { half_width } if !(*half_width > 0.0) => {
                return Err(invalid("uniform box half-width must be positive"));
            }
            _ => {}
        }
        Ok(())
    }

    fn fill_row(&self, row: &mut [f64], rng: &mut ChaCha8Rng) {
        match self {
            CovariateLaw::Identity => row.iter_mut().for_each(|v| *v = std_normal(rng)),
            CovariateLaw::Diagonal { values } => {
                for (v, s) in row.iter_mut().zip(values) {
                    *v = s.sqrt() * std_normal(rng);
                }
            }
            CovariateLaw::RankM { m } => {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = if j < *m { std_normal(rng) } else { 0.0 };
                }
            }
            CovariateLaw::UniformBox { half_width } => {
                let a = *half_width;
                row.iter_mut().for_each(|v| *v = rng.random_range(-a..=a));
            }
        }
    }
}

fn std_normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn student_t(nu: f64, rng: &mut ChaCha8Rng) -> f64 {
    let z = std_normal(rng);
    let chi2 = ChiSquared::new(nu).expect("validated degrees of freedom");
    z / (chi2.sample(rng) / nu).sqrt()
}

fn truncated_normal(sigma: f64, bound: f64, rng: &mut ChaCha8Rng) -> Result<f64> {
    for _ in 0..REJECTION_CAP {
        let z = sigma * std_normal(rng);
        if z.abs() <= bound {
            return Ok(z);
        }
    }
    Err(Error::RejectionCap(REJECTION_CAP))
}

/// Variance of N(0, sigma2) conditioned on `[-bound, bound]`.
pub fn truncated_normal_variance(sigma2: f64, bound: f64) -> f64 {
    let a = bound / sigma2.sqrt();
    let pdf = (-0.5 * a * a).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mass = erf(a / std::f64::consts::SQRT_2);
    sigma2 * (1.0 - 2.0 * a * pdf / mass)
}

fn check_theta(theta_star: &Vector, p: usize) -> Result<()> {
    if theta_star.len() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            got: theta_star.len(),
        });
    }
    Ok(())
}

fn check_shape(n: usize, p: usize) -> Result<()> {
    if n == 0 || p == 0 {
        return Err(invalid("n and p must be at least 1"));
    }
    Ok(())
}

/// `y = x^T theta_star + w` with `x` from `cov` and `w` from `noise`.
pub fn gen_linear_heavy_tailed(
    n: usize,
    p: usize,
    theta_star: &Vector,
    cov: &CovariateLaw,
    noise: NoiseSpec,
    seed: u64,
) -> Result<Dataset> {
    check_shape(n, p)?;
    check_theta(theta_star, p)?;
    cov.validate(p)?;
    noise.validate()?;

    let mut data = vec![0.0; n * p];
    let mut y = Vector::zeros(n);
    for (i, row) in data.chunks_mut(p).enumerate() {
        let mut rng = stream_rng(seed, i as u64);
        cov.fill_row(row, &mut rng);
        let w = noise.sample(&mut rng)?;
        let signal: f64 = row.iter().zip(theta_star.iter()).map(|(a, b)| a * b).sum();
        y[i] = signal + w;
    }
    Ok(Dataset {
        x: Matrix::from_row_slice(n, p, &data),
        y,
        theta_star: Some(theta_star.clone()),
        model_tag: ModelTag::Linear,
        seed,
    })
}

/// Logistic GLM with uniform-box covariates: `P(y = 1 | x) = sigmoid(x^T theta_star)`.
pub fn gen_logistic_glm(
    n: usize,
    p: usize,
    theta_star: &Vector,
    half_width: f64,
    seed: u64,
) -> Result<Dataset> {
    check_shape(n, p)?;
    check_theta(theta_star, p)?;
    if !(half_width > 0.0) {
        return Err(invalid("uniform box half-width must be positive"));
    }
    let law = CovariateLaw::UniformBox { half_width };
    let mut data = vec![0.0; n * p];
    let mut y = Vector::zeros(n);
    for (i, row) in data.chunks_mut(p).enumerate() {
        let mut rng = stream_rng(seed, i as u64);
        law.fill_row(row, &mut rng);
        let logit: f64 = row.iter().zip(theta_star.iter()).map(|(a, b)| a * b).sum();
        let u: f64 = rng.random();
        y[i] = if u < crate::losses::sigmoid(logit) { 1.0 } else { 0.0 };
    }
    Ok(Dataset {
        x: Matrix::from_row_slice(n, p, &data),
        y,
        theta_star: Some(theta_star.clone()),
        model_tag: ModelTag::GlmLogistic,
        seed,
    })
}

/// Linearly separable points in the unit box with margin `sqrt(p)/2` along
/// the all-ones direction; labels are the side of the hyperplane.
pub fn gen_separable(n: usize, p: usize, seed: u64) -> Result<Dataset> {
    check_shape(n, p)?;
    let scale = 1.0 / (p as f64).sqrt();
    let margin = (p as f64).sqrt() / 2.0;
    let mut data = vec![0.0; n * p];
    let mut y = Vector::zeros(n);
    for (i, row) in data.chunks_mut(p).enumerate() {
        let mut rng = stream_rng(seed, i as u64);
        let mut accepted = false;
        for _ in 0..REJECTION_CAP {
            row.iter_mut().for_each(|v| *v = rng.random_range(-1.0..=1.0));
            let proj = row.iter().sum::<f64>() * scale;
            if proj.abs() >= margin {
                y[i] = proj.signum();
                accepted = true;
                break;
            }
        }
        if !accepted {
            return Err(Error::RejectionCap(REJECTION_CAP));
        }
    }
    Ok(Dataset {
        x: Matrix::from_row_slice(n, p, &data),
        y,
        theta_star: None,
        model_tag: ModelTag::Separable,
        seed,
    })
}

/// `count` draws of N(0, sigma2) conditioned on `[-bound, bound]`.
pub fn sample_truncated_normal(sigma2: f64, bound: f64, count: usize, seed: u64) -> Result<Vec<f64>> {
    NoiseSpec::TruncatedGaussian { sigma2, bound }.validate()?;
    let sigma = sigma2.sqrt();
    (0..count)
        .map(|i| truncated_normal(sigma, bound, &mut stream_rng(seed, i as u64)))
        .collect()
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    model_tag: ModelTag,
    seed: u64,
    n: usize,
    p: usize,
    theta_star: Option<Vec<f64>>,
}

/// Path of the JSON metadata file written next to a dataset CSV.
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

/// Write `x_1..x_p,y` rows plus the JSON sidecar.
pub fn write_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (1..=dataset.p()).map(|j| format!("x_{j}")).collect();
    header.push("y".into());
    w.write_record(&header)?;
    for i in 0..dataset.n() {
        let mut rec: Vec<String> = dataset.x.row(i).iter().map(|v| v.to_string()).collect();
        rec.push(dataset.y[i].to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;

    let meta = Sidecar {
        model_tag: dataset.model_tag,
        seed: dataset.seed,
        n: dataset.n(),
        p: dataset.p(),
        theta_star: dataset.theta_star.as_ref().map(|t| t.iter().copied().collect()),
    };
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(())
}

/// Read a dataset written by [`write_csv`]. The sidecar is optional; without
/// it the data is tagged linear with no known parameter.
pub fn read_csv(path: &Path) -> Result<Dataset> {
    let mut r = csv::Reader::from_path(path)?;
    let p = r
        .headers()?
        .len()
        .checked_sub(1)
        .filter(|&p| p > 0)
        .ok_or_else(|| invalid("dataset CSV needs at least one covariate column and y"))?;
    let mut data = Vec::new();
    let mut y = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != p + 1 {
            return Err(Error::DimensionMismatch {
                expected: p + 1,
                got: rec.len(),
            });
        }
        for (j, field) in rec.iter().enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| invalid(format!("non-numeric field `{field}`")))?;
            if j < p {
                data.push(v);
            } else {
                y.push(v);
            }
        }
    }
    let n = y.len();
    if n == 0 {
        return Err(invalid("dataset CSV has no rows"));
    }
    let mut ds = Dataset::new(Matrix::from_row_slice(n, p, &data), Vector::from_vec(y), ModelTag::Linear)?;
    let side = sidecar_path(path);
    if side.exists() {
        let meta: Sidecar = serde_json::from_str(&std::fs::read_to_string(side)?)?;
        ds.model_tag = meta.model_tag;
        ds.seed = meta.seed;
        if let Some(t) = meta.theta_star {
            check_theta(&Vector::from_vec(t.clone()), p)?;
            ds.theta_star = Some(Vector::from_vec(t));
        }
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_signal_zero_noise_gives_zero_response() {
        let ds = gen_linear_heavy_tailed(50, 4, &Vector::zeros(4), &CovariateLaw::Identity, NoiseSpec::None, 3)
            .unwrap();
        assert!(ds.y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rank_m_zeroes_trailing_columns() {
        let ds = gen_linear_heavy_tailed(
            20,
            5,
            &Vector::from_element(5, 1.0),
            &CovariateLaw::RankM { m: 2 },
            NoiseSpec::None,
            1,
        )
        .unwrap();
        for i in 0..20 {
            assert_eq!(ds.x[(i, 2)], 0.0);
            assert_eq!(ds.x[(i, 4)], 0.0);
        }
    }

    #[test]
    fn shape_errors() {
        let bad = gen_linear_heavy_tailed(5, 3, &Vector::zeros(2), &CovariateLaw::Identity, NoiseSpec::None, 0);
        assert!(matches!(bad, Err(Error::DimensionMismatch { .. })));
        let bad = gen_linear_heavy_tailed(5, 3, &Vector::zeros(3), &CovariateLaw::RankM { m: 4 }, NoiseSpec::None, 0);
        assert!(bad.is_err());
        assert!(gen_logistic_glm(5, 3, &Vector::zeros(3), 0.0, 0).is_err());
    }

    #[test]
    fn separable_one_dimensional() {
        let ds = gen_separable(200, 1, 9).unwrap();
        for i in 0..200 {
            let x = ds.x[(i, 0)];
            assert!(x.abs() >= 0.5 && x.abs() <= 1.0);
            assert_eq!(ds.y[i], x.signum());
        }
    }

    #[test]
    fn truncated_variance_limits() {
        assert!((truncated_normal_variance(4.0, 1e6) - 4.0).abs() < 1e-12);
        assert!(truncated_normal_variance(1.0, 1.0) < 1.0 / 3.0 + 1e-12);
    }
}
