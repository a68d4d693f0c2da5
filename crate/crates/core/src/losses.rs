//! Loss families, empirical aggregates and curvature constants.
//!
//! Every supported loss depends on the sample only through the margin
//! `x^T theta`, so per-sample gradients are `s(x^T theta, y) x` (plus the
//! ridge term) and the empirical gradient is one matrix-vector product.

use std::ops::Range;

use nalgebra::SymmetricEigen;
use serde::{Deserialize, Serialize};

use crate::data_synth::Dataset;
use crate::error::{invalid, Error, Result};
use crate::{Matrix, Vector};

/// Logistic link derivative.
pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Logistic cumulant `log(1 + e^t)`, overflow-safe.
pub fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

/// Second derivative of the logistic cumulant.
pub fn logistic_curvature(t: f64) -> f64 {
    let s = sigmoid(t);
    s * (1.0 - s)
}

/// `rho_q(t) = q^2 (sqrt(1 + (t/q)^2) - 1)`.
pub fn pseudo_huber(q: f64, t: f64) -> f64 {
    let u = t / q;
    // q^2 (sqrt(1+u^2) - 1) rewritten to avoid cancellation near 0.
    q * q * u * u / ((1.0 + u * u).sqrt() + 1.0)
}

/// `psi_q(t) = t / sqrt(1 + (t/q)^2)`.
pub fn pseudo_huber_psi(q: f64, t: f64) -> f64 {
    let u = t / q;
    t / (1.0 + u * u).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum LossFamily {
    Squared,
    Ridge { penalty: f64 },
    GlmLogistic,
    PseudoHuber { scale: f64 },
}

/// Bounds on the sample domain: `||x||_2 <= max_x_norm`, `|y| <= max_abs_y`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainBounds {
    pub max_x_norm: f64,
    pub max_abs_y: f64,
}

/// Moment constants for the pseudo-Huber population curvature bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HuberMoments {
    /// `p * lambda_min(E[x x^T])` lower bound.
    pub min_eig_scale: f64,
    /// `p * lambda_max(E[x x^T])` upper bound.
    pub max_eig_scale: f64,
    /// Diameter of the constraint set divided by `sqrt(p)`.
    pub set_scale: f64,
    /// Bound on `E[(x^T v)^4] / E[(x^T v)^2]^2` over unit `v`.
    pub kurtosis: f64,
    /// Noise standard deviation.
    pub noise_sd: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossModel {
    #[serde(flatten)]
    pub family: LossFamily,
    #[serde(default)]
    pub bounds: Option<DomainBounds>,
    #[serde(default)]
    pub huber_moments: Option<HuberMoments>,
}

impl LossModel {
    pub fn new(family: LossFamily) -> Result<Self> {
        match family {
            LossFamily::Ridge { penalty } if !(penalty >= 0.0) => {
                return Err(invalid("ridge penalty must be non-negative"))
            }
            LossFamily::PseudoHuber { scale } if !(scale > 0.0) => {
                return Err(invalid("pseudo-Huber scale q must be positive"))
            }
            _ => {}
        }
        Ok(LossModel {
            family,
            bounds: None,
            huber_moments: None,
        })
    }

    pub fn squared() -> Self {
        LossModel::new(LossFamily::Squared).expect("valid")
    }

    pub fn with_bounds(mut self, max_x_norm: f64, max_abs_y: f64) -> Self {
        self.bounds = Some(DomainBounds { max_x_norm, max_abs_y });
        self
    }

    pub fn with_huber_moments(mut self, m: HuberMoments) -> Self {
        self.huber_moments = Some(m);
        self
    }

    /// Ridge penalty weight (zero for unpenalised families).
    pub fn penalty(&self) -> f64 {
        match self.family {
            LossFamily::Ridge { penalty } => penalty,
            _ => 0.0,
        }
    }

    /// Value and derivative with respect to the margin, without the ridge term.
    fn margin_terms(&self, margin: f64, y: f64) -> (f64, f64) {
        match self.family {
            LossFamily::Squared | LossFamily::Ridge { .. } => {
                let r = margin - y;
                (0.5 * r * r, r)
            }
            LossFamily::GlmLogistic => (softplus(margin) - y * margin, sigmoid(margin) - y),
            LossFamily::PseudoHuber { scale: q } => {
                let t = y - margin;
                (pseudo_huber(q, t), -pseudo_huber_psi(q, t))
            }
        }
    }

    fn ridge_value(&self, theta: &Vector) -> f64 {
        0.5 * self.penalty() * theta.norm_squared()
    }

    /// Loss of a single sample.
    pub fn value(&self, theta: &Vector, x: &Vector, y: f64) -> Result<f64> {
        check_dim(theta.len(), x.len())?;
        Ok(self.margin_terms(x.dot(theta), y).0 + self.ridge_value(theta))
    }

    /// Gradient in `theta` of a single sample's loss.
    pub fn per_sample_gradient(&self, theta: &Vector, x: &Vector, y: f64) -> Result<Vector> {
        check_dim(theta.len(), x.len())?;
        let (_, d) = self.margin_terms(x.dot(theta), y);
        Ok(x * d + theta * self.penalty())
    }

    /// Per-sample gradients of the rows in `rows`, in row order.
    pub fn per_sample_gradients(&self, theta: &Vector, data: &Dataset, rows: Range<usize>) -> Result<Vec<Vector>> {
        check_dim(theta.len(), data.p())?;
        check_rows(&rows, data.n())?;
        let penalty = self.penalty();
        Ok(rows
            .map(|i| {
                let x = data.x.row(i);
                let (_, d) = self.margin_terms((x * theta)[0], data.y[i]);
                x.transpose() * d + theta * penalty
            })
            .collect())
    }

    /// Mean loss and mean gradient over `rows`.
    pub fn value_and_gradient_on(&self, theta: &Vector, data: &Dataset, rows: Range<usize>) -> Result<(f64, Vector)> {
        check_dim(theta.len(), data.p())?;
        check_rows(&rows, data.n())?;
        if rows.is_empty() {
            return Err(invalid("empty sample range"));
        }
        let m = rows.len();
        let x = data.x.rows(rows.start, m);
        let margins = &x * theta;
        let mut value = 0.0;
        let mut weights = Vector::zeros(m);
        for k in 0..m {
            let (v, d) = self.margin_terms(margins[k], data.y[rows.start + k]);
            value += v;
            weights[k] = d;
        }
        let mut grad = x.tr_mul(&weights);
        grad /= m as f64;
        grad += theta * self.penalty();
        Ok((value / m as f64 + self.ridge_value(theta), grad))
    }

    /// Empirical loss over the whole dataset.
    pub fn empirical_value(&self, theta: &Vector, data: &Dataset) -> Result<f64> {
        check_dim(theta.len(), data.p())?;
        if data.n() == 0 {
            return Err(invalid("empty dataset"));
        }
        let margins = &data.x * theta;
        let total: f64 = margins
            .iter()
            .zip(data.y.iter())
            .map(|(&m, &y)| self.margin_terms(m, y).0)
            .sum();
        Ok(total / data.n() as f64 + self.ridge_value(theta))
    }
}

/// Mean loss and mean gradient over the whole dataset.
pub fn empirical_value_and_gradient(model: &LossModel, theta: &Vector, data: &Dataset) -> Result<(f64, Vector)> {
    if data.n() == 0 {
        return Err(invalid("empty dataset"));
    }
    model.value_and_gradient_on(theta, data, 0..data.n())
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}

fn check_rows(rows: &Range<usize>, n: usize) -> Result<()> {
    if rows.start > rows.end || rows.end > n {
        return Err(invalid(format!("rows {rows:?} out of bounds for {n} samples")));
    }
    Ok(())
}

/// Where second-moment information comes from.
#[derive(Clone, Copy, Debug)]
pub enum CurvatureSource<'a> {
    /// Empirical second moment `(1/n) X^T X`.
    Dataset(&'a Dataset),
    /// Population second moment `E[x x^T]`.
    Covariance(&'a Matrix),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvatureReport {
    pub smoothness: f64,
    /// Zero when unknown.
    pub strong_convexity: f64,
    /// Lipschitz constant of the per-sample loss over the ball; needs domain bounds.
    pub lipschitz: Option<f64>,
    /// Frank-Wolfe curvature bound over the ball.
    pub fw_curvature: f64,
    /// Gaussian width of the ball.
    pub gaussian_width: f64,
    /// Extreme eigenvalues of the second-moment matrix used.
    pub eig_max: f64,
    pub eig_min: f64,
}

impl CurvatureReport {
    pub fn require_lipschitz(&self) -> Result<f64> {
        self.lipschitz.ok_or(Error::MissingDomainBounds)
    }
}

/// Extreme eigenvalues of a symmetric matrix (symmetrised first).
pub fn spectrum_extremes(m: &Matrix) -> Result<(f64, f64)> {
    if !m.is_square() || m.nrows() == 0 {
        return Err(invalid("second-moment matrix must be square and non-empty"));
    }
    let sym = (m + m.transpose()) * 0.5;
    let asym = (m - &sym).amax();
    if asym > 1e-10 * (1.0 + m.amax()) {
        return Err(invalid("second-moment matrix is not symmetric"));
    }
    let eig = SymmetricEigen::new(sym);
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min().max(0.0);
    Ok((max, min))
}

/// Empirical second moment `(1/n) X^T X`.
pub fn second_moment(data: &Dataset) -> Matrix {
    data.x.tr_mul(&data.x) / data.n() as f64
}

/// Pseudo-Huber population strong-convexity constant from moment bounds.
pub fn pseudo_huber_strong_convexity(q: f64, p: usize, m: &HuberMoments) -> f64 {
    let lo = m.min_eig_scale;
    let inner = lo * lo * q * q
        + 8.0 * m.set_scale * m.set_scale * m.max_eig_scale.powi(3) * m.kurtosis
        + 2.0 * lo * lo * m.noise_sd * m.noise_sd;
    q.powi(3) * lo.powi(4) / (4.0 * p as f64 * inner.powf(1.5))
}

/// Smoothness, strong convexity, Lipschitz and Frank-Wolfe constants of
/// `model` over the l2 ball of radius `radius`.
pub fn curvature_constants(model: &LossModel, source: CurvatureSource<'_>, radius: f64) -> Result<CurvatureReport> {
    if !(radius > 0.0) {
        return Err(invalid("ball radius must be positive"));
    }
    let moment = match source {
        CurvatureSource::Dataset(d) => {
            if d.n() == 0 {
                return Err(invalid("empty dataset"));
            }
            second_moment(d)
        }
        CurvatureSource::Covariance(c) => c.clone(),
    };
    let p = moment.nrows();
    let (lmax, lmin) = spectrum_extremes(&moment)?;
    let penalty = model.penalty();

    let (smoothness, strong_convexity, hess_scale) = match model.family {
        LossFamily::Squared => (lmax, lmin, lmax),
        LossFamily::Ridge { .. } => (lmax + penalty, lmin + penalty, lmax + penalty),
        LossFamily::GlmLogistic => {
            let upper = match model.bounds {
                Some(b) => 0.25 * b.max_x_norm * b.max_x_norm,
                None => 0.25 * lmax,
            };
            let lower = match model.bounds {
                Some(b) => logistic_curvature(b.max_x_norm * radius) * lmin,
                None => 0.0,
            };
            (upper, lower, 0.25 * lmax)
        }
        LossFamily::PseudoHuber { scale: q } => {
            let lower = model
                .huber_moments
                .map(|m| pseudo_huber_strong_convexity(q, p, &m))
                .unwrap_or(0.0);
            (lmax, lower.min(lmax), lmax)
        }
    };

    let lipschitz = model.bounds.map(|b| match model.family {
        LossFamily::Squared => (b.max_x_norm * radius + b.max_abs_y) * b.max_x_norm,
        LossFamily::Ridge { .. } => (b.max_x_norm * radius + b.max_abs_y) * b.max_x_norm + penalty * radius,
        LossFamily::GlmLogistic => (1.0 + b.max_abs_y) * b.max_x_norm,
        LossFamily::PseudoHuber { scale } => scale * b.max_x_norm,
    });

    Ok(CurvatureReport {
        smoothness,
        strong_convexity,
        lipschitz,
        fw_curvature: 4.0 * hess_scale * radius * radius,
        gaussian_width: radius * (p as f64).sqrt(),
        eig_max: lmax,
        eig_min: lmin,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PopulationOracle {
    pub risk: f64,
    pub grad: Vector,
    pub minimizer: Vector,
}

/// Population risk, gradient and minimizer of the (ridge-)squared loss under
/// `y = x^T theta_star + w` with `E[x x^T] = cov` and `Var(w) = sigma2`.
pub fn population_oracle_linear(
    cov: &Matrix,
    penalty: f64,
    theta_star: &Vector,
    sigma2: f64,
    theta: &Vector,
) -> Result<PopulationOracle> {
    let p = theta_star.len();
    if cov.nrows() != p || cov.ncols() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            got: cov.nrows(),
        });
    }
    check_dim(p, theta.len())?;
    if !(penalty >= 0.0) {
        return Err(invalid("ridge penalty must be non-negative"));
    }
    let diff = theta - theta_star;
    let cov_diff = cov * &diff;
    let risk = 0.5 * diff.dot(&cov_diff) + 0.5 * sigma2 + 0.5 * penalty * theta.norm_squared();
    let grad = cov_diff + theta * penalty;

    let shifted = cov + Matrix::identity(p, p) * penalty;
    let rhs = cov * theta_star;
    let minimizer = shifted
        .cholesky()
        .map(|c| c.solve(&rhs))
        .ok_or_else(|| Error::Singular("Sigma + penalty I is not positive definite; use penalty > 0".into()))?;
    Ok(PopulationOracle { risk, grad, minimizer })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_synth::ModelTag;

    fn v(xs: &[f64]) -> Vector {
        Vector::from_row_slice(xs)
    }

    #[test]
    fn squared_gradient_by_hand() {
        let g = LossModel::squared().per_sample_gradient(&v(&[0.0, 0.0]), &v(&[1.0, 0.0]), 2.0).unwrap();
        assert_eq!(g, v(&[-2.0, 0.0]));
    }

    #[test]
    fn logistic_gradient_vanishes_at_half() {
        let m = LossModel::new(LossFamily::GlmLogistic).unwrap();
        let g = m.per_sample_gradient(&v(&[0.0, 0.0, 0.0]), &v(&[0.3, -2.0, 5.0]), 0.5).unwrap();
        assert_eq!(g.norm(), 0.0);
    }

    #[test]
    fn dimension_checked() {
        let r = LossModel::squared().per_sample_gradient(&v(&[0.0]), &v(&[1.0, 0.0]), 0.0);
        assert!(matches!(r, Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(LossModel::new(LossFamily::Ridge { penalty: -1.0 }).is_err());
        assert!(LossModel::new(LossFamily::PseudoHuber { scale: 0.0 }).is_err());
    }

    #[test]
    fn stable_link_functions() {
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0) >= 0.0);
        assert!((sigmoid(-800.0)).abs() < 1e-300);
        assert!((pseudo_huber(0.2, 1e-9) - 0.5e-18).abs() < 1e-30);
    }

    #[test]
    fn lipschitz_needs_bounds() {
        let ds = Dataset::new(Matrix::identity(2, 2), v(&[1.0, 1.0]), ModelTag::Linear).unwrap();
        let rep = curvature_constants(&LossModel::squared(), CurvatureSource::Dataset(&ds), 1.0).unwrap();
        assert!(matches!(rep.require_lipschitz(), Err(Error::MissingDomainBounds)));
    }

    #[test]
    fn singular_minimizer_reported() {
        let cov = Matrix::from_diagonal(&v(&[1.0, 0.0]));
        let r = population_oracle_linear(&cov, 0.0, &v(&[1.0, 1.0]), 1.0, &v(&[0.0, 0.0]));
        assert!(matches!(r, Err(Error::Singular(_))));
    }

    #[test]
    fn model_json_is_flat() {
        let m: LossModel = serde_json::from_str(r#"{"family":"ridge","penalty":0.5}"#).unwrap();
        assert_eq!(m.family, LossFamily::Ridge { penalty: 0.5 });
        assert!(m.bounds.is_none());
        let back = serde_json::to_value(m).unwrap();
        assert_eq!(back["family"], "ridge");
    }
}
