//! Gaussian-mechanism calibration and composition for the private optimizers.
//!
//! Everything here is closed-form arithmetic; nothing looks at data. Inputs
//! outside the regime where a bound is proved are rejected rather than
//! clamped.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Which noise schedule a private optimizer uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseVariant {
    /// Accelerated Frank-Wolfe over the full sample.
    Accelerated,
    /// Classic Frank-Wolfe with the `log^2(n/delta)` schedule.
    Classic,
    /// One-sample-per-step SGD.
    Sgd,
    /// Gradient descent on disjoint chunks; `n` is the chunk size.
    ChunkedGd,
}

impl NoiseVariant {
    pub const ALL: [NoiseVariant; 4] = [
        NoiseVariant::Accelerated,
        NoiseVariant::Classic,
        NoiseVariant::Sgd,
        NoiseVariant::ChunkedGd,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            NoiseVariant::Accelerated => "accelerated",
            NoiseVariant::Classic => "classic",
            NoiseVariant::Sgd => "sgd",
            NoiseVariant::ChunkedGd => "chunked-gd",
        }
    }

    fn needs_composition(self) -> bool {
        matches!(self, NoiseVariant::Accelerated | NoiseVariant::ChunkedGd)
    }
}

impl fmt::Display for NoiseVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NoiseVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        NoiseVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| invalid(format!("unknown noise variant `{s}`")))
    }
}

fn check_eps_delta(epsilon: f64, delta: f64) -> Result<()> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(invalid(format!("delta must lie in (0, 1), got {delta}")));
    }
    Ok(())
}

/// True when advanced composition applies to `steps` mechanisms:
/// `epsilon < 2 sqrt(2 T log(2/delta))` and `delta < 2T`.
pub fn composition_regime_ok(epsilon: f64, delta: f64, steps: usize) -> bool {
    let t = steps as f64;
    steps >= 1 && epsilon < 2.0 * (2.0 * t * (2.0 / delta).ln()).sqrt() && delta < 2.0 * t
}

fn check_regime(epsilon: f64, delta: f64, steps: usize) -> Result<()> {
    check_eps_delta(epsilon, delta)?;
    if !composition_regime_ok(epsilon, delta, steps) {
        return Err(Error::Regime(format!(
            "advanced composition needs T >= 1, epsilon < 2 sqrt(2 T log(2/delta)) and delta < 2T \
             (epsilon={epsilon}, delta={delta}, T={steps})"
        )));
    }
    Ok(())
}

/// Variance of the Gaussian mechanism for l2 sensitivity `sensitivity`.
pub fn gaussian_sigma2(sensitivity: f64, epsilon: f64, delta: f64) -> Result<f64> {
    check_eps_delta(epsilon, delta)?;
    if !(sensitivity >= 0.0) {
        return Err(invalid("sensitivity must be non-negative"));
    }
    if epsilon >= 1.0 {
        return Err(Error::Regime(format!(
            "the Gaussian mechanism calibration holds for epsilon < 1, got {epsilon}"
        )));
    }
    Ok(2.0 * sensitivity * sensitivity * (1.25 / delta).ln() / (epsilon * epsilon))
}

/// l2 sensitivity of an average of `n` gradients each bounded by `lipschitz`.
pub fn average_sensitivity(lipschitz: f64, n: usize) -> f64 {
    2.0 * lipschitz / n as f64
}

/// Per-mechanism budget so that `steps` adaptive uses compose to
/// `(epsilon, delta)`.
pub fn per_step_budget(epsilon: f64, delta: f64, steps: usize) -> Result<(f64, f64)> {
    check_regime(epsilon, delta, steps)?;
    let t = steps as f64;
    Ok((epsilon / (2.0 * (2.0 * t * (2.0 / delta).ln()).sqrt()), delta / (2.0 * t)))
}

/// Total epsilon of `steps` mechanisms each run at [`per_step_budget`].
pub fn compose_advanced(epsilon: f64, delta: f64, steps: usize) -> Result<f64> {
    let (eps_step, _) = per_step_budget(epsilon, delta, steps)?;
    let t = steps as f64;
    let total = epsilon / 2.0 + epsilon * t.sqrt() / (2.0 * (2.0 * (2.0 / delta).ln()).sqrt()) * eps_step.exp_m1();
    debug_assert!(epsilon > 0.9 || total <= epsilon);
    Ok(total)
}

/// Basic composition: budgets add up.
pub fn compose_basic(epsilon: f64, delta: f64, steps: usize) -> (f64, f64) {
    (epsilon * steps as f64, delta * steps as f64)
}

/// Per-coordinate variance of the Gaussian noise added at every step.
pub fn noise_variance(
    lipschitz: f64,
    n: usize,
    steps: usize,
    epsilon: f64,
    delta: f64,
    variant: NoiseVariant,
) -> Result<f64> {
    if !(lipschitz >= 0.0 && lipschitz.is_finite()) {
        return Err(invalid("Lipschitz constant must be finite and non-negative"));
    }
    if n == 0 {
        return Err(invalid("sample count must be positive"));
    }
    if variant.needs_composition() {
        check_regime(epsilon, delta, steps)?;
    } else {
        check_eps_delta(epsilon, delta)?;
    }
    let l2 = lipschitz * lipschitz;
    let n = n as f64;
    let t = steps as f64;
    let e2 = epsilon * epsilon;
    Ok(match variant {
        NoiseVariant::Accelerated | NoiseVariant::ChunkedGd => {
            64.0 * l2 * t * (5.0 * t / (2.0 * delta)).ln() * (2.0 / delta).ln() / (n * n * e2)
        }
        NoiseVariant::Classic => {
            let lg = (n / delta).ln();
            32.0 * l2 * t * lg * lg / (n * n * e2)
        }
        NoiseVariant::Sgd => 32.0 * l2 * (n / delta).ln() * (1.0 / delta).ln() / e2,
    })
}

/// Summary of a privacy configuration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivacySpec {
    pub epsilon: f64,
    pub delta: f64,
    pub steps: usize,
    pub lipschitz: f64,
    /// Samples per gradient average.
    pub n: usize,
}

impl PrivacySpec {
    pub fn eps_small(&self) -> bool {
        self.epsilon <= 0.9
    }

    pub fn composition_ok(&self) -> bool {
        composition_regime_ok(self.epsilon, self.delta, self.steps)
    }

    pub fn variance(&self, variant: NoiseVariant) -> Result<f64> {
        noise_variance(self.lipschitz, self.n, self.steps, self.epsilon, self.delta, variant)
    }

    pub fn report(&self, variant: NoiseVariant) -> Result<PrivacyReport> {
        let sigma2 = self.variance(variant)?;
        let ok = self.composition_ok();
        let (eps_step, delta_step) = if ok {
            let (e, d) = per_step_budget(self.epsilon, self.delta, self.steps)?;
            (Some(e), Some(d))
        } else {
            (None, None)
        };
        Ok(PrivacyReport {
            variant,
            sigma2,
            eps_step,
            delta_step,
            eps_total: if ok { Some(compose_advanced(self.epsilon, self.delta, self.steps)?) } else { None },
            eps_small: self.eps_small(),
            composition_ok: ok,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivacyReport {
    pub variant: NoiseVariant,
    pub sigma2: f64,
    pub eps_step: Option<f64>,
    pub delta_step: Option<f64>,
    pub eps_total: Option<f64>,
    pub eps_small: bool,
    pub composition_ok: bool,
}
