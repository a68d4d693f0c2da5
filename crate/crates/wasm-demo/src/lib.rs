//! Browser bindings for three small demos. Every export returns a JSON
//! string; errors come back as a thrown string.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StudentT};
use serde::Serialize;
use wasm_bindgen::prelude::*;

use robopt::privacy_accountant::{NoiseVariant, PrivacySpec};
use robopt::robust_mean::{bucket_count, gmom_estimate, pairwise_mean, GmomConfig};
use robopt::scenarios::{run_cell, scenario, Cell, ScenarioId};
use robopt::optimizers::Algorithm;
use robopt::Vector;

#[derive(Serialize)]
struct Curves {
    n: usize,
    epsilon: f64,
    accelerated: Vec<f64>,
    classic: Vec<f64>,
}

/// Excess empirical loss per iteration of private accelerated and classic
/// Frank-Wolfe on the separable-data problem.
pub fn fw_curves_json(n: usize, epsilon: f64, seed: u64) -> Result<String, String> {
    let mut spec = scenario(ScenarioId::F1);
    spec.epsilons = vec![epsilon];
    spec.n_grid = vec![n];
    let curve = |algorithm| -> Result<Vec<f64>, String> {
        let cell = Cell {
            rank: None,
            n,
            epsilon: Some(epsilon),
            algorithm,
            seed,
        };
        let out = run_cell(&spec, &cell).map_err(|e| e.to_string())?;
        Ok(out
            .trajectory
            .metrics
            .iter()
            .map(|m| m.excess_loss.unwrap_or(f64::NAN).max(0.0))
            .collect())
    };
    let curves = Curves {
        n,
        epsilon,
        accelerated: curve(Algorithm::FwAccelPrivate)?,
        classic: curve(Algorithm::FwClassicPrivate)?,
    };
    serde_json::to_string(&curves).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct MeanErrors {
    buckets: usize,
    gmom: Vec<f64>,
    mean: Vec<f64>,
}

/// Estimation error of the geometric median-of-means and of the plain mean
/// over `reps` samples of `n` Student-t vectors in `dim` dimensions.
pub fn gmom_vs_mean_json(n: usize, dim: usize, dof: f64, failure_prob: f64, reps: usize, seed: u64) -> Result<String, String> {
    if dim == 0 || n == 0 || reps == 0 {
        return Err("n, dim and reps must be positive".into());
    }
    let law = StudentT::new(dof).map_err(|e| e.to_string())?;
    let cfg = GmomConfig::new(failure_prob);
    let buckets = bucket_count(failure_prob).map_err(|e| e.to_string())?;
    let mut out = MeanErrors {
        buckets,
        gmom: Vec::with_capacity(reps),
        mean: Vec::with_capacity(reps),
    };
    for rep in 0..reps {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(rep as u64));
        let samples: Vec<Vector> = (0..n).map(|_| Vector::from_fn(dim, |_, _| law.sample(&mut rng))).collect();
        out.gmom.push(gmom_estimate(&samples, &cfg).map_err(|e| e.to_string())?.norm());
        out.mean.push(pairwise_mean(&samples).norm());
    }
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

/// Noise variance, per-step budget and regime flags.
pub fn privacy_json(variant: &str, lipschitz: f64, n: usize, steps: usize, epsilon: f64, delta: f64) -> Result<String, String> {
    let variant: NoiseVariant = variant.parse().map_err(|e: robopt::Error| e.to_string())?;
    let spec = PrivacySpec {
        epsilon,
        delta,
        steps,
        lipschitz,
        n,
    };
    let report = spec.report(variant).map_err(|e| e.to_string())?;
    serde_json::to_string(&report).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn fw_curves(n: usize, epsilon: f64, seed: u32) -> Result<String, JsValue> {
    fw_curves_json(n, epsilon, seed as u64).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn gmom_vs_mean(n: usize, dim: usize, dof: f64, failure_prob: f64, reps: usize, seed: u32) -> Result<String, JsValue> {
    gmom_vs_mean_json(n, dim, dof, failure_prob, reps, seed as u64).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn privacy(variant: &str, lipschitz: f64, n: usize, steps: usize, epsilon: f64, delta: f64) -> Result<String, JsValue> {
    privacy_json(variant, lipschitz, n, steps, epsilon, delta).map_err(|e| JsValue::from_str(&e))
}
