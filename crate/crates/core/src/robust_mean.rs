//! Geometric median-of-means.
//!
//! Samples are cut into `b` contiguous buckets, each bucket is averaged and
//! the geometric median of the bucket means is returned. The bucket count
//! depends only on the failure probability of the call.

use std::ops::Range;

use crate::error::{invalid, Error, Result};
use crate::Vector;

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 10_000;

/// Distance below which a Weiszfeld iterate is treated as sitting on a point.
const COINCIDE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GmomConfig {
    /// Failure probability for this call, in (0, 1).
    pub failure_prob: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl GmomConfig {
    pub fn new(failure_prob: f64) -> Self {
        GmomConfig {
            failure_prob,
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
        }
    }
}

/// `(1 - x) log((1 - x)/0.9) + x log(x/0.1)`, the Bernoulli divergence
/// from 0.1 used to size the buckets.
pub fn bernoulli_divergence(x: f64) -> Result<f64> {
    if !(x > 0.0 && x < 1.0) {
        return Err(invalid(format!("bernoulli divergence is defined on (0, 1), got {x}")));
    }
    Ok((1.0 - x) * ((1.0 - x) / 0.9).ln() + x * (x / 0.1).ln())
}

/// Number of buckets for failure probability `failure_prob`.
pub fn bucket_count(failure_prob: f64) -> Result<usize> {
    if !(failure_prob > 0.0 && failure_prob < 1.0) {
        return Err(invalid(format!("failure probability must lie in (0, 1), got {failure_prob}")));
    }
    let rate = bernoulli_divergence(7.0 / 18.0)?;
    let b = ((1.0 / failure_prob).ln() / rate).floor() as usize + 1;
    debug_assert!(b <= 1 + (3.5 * (1.0 / failure_prob).ln()).floor() as usize);
    Ok(b)
}

/// Mean with pairwise summation.
pub fn pairwise_mean(points: &[Vector]) -> Vector {
    assert!(!points.is_empty(), "mean of no points");
    pairwise_sum(points) / points.len() as f64
}

fn pairwise_sum(points: &[Vector]) -> Vector {
    if points.len() <= 8 {
        let mut acc = points[0].clone();
        for p in &points[1..] {
            acc += p;
        }
        acc
    } else {
        let (a, b) = points.split_at(points.len() / 2);
        pairwise_sum(a) + pairwise_sum(b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeometricMedian {
    pub point: Vector,
    pub objective: f64,
    pub iterations: usize,
    /// False when `max_iter` ran out before the optimality certificate held.
    pub converged: bool,
    /// Objective value of every iterate, starting from the centroid.
    pub trace: Vec<f64>,
}

fn sum_of_distances(points: &[Vector], y: &Vector) -> f64 {
    points.iter().map(|a| (a - y).norm()).sum()
}

/// Sum of unit vectors from `y` towards every point not coinciding with it,
/// and the number of coinciding points.
fn pull(points: &[Vector], y: &Vector) -> (Vector, usize) {
    let mut r = Vector::zeros(y.len());
    let mut hits = 0;
    for a in points {
        let d = (a - y).norm();
        if d < COINCIDE {
            hits += 1;
        } else {
            r += (a - y) / d;
        }
    }
    (r, hits)
}

/// Minimiser of `sum_i ||y - points_i||` by Weiszfeld's iteration with the
/// Vardi-Zhang correction at data points.
///
/// Stops once `||subgradient|| * max_i ||y - points_i|| <= tol (1 + f(y))`,
/// which bounds the optimality gap by convexity.
pub fn geometric_median(points: &[Vector], tol: f64, max_iter: usize) -> Result<GeometricMedian> {
    let first = points.first().ok_or_else(|| invalid("geometric median of no points"))?;
    let dim = first.len();
    if let Some(bad) = points.iter().find(|p| p.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: bad.len(),
        });
    }
    if !(tol > 0.0) {
        return Err(invalid("tolerance must be positive"));
    }

    // A data point is optimal iff the pull of the others has norm at most
    // its multiplicity.
    for a in points {
        let (r, hits) = pull(points, a);
        if r.norm() <= hits as f64 {
            let objective = sum_of_distances(points, a);
            return Ok(GeometricMedian {
                point: a.clone(),
                objective,
                iterations: 0,
                converged: true,
                trace: vec![objective],
            });
        }
    }

    let mut y = pairwise_mean(points);
    let mut f = sum_of_distances(points, &y);
    let mut trace = vec![f];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < max_iter {
        let mut num = Vector::zeros(dim);
        let mut den = 0.0;
        let mut hits = 0usize;
        let mut far: f64 = 0.0;
        let mut r = Vector::zeros(dim);
        for a in points {
            let diff = a - &y;
            let d = diff.norm();
            far = far.max(d);
            if d < COINCIDE {
                hits += 1;
                continue;
            }
            num += a / d;
            den += 1.0 / d;
            r += diff / d;
        }
        let rn = r.norm();
        let sub = if hits == 0 { rn } else { (rn - hits as f64).max(0.0) };
        if sub * far <= tol * (1.0 + f) {
            converged = true;
            break;
        }
        let t = num / den;
        let next = if hits == 0 {
            t
        } else {
            let w = hits as f64 / rn;
            t * (1.0 - w) + &y * w
        };
        let f_next = sum_of_distances(points, &next);
        iterations += 1;
        if f_next >= f {
            // No representable progress left.
            converged = (&next - &y).norm() <= 1e-12 * (1.0 + y.norm());
            break;
        }
        y = next;
        f = f_next;
        trace.push(f);
    }

    Ok(GeometricMedian {
        point: y,
        objective: f,
        iterations,
        converged,
        trace,
    })
}

/// Bucket means of `samples` for `buckets` contiguous blocks of equal size;
/// the trailing remainder is dropped.
pub fn bucket_means(samples: &[Vector], buckets: usize) -> Result<Vec<Vector>> {
    Ok(bucket_ranges(samples.len(), buckets)?
        .into_iter()
        .map(|r| pairwise_mean(&samples[r]))
        .collect())
}

/// Index ranges of the `buckets` contiguous blocks used by [`bucket_means`].
pub fn bucket_ranges(n: usize, buckets: usize) -> Result<Vec<Range<usize>>> {
    if buckets == 0 || 2 * buckets > n {
        return Err(Error::TooFewSamples {
            buckets,
            needed: 2 * buckets,
            n,
        });
    }
    let size = n / buckets;
    Ok((0..buckets).map(|k| k * size..(k + 1) * size).collect())
}

/// Geometric median of bucket means of `samples`.
pub fn gmom_estimate(samples: &[Vector], config: &GmomConfig) -> Result<Vector> {
    let b = bucket_count(config.failure_prob)?;
    let means = bucket_means(samples, b)?;
    Ok(geometric_median(&means, config.tol, config.max_iter)?.point)
}

/// High-probability error bound `11 sqrt(trace * log(1.4/failure_prob) / n)`
/// for the estimate of a mean with covariance trace `trace`.
pub fn concentration_bound(trace: f64, failure_prob: f64, n: usize) -> f64 {
    11.0 * (trace * (1.4 / failure_prob).ln() / n as f64).sqrt()
}
