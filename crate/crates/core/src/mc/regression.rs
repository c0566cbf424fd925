//! Weighted (Nadaraya–Watson) estimates of conditional moments.

use rayon::prelude::*;

use super::sde::Ensemble;
use super::stats::chunk_ranges;
use crate::error::{Error, Result};
use crate::linalg::{spd_cholesky, Matrix, Vector};

/// Smallest effective sample size accepted for a conditional estimate.
pub const MIN_ESS: f64 = 100.0;

/// Weighted mean and covariance with delta-method standard errors.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalEstimate {
    pub mean: Vector,
    pub cov: Matrix,
    pub mean_std_err: Vector,
    pub cov_std_err: Matrix,
    /// `(Σw)² / Σw²`.
    pub ess: f64,
}

/// A weighted sample: weights and a row accessor.
pub struct Weighted<'a> {
    pub weights: &'a [f64],
    pub dim: usize,
    pub value: &'a (dyn Fn(usize) -> Vector + Sync),
}

/// A control variate: a second weighted sample whose conditional mean and
/// covariance are known exactly.
pub struct ControlVariate<'a> {
    pub sample: Weighted<'a>,
    pub mean: Vector,
    pub cov: Matrix,
}

fn chunked_sum<T: Send>(n: usize, init: impl Fn() -> T + Sync, f: impl Fn(&mut T, usize) + Sync, merge: impl Fn(T, T) -> T) -> T {
    let parts: Vec<T> = chunk_ranges(n, 8192)
        .into_par_iter()
        .map(|r| {
            let mut acc = init();
            for i in r {
                f(&mut acc, i);
            }
            acc
        })
        .collect();
    parts.into_iter().fold(init(), merge)
}

struct Raw {
    w: f64,
    mean: Vector,
    cov: Matrix,
}

fn raw_moments(s: &Weighted) -> Result<Raw> {
    let n = s.weights.len();
    let d = s.dim;
    let (w, sum) = chunked_sum(
        n,
        || (0.0, Vector::zeros(d)),
        |acc, i| {
            let wi = s.weights[i];
            if wi != 0.0 {
                acc.0 += wi;
                acc.1 += (s.value)(i) * wi;
            }
        },
        |a, b| (a.0 + b.0, a.1 + b.1),
    );
    if !(w > 0.0) {
        return Err(Error::EffectiveSampleSize { ess: 0.0, min: MIN_ESS });
    }
    let mean = sum / w;
    let cov = chunked_sum(
        n,
        || Matrix::zeros(d, d),
        |acc, i| {
            let wi = s.weights[i];
            if wi != 0.0 {
                let r = (s.value)(i) - &mean;
                acc.ger(wi, &r, &r, 1.0);
            }
        },
        |a, b| a + b,
    ) / w;
    Ok(Raw { w, mean, cov })
}

fn ess(weights: &[f64]) -> f64 {
    let (s, s2) = chunked_sum(
        weights.len(),
        || (0.0, 0.0),
        |acc, i| {
            acc.0 += weights[i];
            acc.1 += weights[i] * weights[i];
        },
        |a, b| (a.0 + b.0, a.1 + b.1),
    );
    if s2 > 0.0 {
        s * s / s2
    } else {
        0.0
    }
}

/// Weighted moments of `sample`, optionally corrected by a control variate:
/// the estimate is `m - (m_c - E_c)` for the mean and likewise for the
/// covariance.
pub fn weighted_moments(sample: &Weighted, control: Option<&ControlVariate>) -> Result<ConditionalEstimate> {
    let n = sample.weights.len();
    let d = sample.dim;
    let e = ess(sample.weights);
    if !(e >= MIN_ESS) {
        return Err(Error::EffectiveSampleSize { ess: e, min: MIN_ESS });
    }
    let a = raw_moments(sample)?;
    let c = match control {
        Some(cv) => {
            if cv.sample.weights.len() != n || cv.sample.dim != d {
                return Err(Error::Dimension {
                    what: "control variate",
                    expected: n,
                    got: cv.sample.weights.len(),
                });
            }
            Some((raw_moments(&cv.sample)?, cv))
        }
        None => None,
    };
    // influence of each sample on the mean and covariance estimates
    let (var_mean, var_cov) = chunked_sum(
        n,
        || (Vector::zeros(d), Matrix::zeros(d, d)),
        |acc, i| {
            let wi = sample.weights[i] / a.w;
            let r = (sample.value)(i) - &a.mean;
            let mut im = &r * wi;
            let mut ic = (&r * r.transpose() - &a.cov) * wi;
            if let Some((b, cv)) = &c {
                let wc = cv.sample.weights[i] / b.w;
                let rc = (cv.sample.value)(i) - &b.mean;
                im -= &rc * wc;
                ic -= (&rc * rc.transpose() - &b.cov) * wc;
            }
            acc.0 += im.component_mul(&im);
            acc.1 += ic.component_mul(&ic);
        },
        |x, y| (x.0 + y.0, x.1 + y.1),
    );
    let (mean, cov) = match &c {
        Some((b, cv)) => (&a.mean - &b.mean + &cv.mean, &a.cov - &b.cov + &cv.cov),
        None => (a.mean.clone(), a.cov.clone()),
    };
    Ok(ConditionalEstimate {
        mean,
        cov: (&cov + cov.transpose()) * 0.5,
        mean_std_err: var_mean.map(f64::sqrt),
        cov_std_err: var_cov.map(f64::sqrt),
        ess: e,
    })
}

/// Per-coordinate bandwidth `scale · sd(Z_k) · n^(-1/(q+4))`.
pub fn kr_bandwidth(ens: &Ensemble, scale: f64) -> Vector {
    let q = ens.q();
    let n = ens.len();
    let (s, s2) = chunked_sum(
        n,
        || (Vector::zeros(q), Vector::zeros(q)),
        |acc, i| {
            let z = Vector::from_column_slice(ens.z_delta(i));
            acc.1 += z.component_mul(&z);
            acc.0 += z;
        },
        |a, b| (a.0 + b.0, a.1 + b.1),
    );
    let nf = n as f64;
    let factor = scale * nf.powf(-1.0 / (q as f64 + 4.0));
    Vector::from_fn(q, |k, _| {
        let m = s[k] / nf;
        ((s2[k] / nf - m * m).max(0.0) * nf / (nf - 1.0)).sqrt() * factor
    })
}

/// Gaussian product-kernel weights `exp(-½ Σ ((z_k - query_k)/h_k)²)`.
pub fn kernel_weights(n: usize, z: impl Fn(usize) -> Vector + Sync, query: &Vector, bandwidth: &Vector) -> Vec<f64> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let r = (z(i) - query).component_div(bandwidth);
            (-0.5 * r.norm_squared()).exp()
        })
        .collect()
}

/// Gaussian weights `exp(-½ (query - m_i)ᵀ β⁻¹ (query - m_i))`: the
/// likelihood of `query` when the observation is `m_i` plus `N(0, β)` noise.
pub fn likelihood_weights(n: usize, mean: impl Fn(usize) -> Vector + Sync, query: &Vector, beta: &Matrix) -> Result<Vec<f64>> {
    let ch = spd_cholesky(beta, "observation covariance")?;
    let l = ch.l();
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let r = l.solve_lower_triangular(&(query - mean(i))).expect("non-singular factor");
            (-0.5 * r.norm_squared()).exp()
        })
        .collect())
}

/// Nadaraya–Watson estimate of `E[U_δ | Z_δ = query]` and
/// `Var(U_δ | Z_δ = query)`.
pub fn conditional_moments_kr(ens: &Ensemble, query: &Vector, bandwidth: &Vector) -> Result<ConditionalEstimate> {
    if query.len() != ens.q() || bandwidth.len() != ens.q() {
        return Err(Error::Dimension {
            what: "kernel query",
            expected: ens.q(),
            got: query.len(),
        });
    }
    if bandwidth.iter().any(|h| !(*h > 0.0)) {
        return Err(Error::InvalidArgument("bandwidth must be positive".into()));
    }
    let w = kernel_weights(ens.len(), |i| Vector::from_column_slice(ens.z_delta(i)), query, bandwidth);
    let value = |i: usize| Vector::from_column_slice(ens.u_delta(i));
    weighted_moments(
        &Weighted {
            weights: &w,
            dim: ens.p(),
            value: &value,
        },
        None,
    )
}
