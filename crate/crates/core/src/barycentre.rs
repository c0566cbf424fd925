//! Curvature-corrected exponential barycentres and Monte Carlo residual checks.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{min_eigenvalue, Matrix, Vector};
use crate::manifold::{ensure_contains, exp_taylor, metric_at, Chart, CurvatureAt, GeodesicSolver, LogOptions};
use crate::mc::stats::{chunk_ranges, VectorMoments};

/// Mean and covariance of a tangent random vector at a base point.
#[derive(Clone, Debug, PartialEq)]
pub struct TangentMoments {
    pub base: Vector,
    pub mu: Vector,
    pub sigma: Matrix,
}

impl TangentMoments {
    pub fn new(base: Vector, mu: Vector, sigma: Matrix) -> Result<Self> {
        let p = base.len();
        if mu.len() != p || sigma.nrows() != p || sigma.ncols() != p {
            return Err(Error::Dimension {
                what: "tangent moments",
                expected: p,
                got: mu.len(),
            });
        }
        let asym = (&sigma - sigma.transpose()).amax();
        if asym > 1e-12 * sigma.amax().max(1.0) {
            return Err(Error::InvalidArgument("covariance is not symmetric".into()));
        }
        if p > 0 && min_eigenvalue(&sigma) < -1e-12 {
            return Err(Error::NotPositiveDefinite("tangent covariance"));
        }
        Ok(Self { base, mu, sigma })
    }
}

/// `ρ_c = ⅓ Σ R(e_i, e_j)e_k μ^i Σ^{jk}`.
pub fn curvature_correction(chart: &dyn Chart, m: &TangentMoments) -> Result<Vector> {
    let r = CurvatureAt::new(chart, &m.base)?;
    let p = chart.dim();
    let t = r.tensor();
    let mut out = Vector::zeros(p);
    for i in 0..p {
        if m.mu[i] == 0.0 {
            continue;
        }
        for j in 0..p {
            for k in 0..p {
                let w = m.mu[i] * m.sigma[(j, k)] / 3.0;
                if w == 0.0 {
                    continue;
                }
                let base = ((i * p + j) * p + k) * p;
                for c in 0..p {
                    out[c] += w * t[base + c];
                }
            }
        }
    }
    Ok(out)
}

/// Approximate exponential barycentre `exp_x(μ − ρ_c)`, with the exponential
/// evaluated by its third-order expansion.
pub fn exp_barycentre(chart: &dyn Chart, m: &TangentMoments) -> Result<Vector> {
    let rho = curvature_correction(chart, m)?;
    exp_taylor(chart, &m.base, &(&m.mu - rho), 1.0)
}

/// A `(1,3)` tensor field evaluated on coordinate vectors at a point.
pub trait TensorField: Send + Sync {
    fn apply(&self, chart: &dyn Chart, x: &Vector, a: &[f64], b: &[f64], c: &[f64], out: &mut [f64]) -> Result<()>;
}

/// The curvature tensor `T(a,b,c) = R(a,b)c`.
#[derive(Clone, Copy, Debug, Default)]
pub struct CurvatureField;

impl TensorField for CurvatureField {
    fn apply(&self, chart: &dyn Chart, x: &Vector, a: &[f64], b: &[f64], c: &[f64], out: &mut [f64]) -> Result<()> {
        CurvatureAt::new(chart, x)?.apply_slices(a, b, c, out);
        Ok(())
    }
}

/// `T(a,b,c) = g(a,b) c`.
#[derive(Clone, Copy, Debug, Default)]
pub struct MetricVectorField;

impl TensorField for MetricVectorField {
    fn apply(&self, chart: &dyn Chart, x: &Vector, a: &[f64], b: &[f64], c: &[f64], out: &mut [f64]) -> Result<()> {
        let g = metric_at(chart, x)?;
        let p = a.len();
        let mut s = 0.0;
        for i in 0..p {
            for j in 0..p {
                s += a[i] * g[(i, j)] * b[j];
            }
        }
        for k in 0..p {
            out[k] = s * c[k];
        }
        Ok(())
    }
}

const CHUNK: usize = 2048;

fn map_logs<F>(chart: &dyn Chart, z: &Vector, samples: &[Vector], opts: &LogOptions, dim_out: usize, f: F) -> Result<VectorMoments>
where
    F: Fn(&Vector, &mut [f64]) -> Result<()> + Sync,
{
    ensure_contains(chart, z.as_slice())?;
    let parts: Vec<Result<VectorMoments>> = chunk_ranges(samples.len(), CHUNK)
        .into_par_iter()
        .map(|range| {
            let mut solver = GeodesicSolver::new(chart);
            let mut acc = VectorMoments::new(dim_out);
            let mut out = vec![0.0; dim_out];
            for i in range {
                let eta = solver.log(z, &samples[i], opts).map_err(|e| Error::Sample {
                    index: i,
                    source: Box::new(e),
                })?;
                f(&eta, &mut out).map_err(|e| Error::Sample {
                    index: i,
                    source: Box::new(e),
                })?;
                acc.push(&out);
            }
            Ok(acc)
        })
        .collect();
    let mut total = VectorMoments::new(dim_out);
    for part in parts {
        total.merge(&part?);
    }
    Ok(total)
}

/// Sample mean of `exp_z⁻¹(sample)` with per-component standard errors.
pub fn residual_stats(chart: &dyn Chart, z: &Vector, samples: &[Vector], opts: &LogOptions) -> Result<VectorMoments> {
    map_logs(chart, z, samples, opts, chart.dim(), |eta, out| {
        out.copy_from_slice(eta.as_slice());
        Ok(())
    })
}

/// Sample mean of the numerical logarithm of each sample at `z`.
pub fn residual_mean(chart: &dyn Chart, z: &Vector, samples: &[Vector]) -> Result<Vector> {
    Ok(residual_stats(chart, z, samples, &LogOptions::default())?.mean())
}

/// Sample mean of `T(η̂, η̂, η̂)` with `η̂ = exp_z⁻¹(sample)`, with standard errors.
pub fn third_moment_stats(
    chart: &dyn Chart,
    z: &Vector,
    samples: &[Vector],
    t: &dyn TensorField,
    opts: &LogOptions,
) -> Result<VectorMoments> {
    map_logs(chart, z, samples, opts, chart.dim(), |eta, out| {
        let e = eta.as_slice();
        t.apply(chart, z, e, e, e, out)
    })
}

pub fn third_moment_check(chart: &dyn Chart, z: &Vector, samples: &[Vector], t: &dyn TensorField) -> Result<Vector> {
    Ok(third_moment_stats(chart, z, samples, t, &LogOptions::default())?.mean())
}
