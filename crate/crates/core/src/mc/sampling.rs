//! Gaussian sample sets in a tangent space.

use rayon::prelude::*;

use super::rng::{fill_normal, stream_rng};
use super::stats::chunk_ranges;
use crate::error::{Error, Result};
use crate::linalg::{psd_factor, spd_cholesky, Matrix, Vector};

/// How a Gaussian sample set is drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingScheme {
    /// Independent draws.
    Plain,
    /// Antithetic pairs `μ ± ξ`, linearly rescaled so the empirical mean and
    /// covariance equal the targets exactly.
    MomentMatched,
}

/// `n` standard normal vectors of length `dim`; vector `i` comes from
/// stream `i`.
pub fn standard_normal_vectors(dim: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
    chunk_ranges(n, 4096)
        .into_par_iter()
        .flat_map_iter(|range| {
            range.map(move |i| {
                let mut rng = stream_rng(seed, i as u64);
                let mut x = vec![0.0; dim];
                fill_normal(&mut rng, &mut x);
                x
            })
        })
        .collect()
}

/// Standard normal noise for `n` samples, generated on demand by index.
///
/// With [`SamplingScheme::MomentMatched`], samples `2k` and `2k + 1` are the
/// antithetic pair built from stream `k`, whitened so the empirical second
/// moment over all `n` samples is exactly the identity.
#[derive(Clone, Debug)]
pub struct NoiseStream {
    dim: usize,
    n: usize,
    seed: u64,
    scheme: SamplingScheme,
    whiten: Option<Matrix>,
}

impl NoiseStream {
    pub fn new(dim: usize, n: usize, seed: u64, scheme: SamplingScheme) -> Result<Self> {
        let whiten = match scheme {
            SamplingScheme::Plain => None,
            SamplingScheme::MomentMatched => {
                if n % 2 != 0 || n < 2 * dim.max(1) {
                    return Err(Error::InvalidArgument(format!(
                        "moment-matched sampling needs an even sample count of at least {}, got {n}",
                        2 * dim.max(1)
                    )));
                }
                let parts: Vec<Matrix> = chunk_ranges(n / 2, 8192)
                    .into_par_iter()
                    .map(|range| {
                        let mut c = Matrix::zeros(dim, dim);
                        let mut x = vec![0.0; dim];
                        for k in range {
                            fill_normal(&mut stream_rng(seed, k as u64), &mut x);
                            c.ger(1.0, &Vector::from_column_slice(&x), &Vector::from_column_slice(&x), 1.0);
                        }
                        c
                    })
                    .collect();
                let mut c = Matrix::zeros(dim, dim);
                for part in parts {
                    c += part;
                }
                c /= (n / 2) as f64;
                let lc = spd_cholesky(&c, "empirical second moment")?.l();
                Some(lc.try_inverse().ok_or(Error::Singular {
                    what: "empirical second moment",
                    condition: f64::INFINITY,
                })?)
            }
        };
        Ok(Self {
            dim,
            n,
            seed,
            scheme,
            whiten,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn scheme(&self) -> SamplingScheme {
        self.scheme
    }

    /// Writes noise sample `i` into `out`; `scratch` must have length `dim`.
    pub fn fill(&self, i: usize, out: &mut [f64], scratch: &mut [f64]) {
        match &self.whiten {
            None => fill_normal(&mut stream_rng(self.seed, i as u64), out),
            Some(w) => {
                fill_normal(&mut stream_rng(self.seed, (i / 2) as u64), scratch);
                let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
                for r in 0..self.dim {
                    let mut s = 0.0;
                    for c in 0..=r {
                        s += w[(r, c)] * scratch[c];
                    }
                    out[r] = sign * s;
                }
            }
        }
    }

    pub fn sample(&self, i: usize) -> Vector {
        let mut out = Vector::zeros(self.dim);
        let mut scratch = vec![0.0; self.dim];
        self.fill(i, out.as_mut_slice(), &mut scratch);
        out
    }
}

/// Draws `n` vectors with mean `mean` and covariance `cov`.
pub fn gaussian_vectors(mean: &Vector, cov: &Matrix, n: usize, seed: u64, scheme: SamplingScheme) -> Result<Vec<Vector>> {
    let p = mean.len();
    if cov.nrows() != p || cov.ncols() != p {
        return Err(Error::Dimension {
            what: "sample covariance",
            expected: p,
            got: cov.nrows(),
        });
    }
    let l = psd_factor(cov)?;
    let noise = NoiseStream::new(p, n, seed, scheme)?;
    Ok(chunk_ranges(n, 4096)
        .into_par_iter()
        .flat_map_iter(|range| {
            let mut xi = vec![0.0; p];
            let mut scratch = vec![0.0; p];
            let (noise, l) = (&noise, &l);
            range.map(move |i| {
                noise.fill(i, &mut xi, &mut scratch);
                mean + l * Vector::from_column_slice(&xi)
            })
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moment_matched_moments_are_exact() {
        let mean = Vector::from_vec(vec![0.1, -0.2]);
        let cov = Matrix::from_row_slice(2, 2, &[0.04, 0.01, 0.01, 0.02]);
        let xs = gaussian_vectors(&mean, &cov, 1000, 5, SamplingScheme::MomentMatched).unwrap();
        let m: Vector = xs.iter().fold(Vector::zeros(2), |a, x| a + x) / 1000.0;
        let c = xs.iter().fold(Matrix::zeros(2, 2), |a, x| a + (x - &mean) * (x - &mean).transpose()) / 1000.0;
        assert!((m - &mean).norm() < 1e-15);
        assert!((c - cov).norm() < 1e-15);
    }

    #[test]
    fn draws_are_reproducible() {
        let a = standard_normal_vectors(3, 10, 42);
        let b = standard_normal_vectors(3, 10, 42);
        assert_eq!(a, b);
        assert_ne!(a, standard_normal_vectors(3, 10, 43));
    }
}
