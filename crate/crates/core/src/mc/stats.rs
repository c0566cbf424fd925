//! Deterministic reductions, moment accumulators and convergence-order fits.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};

/// Splits `0..n` into consecutive ranges of length `chunk` (the last may be
/// shorter). The partition depends only on `n` and `chunk`, so reductions
/// over it are independent of the thread count.
pub fn chunk_ranges(n: usize, chunk: usize) -> Vec<Range<usize>> {
    let chunk = chunk.max(1);
    (0..n.div_ceil(chunk)).map(|c| c * chunk..((c + 1) * chunk).min(n)).collect()
}

/// Streaming mean and covariance (Welford updates, Chan merges).
#[derive(Clone, Debug, PartialEq)]
pub struct VectorMoments {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
    delta: Vec<f64>,
}

impl VectorMoments {
    pub fn new(dim: usize) -> Self {
        Self {
            n: 0.0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim * dim],
            delta: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn count(&self) -> usize {
        self.n as usize
    }

    pub fn push(&mut self, x: &[f64]) {
        let d = self.mean.len();
        self.n += 1.0;
        for i in 0..d {
            self.delta[i] = x[i] - self.mean[i];
            self.mean[i] += self.delta[i] / self.n;
        }
        for i in 0..d {
            let after = x[i] - self.mean[i];
            for j in 0..d {
                self.m2[i * d + j] += self.delta[j] * after;
            }
        }
    }

    pub fn merge(&mut self, other: &VectorMoments) {
        if other.n == 0.0 {
            return;
        }
        if self.n == 0.0 {
            *self = other.clone();
            return;
        }
        let d = self.mean.len();
        let n = self.n + other.n;
        for i in 0..d {
            self.delta[i] = other.mean[i] - self.mean[i];
        }
        let w = self.n * other.n / n;
        for i in 0..d {
            for j in 0..d {
                self.m2[i * d + j] += other.m2[i * d + j] + self.delta[i] * self.delta[j] * w;
            }
        }
        for i in 0..d {
            self.mean[i] += self.delta[i] * other.n / n;
        }
        self.n = n;
    }

    pub fn mean(&self) -> Vector {
        Vector::from_column_slice(&self.mean)
    }

    /// Unbiased sample covariance.
    pub fn covariance(&self) -> Matrix {
        let d = self.mean.len();
        let denom = (self.n - 1.0).max(1.0);
        Matrix::from_fn(d, d, |i, j| 0.5 * (self.m2[i * d + j] + self.m2[j * d + i]) / denom)
    }

    /// Standard error of each component of the mean.
    pub fn std_err(&self) -> Vector {
        let cov = self.covariance();
        Vector::from_fn(self.dim(), |i, _| (cov[(i, i)].max(0.0) / self.n.max(1.0)).sqrt())
    }

    /// Standard error of the mean's Euclidean norm (delta method, floored
    /// by the largest component error so a zero mean is handled).
    pub fn norm_std_err(&self) -> f64 {
        let m = self.mean();
        let cov = self.covariance() / self.n.max(1.0);
        let norm = m.norm();
        let se_max = self.std_err().amax();
        if norm == 0.0 {
            return se_max;
        }
        let u = &m / norm;
        (u.dot(&(&cov * &u))).max(0.0).sqrt()
    }

    /// Standard errors of the entries of the sample covariance, under a
    /// Gaussian working model: `Var(S_ij) ≈ (S_ii S_jj + S_ij²)/n`.
    pub fn covariance_std_err(&self) -> Matrix {
        let c = self.covariance();
        let n = self.n.max(1.0);
        Matrix::from_fn(self.dim(), self.dim(), |i, j| ((c[(i, i)] * c[(j, j)] + c[(i, j)] * c[(i, j)]) / n).sqrt())
    }
}

/// Default number of batches for [`BatchMeans`].
pub const BATCHES: usize = 256;

/// Splits `0..n` into about `batches` consecutive ranges of even length (the
/// last may be shorter), so antithetic pairs never straddle two ranges.
pub fn batch_ranges(n: usize, batches: usize) -> Vec<Range<usize>> {
    let chunk = n.div_ceil(batches.max(1));
    chunk_ranges(n, chunk + chunk % 2)
}

/// Ratio means over batches of samples, with standard errors taken from the
/// spread of the batch sums. Valid when samples are dependent within a batch
/// and independent across batches.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchMeans {
    dim: usize,
    sums: Vec<Vec<f64>>,
    counts: Vec<f64>,
}

/// Running sum of one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchSum {
    sum: Vec<f64>,
    count: usize,
}

impl BatchSum {
    pub fn new(dim: usize) -> Self {
        Self { sum: vec![0.0; dim], count: 0 }
    }

    pub fn add(&mut self, x: &[f64]) {
        for (s, v) in self.sum.iter_mut().zip(x) {
            *s += v;
        }
        self.count += 1;
    }

    pub fn count(&self) -> usize {
        self.count
    }
}

impl BatchMeans {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            sums: Vec::new(),
            counts: Vec::new(),
        }
    }

    pub fn push(&mut self, batch: BatchSum) {
        assert_eq!(batch.sum.len(), self.dim);
        self.sums.push(batch.sum);
        self.counts.push(batch.count as f64);
    }

    pub fn batches(&self) -> usize {
        self.sums.len()
    }

    pub fn count(&self) -> usize {
        self.counts.iter().sum::<f64>() as usize
    }

    pub fn mean(&self) -> Vector {
        let n: f64 = self.counts.iter().sum();
        let mut m = Vector::zeros(self.dim);
        if n == 0.0 {
            return m;
        }
        for s in &self.sums {
            for (a, b) in m.iter_mut().zip(s) {
                *a += b;
            }
        }
        m / n
    }

    /// Covariance of the mean estimate.
    pub fn mean_covariance(&self) -> Matrix {
        let b = self.sums.len() as f64;
        let n: f64 = self.counts.iter().sum();
        let mut c = Matrix::zeros(self.dim, self.dim);
        if b < 2.0 || n == 0.0 {
            return c;
        }
        let m = self.mean();
        for (s, &k) in self.sums.iter().zip(&self.counts) {
            let d = Vector::from_fn(self.dim, |i, _| s[i] - m[i] * k);
            c.ger(1.0, &d, &d, 1.0);
        }
        c * (b / (b - 1.0) / (n * n))
    }

    pub fn std_err(&self) -> Vector {
        self.mean_covariance().diagonal().map(|v| v.max(0.0).sqrt())
    }

    /// Standard error of the mean's Euclidean norm (delta method; the largest
    /// component error when the mean is zero).
    pub fn norm_std_err(&self) -> f64 {
        let m = self.mean();
        let norm = m.norm();
        if norm == 0.0 {
            return self.std_err().amax();
        }
        let u = &m / norm;
        u.dot(&(self.mean_covariance() * &u)).max(0.0).sqrt()
    }
}

/// Least-squares fit of `log(error) = intercept + slope · log(γ)`.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct OrderFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    /// Standard error of the slope from the fit residuals (or from the
    /// supplied error bars in [`order_fit_weighted`]).
    pub slope_se: f64,
}

fn check_ladder(gammas: &[f64], errors: &[f64]) -> Result<()> {
    if gammas.len() != errors.len() {
        return Err(Error::Dimension {
            what: "order fit ladder",
            expected: gammas.len(),
            got: errors.len(),
        });
    }
    if gammas.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "order fit needs at least 3 ladder points, got {}",
            gammas.len()
        )));
    }
    if let Some(e) = errors.iter().chain(gammas).find(|e| !(**e > 0.0) || !e.is_finite()) {
        return Err(Error::InvalidArgument(format!("order fit needs positive finite values, got {e}")));
    }
    Ok(())
}

fn weighted_fit(x: &[f64], y: &[f64], w: &[f64]) -> (f64, f64, f64, f64) {
    let sw: f64 = w.iter().sum();
    let mx = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let my = y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let sxx: f64 = x.iter().zip(w).map(|(a, b)| b * (a - mx) * (a - mx)).sum();
    let sxy: f64 = x.iter().zip(y).zip(w).map(|((a, c), b)| b * (a - mx) * (c - my)).sum();
    let syy: f64 = y.iter().zip(w).map(|(c, b)| b * (c - my) * (c - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy > 0.0 { (sxy * sxy) / (sxx * syy) } else { 1.0 };
    (slope, intercept, r2, sxx)
}

/// Ordinary least squares in log-log space.
pub fn order_fit(gammas: &[f64], errors: &[f64]) -> Result<OrderFit> {
    check_ladder(gammas, errors)?;
    let x: Vec<f64> = gammas.iter().map(|g| g.ln()).collect();
    let y: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let w = vec![1.0; x.len()];
    let (slope, intercept, r2, sxx) = weighted_fit(&x, &y, &w);
    let n = x.len() as f64;
    let rss: f64 = x.iter().zip(&y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let slope_se = if n > 2.0 { (rss / (n - 2.0) / sxx).sqrt() } else { 0.0 };
    Ok(OrderFit {
        slope,
        intercept,
        r2,
        slope_se,
    })
}

/// Weighted least squares in log-log space with weights `(error/se)²`, the
/// inverse delta-method variance of `log(error)`.
pub fn order_fit_weighted(gammas: &[f64], errors: &[f64], std_errs: &[f64]) -> Result<OrderFit> {
    check_ladder(gammas, errors)?;
    if std_errs.len() != errors.len() {
        return Err(Error::Dimension {
            what: "order fit standard errors",
            expected: errors.len(),
            got: std_errs.len(),
        });
    }
    let x: Vec<f64> = gammas.iter().map(|g| g.ln()).collect();
    let y: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let w: Vec<f64> = errors
        .iter()
        .zip(std_errs)
        .map(|(e, s)| if *s > 0.0 { (e / s).powi(2) } else { 1e12 })
        .collect();
    let (slope, intercept, r2, sxx) = weighted_fit(&x, &y, &w);
    Ok(OrderFit {
        slope,
        intercept,
        r2,
        slope_se: (1.0 / sxx).sqrt(),
    })
}
