//! Small dense linear algebra on top of `nalgebra`, plus the symmetric
//! bilinear-map type used for connectors, second fundamental forms and the
//! quadratic terms of the conditional-moment formulas.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// Condition number above which an SPD solve is refused.
pub const MAX_CONDITION: f64 = 1e12;

/// A bilinear map `R^n x R^n -> R^m`, stored as `m` slices of `n x n`
/// coefficients: `B(u, v)^k = sum_ij data[k][i][j] u^i v^j`.
///
/// Connectors, curvature-free quadratic corrections and second fundamental
/// forms are all of this shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Bilinear {
    out_dim: usize,
    in_dim: usize,
    data: Vec<f64>,
}

impl Bilinear {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            out_dim,
            in_dim,
            data: vec![0.0; out_dim * in_dim * in_dim],
        }
    }

    /// Wraps a flat `[k][i][j]` coefficient array.
    pub fn from_flat(out_dim: usize, in_dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != out_dim * in_dim * in_dim {
            return Err(Error::Dimension {
                what: "bilinear coefficient array",
                expected: out_dim * in_dim * in_dim,
                got: data.len(),
            });
        }
        Ok(Self {
            out_dim,
            in_dim,
            data,
        })
    }

    /// One `n x n` matrix per output coordinate.
    pub fn from_matrices(mats: &[Matrix]) -> Result<Self> {
        let out_dim = mats.len();
        let in_dim = mats.first().map_or(0, |m| m.nrows());
        let mut b = Self::zeros(out_dim, in_dim);
        for (k, m) in mats.iter().enumerate() {
            if m.nrows() != in_dim || m.ncols() != in_dim {
                return Err(Error::Dimension {
                    what: "bilinear component",
                    expected: in_dim,
                    got: m.nrows().max(m.ncols()),
                });
            }
            for i in 0..in_dim {
                for j in 0..in_dim {
                    b.set(k, i, j, m[(i, j)]);
                }
            }
        }
        Ok(b)
    }

    pub fn from_fn(out_dim: usize, in_dim: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut b = Self::zeros(out_dim, in_dim);
        for k in 0..out_dim {
            for i in 0..in_dim {
                for j in 0..in_dim {
                    b.set(k, i, j, f(k, i, j));
                }
            }
        }
        b
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, k: usize, i: usize, j: usize) -> f64 {
        self.data[(k * self.in_dim + i) * self.in_dim + j]
    }

    #[inline]
    pub fn set(&mut self, k: usize, i: usize, j: usize, value: f64) {
        let n = self.in_dim;
        self.data[(k * n + i) * n + j] = value;
    }

    pub fn component(&self, k: usize) -> Matrix {
        Matrix::from_fn(self.in_dim, self.in_dim, |i, j| self.get(k, i, j))
    }

    pub fn apply(&self, u: &Vector, v: &Vector) -> Vector {
        let mut out = Vector::zeros(self.out_dim);
        bilinear_apply(&self.data, self.out_dim, self.in_dim, u.as_slice(), v.as_slice(), out.as_mut_slice());
        out
    }

    /// Trace pairing with a (covariance) matrix: `sum_ij B^k_ij C_ij`.
    pub fn contract(&self, cov: &Matrix) -> Vector {
        let n = self.in_dim;
        Vector::from_fn(self.out_dim, |k, _| {
            let mut s = 0.0;
            for i in 0..n {
                for j in 0..n {
                    s += self.get(k, i, j) * cov[(i, j)];
                }
            }
            s
        })
    }

    /// `L . B`, mixing output coordinates.
    pub fn map_output(&self, l: &Matrix) -> Bilinear {
        let n = self.in_dim;
        Bilinear::from_fn(l.nrows(), n, |k, i, j| {
            (0..self.out_dim).map(|m| l[(k, m)] * self.get(m, i, j)).sum()
        })
    }

    /// `B(M ., M .)`, pulling the inputs back through `M`.
    pub fn map_input(&self, m: &Matrix) -> Bilinear {
        let n_new = m.ncols();
        let mut out = Bilinear::zeros(self.out_dim, n_new);
        for k in 0..self.out_dim {
            let c = m.transpose() * self.component(k) * m;
            for a in 0..n_new {
                for b in 0..n_new {
                    out.set(k, a, b, c[(a, b)]);
                }
            }
        }
        out
    }

    pub fn scaled(&self, s: f64) -> Bilinear {
        Bilinear {
            out_dim: self.out_dim,
            in_dim: self.in_dim,
            data: self.data.iter().map(|x| x * s).collect(),
        }
    }

    pub fn add(&self, other: &Bilinear) -> Bilinear {
        debug_assert_eq!(self.data.len(), other.data.len());
        Bilinear {
            out_dim: self.out_dim,
            in_dim: self.in_dim,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn sub(&self, other: &Bilinear) -> Bilinear {
        self.add(&other.scaled(-1.0))
    }

    /// Symmetric part in the two input slots.
    pub fn symmetrized(&self) -> Bilinear {
        Bilinear::from_fn(self.out_dim, self.in_dim, |k, i, j| 0.5 * (self.get(k, i, j) + self.get(k, j, i)))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// Slice-level `B(u, v)` used in hot loops.
#[inline]
pub fn bilinear_apply(data: &[f64], out_dim: usize, n: usize, u: &[f64], v: &[f64], out: &mut [f64]) {
    for k in 0..out_dim {
        let base = k * n * n;
        let mut s = 0.0;
        for i in 0..n {
            let ui = u[i];
            if ui == 0.0 {
                continue;
            }
            let row = &data[base + i * n..base + (i + 1) * n];
            let mut t = 0.0;
            for j in 0..n {
                t += row[j] * v[j];
            }
            s += ui * t;
        }
        out[k] = s;
    }
}

pub fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

/// Eigenvalue-based condition number of a symmetric matrix.
pub fn spd_condition(m: &Matrix) -> f64 {
    let eig = SymmetricEigen::new(symmetrize(m));
    let max = eig.eigenvalues.iter().fold(f64::MIN, |a, &b| a.max(b));
    let min = eig.eigenvalues.iter().fold(f64::MAX, |a, &b| a.min(b));
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Cholesky factorization that refuses matrices with condition above
/// [`MAX_CONDITION`].
pub fn spd_cholesky(m: &Matrix, what: &'static str) -> Result<Cholesky<f64, nalgebra::Dyn>> {
    let cond = spd_condition(m);
    if !cond.is_finite() || cond > MAX_CONDITION {
        return Err(Error::Singular { what, condition: cond });
    }
    Cholesky::new(symmetrize(m)).ok_or(Error::NotPositiveDefinite(what))
}

/// Solves `S X = B` for SPD `S`.
pub fn spd_solve(s: &Matrix, b: &Matrix, what: &'static str) -> Result<Matrix> {
    Ok(spd_cholesky(s, what)?.solve(b))
}

pub fn spd_inverse(s: &Matrix, what: &'static str) -> Result<Matrix> {
    Ok(spd_cholesky(s, what)?.inverse())
}

/// A factor `L` with `L L^T = m` for a symmetric positive semi-definite
/// matrix, tolerating exact zeros (degenerate covariances).
pub fn psd_factor(m: &Matrix) -> Result<Matrix> {
    let sym = symmetrize(m);
    if let Some(ch) = Cholesky::new(sym.clone()) {
        let l = ch.l();
        let d = l.diagonal();
        let max = d.amax();
        if d.iter().all(|&x| x * x > 1e-12 * max * max) {
            return Ok(l);
        }
    }
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(0.0_f64, |a, &b| a.max(b.abs())).max(1e-300);
    let mut d = Vector::zeros(eig.eigenvalues.len());
    for (i, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda < -1e-12 * scale {
            return Err(Error::NotPositiveDefinite("covariance factor"));
        }
        d[i] = lambda.max(0.0).sqrt();
    }
    Ok(&eig.eigenvectors * Matrix::from_diagonal(&d))
}

/// Smallest eigenvalue of the symmetric part.
pub fn min_eigenvalue(m: &Matrix) -> f64 {
    SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .fold(f64::MAX, |a, &b| a.min(b))
}

pub fn basis_vector(dim: usize, i: usize) -> Vector {
    let mut e = Vector::zeros(dim);
    e[i] = 1.0;
    e
}

pub fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    (a - b).iter().fold(0.0, |m, x| m.max(x.abs()))
}
