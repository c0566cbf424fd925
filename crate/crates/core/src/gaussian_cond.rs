//! Conditional moments of quadratically perturbed Gaussian vectors.
//!
//! With `(U, V, Z)` jointly Gaussian, `E[U] = 0`, and symmetric bilinear maps
//! `λ`, `θ`, the observed pair is
//!
//! ```text
//! X = Z + λ(U ⊗ U),    Y = V + θ(U ⊗ U)
//! ```
//!
//! [`approx_conditional_mean`] gives a closed-form surrogate `W` for
//! `E[X | Y]` whose error is fourth order in the noise scale when tested
//! against bounded `C¹` functions of `Y − E[Y]`. [`weak_contract`] measures
//! exactly that by Monte Carlo.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{min_eigenvalue, psd_factor, spd_cholesky, symmetrize, Bilinear, Matrix, Vector};
use crate::mc::stats::BATCHES;
use crate::mc::{batch_ranges, BatchMeans, BatchSum, NoiseStream, SamplingScheme};

const SYMMETRY_TOL: f64 = 1e-12;

/// Joint second-order data of `(U, V, Z)` plus the quadratic perturbations.
///
/// Field names follow roles: `var_u = Var U` (p×p), `cov_vu = Cov(V, U)`
/// (q×p), `var_v = Var V` (q×q), `cov_vz = Cov(V, Z)` (q×r),
/// `var_z = Var Z` (r×r).
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticGaussianModel {
    pub var_u: Matrix,
    pub cov_vu: Matrix,
    pub var_v: Matrix,
    pub cov_vz: Matrix,
    pub var_z: Matrix,
    pub mu_v: Vector,
    pub mu_z: Vector,
    /// `R^p ⊗ R^p → R^r`
    pub lambda: Bilinear,
    /// `R^p ⊗ R^p → R^q`
    pub theta: Bilinear,
}

fn check_shape(what: &'static str, m: &Matrix, rows: usize, cols: usize) -> Result<()> {
    if m.nrows() != rows {
        return Err(Error::Dimension {
            what,
            expected: rows,
            got: m.nrows(),
        });
    }
    if m.ncols() != cols {
        return Err(Error::Dimension {
            what,
            expected: cols,
            got: m.ncols(),
        });
    }
    Ok(())
}

fn check_psd(what: &'static str, m: &Matrix) -> Result<()> {
    let scale = m.amax().max(f64::MIN_POSITIVE);
    if (m - m.transpose()).amax() > SYMMETRY_TOL * scale.max(1.0) {
        return Err(Error::InvalidArgument(format!("{what} is not symmetric")));
    }
    if m.nrows() > 0 && min_eigenvalue(m) < -1e-12 * scale {
        return Err(Error::NotPositiveDefinite(what));
    }
    Ok(())
}

fn block(tl: &Matrix, bl: &Matrix, br: &Matrix) -> Matrix {
    let (a, b) = (tl.nrows(), br.nrows());
    let mut m = Matrix::zeros(a + b, a + b);
    m.view_mut((0, 0), (a, a)).copy_from(tl);
    m.view_mut((a, 0), (b, a)).copy_from(bl);
    m.view_mut((0, a), (a, b)).copy_from(&bl.transpose());
    m.view_mut((a, a), (b, b)).copy_from(br);
    m
}

impl QuadraticGaussianModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        var_u: Matrix,
        cov_vu: Matrix,
        var_v: Matrix,
        cov_vz: Matrix,
        var_z: Matrix,
        mu_v: Vector,
        mu_z: Vector,
        lambda: Bilinear,
        theta: Bilinear,
    ) -> Result<Self> {
        let (p, q, r) = (var_u.nrows(), var_v.nrows(), var_z.nrows());
        check_shape("Var U", &var_u, p, p)?;
        check_shape("Cov(V, U)", &cov_vu, q, p)?;
        check_shape("Var V", &var_v, q, q)?;
        check_shape("Cov(V, Z)", &cov_vz, q, r)?;
        check_shape("Var Z", &var_z, r, r)?;
        if mu_v.len() != q {
            return Err(Error::Dimension {
                what: "mean of V",
                expected: q,
                got: mu_v.len(),
            });
        }
        if mu_z.len() != r {
            return Err(Error::Dimension {
                what: "mean of Z",
                expected: r,
                got: mu_z.len(),
            });
        }
        for (what, form, out) in [("lambda", &lambda, r), ("theta", &theta, q)] {
            if form.out_dim() != out || form.in_dim() != p {
                return Err(Error::InvalidArgument(format!(
                    "{what} must map R^{p} x R^{p} to R^{out}, got R^{} x R^{} to R^{}",
                    form.in_dim(),
                    form.in_dim(),
                    form.out_dim()
                )));
            }
            if form.sub(&form.symmetrized()).max_abs() > SYMMETRY_TOL * form.max_abs().max(1.0) {
                return Err(Error::InvalidArgument(format!("{what} is not symmetric")));
            }
        }
        spd_cholesky(&var_v, "Var V")?;
        check_psd("Var U", &var_u)?;
        check_psd("Var Z", &var_z)?;
        check_psd("joint covariance of (U, V)", &block(&var_u, &cov_vu, &var_v))?;
        check_psd("joint covariance of (Z, V)", &block(&var_z, &cov_vz, &var_v))?;
        Ok(Self {
            var_u,
            cov_vu,
            var_v,
            cov_vz,
            var_z,
            mu_v,
            mu_z,
            lambda,
            theta,
        })
    }

    pub fn p(&self) -> usize {
        self.var_u.nrows()
    }

    pub fn q(&self) -> usize {
        self.var_v.nrows()
    }

    pub fn r(&self) -> usize {
        self.var_z.nrows()
    }

    /// `E[X] = μ_Z + λ(Var U)`.
    pub fn expected_x(&self) -> Vector {
        &self.mu_z + self.lambda.contract(&self.var_u)
    }

    /// `E[Y] = μ_V + θ(Var U)`.
    pub fn expected_y(&self) -> Vector {
        &self.mu_v + self.theta.contract(&self.var_u)
    }

    /// Precomputes the coefficients of the approximate conditional mean.
    pub fn mean_map(&self) -> Result<ConditionalMeanMap> {
        let s = spd_cholesky(&self.var_v, "Var V")?;
        let gain = s.solve(&self.cov_vz).transpose();
        let h = s.solve(&self.cov_vu).transpose();
        let rho = self.lambda.sub(&self.theta.map_output(&gain));
        let offset = rho.contract(&symmetrize(&(&h * &self.var_v * h.transpose())));
        Ok(ConditionalMeanMap {
            ex: self.expected_x() - offset,
            ey: self.expected_y(),
            gain,
            h,
            rho,
        })
    }
}

/// `U | V = v ~ N(Aᵀ S⁻¹ (v − μ_V), Q − Aᵀ S⁻¹ A)` with `A = Cov(V, U)`.
pub fn conditional_gaussian(var_u: &Matrix, cov_vu: &Matrix, var_v: &Matrix, v: &Vector, mu_v: &Vector) -> Result<(Vector, Matrix)> {
    let (p, q) = (var_u.nrows(), var_v.nrows());
    check_shape("Var U", var_u, p, p)?;
    check_shape("Cov(V, U)", cov_vu, q, p)?;
    check_shape("Var V", var_v, q, q)?;
    if v.len() != q || mu_v.len() != q {
        return Err(Error::Dimension {
            what: "conditioning value",
            expected: q,
            got: v.len().min(mu_v.len()),
        });
    }
    let s = spd_cholesky(var_v, "Var V")?;
    let sa = s.solve(cov_vu);
    let mean = sa.transpose() * (v - mu_v);
    let cov = symmetrize(&(var_u - cov_vu.transpose() * sa));
    Ok((mean, cov))
}

/// `W(y) = E[X] + G ŷ + ρ(ŷ ⊗ ŷ) − E[ρ(ŷ ⊗ ŷ)]` with `ŷ = y − E[Y]`,
/// `G = Cᵀ S⁻¹`, `H = Aᵀ S⁻¹` and `ρ(y ⊗ y) = (λ − Gθ)(Hy ⊗ Hy)`.
#[derive(Clone, Debug)]
pub struct ConditionalMeanMap {
    /// `E[X] − E[ρ(ŷ ⊗ ŷ)]`
    ex: Vector,
    ey: Vector,
    gain: Matrix,
    h: Matrix,
    rho: Bilinear,
}

impl ConditionalMeanMap {
    pub fn gain(&self) -> &Matrix {
        &self.gain
    }

    pub fn expected_y(&self) -> &Vector {
        &self.ey
    }

    /// Evaluates `W` at a centred observation `ŷ`.
    pub fn eval_centred(&self, yhat: &Vector) -> Vector {
        let hy = &self.h * yhat;
        &self.ex + &self.gain * yhat + self.rho.apply(&hy, &hy)
    }

    pub fn eval(&self, y: &Vector) -> Vector {
        self.eval_centred(&(y - &self.ey))
    }
}

pub fn approx_conditional_mean(model: &QuadraticGaussianModel, y: &Vector) -> Result<Vector> {
    if y.len() != model.q() {
        return Err(Error::Dimension {
            what: "observation",
            expected: model.q(),
            got: y.len(),
        });
    }
    Ok(model.mean_map()?.eval(y))
}

/// `Var Z − Cᵀ S⁻¹ C`, the conditional variance surrogate for the case `Z = U`.
pub fn approx_conditional_var(model: &QuadraticGaussianModel) -> Result<Matrix> {
    let s = spd_cholesky(&model.var_v, "Var V")?;
    Ok(symmetrize(&(&model.var_z - model.cov_vz.transpose() * s.solve(&model.cov_vz))))
}

/// Draws `(U, X, Y)` triples for a model without storing them.
#[derive(Clone, Debug)]
pub struct JointSampler {
    p: usize,
    q: usize,
    r: usize,
    factor: Matrix,
    noise: NoiseStream,
    mu_v: Vector,
    mu_z: Vector,
    lambda: Bilinear,
    theta: Bilinear,
    z_equals_u: bool,
}

/// One joint draw.
#[derive(Clone, Debug, PartialEq)]
pub struct JointDraw {
    pub u: Vector,
    pub x: Vector,
    pub y: Vector,
}

impl JointSampler {
    /// `cov_uz = Cov(U, Z)` (p×r) completes the joint covariance of `(U, V, Z)`.
    pub fn new(model: &QuadraticGaussianModel, cov_uz: &Matrix, n: usize, seed: u64, scheme: SamplingScheme) -> Result<Self> {
        let (p, q, r) = (model.p(), model.q(), model.r());
        check_shape("Cov(U, Z)", cov_uz, p, r)?;
        let z_equals_u = p == r
            && (cov_uz - &model.var_u).amax() == 0.0
            && (&model.var_z - &model.var_u).amax() == 0.0
            && (&model.cov_vz - &model.cov_vu).amax() == 0.0;
        let d = if z_equals_u { p + q } else { p + q + r };
        let mut joint = Matrix::zeros(d, d);
        joint.view_mut((0, 0), (p, p)).copy_from(&model.var_u);
        joint.view_mut((p, p), (q, q)).copy_from(&model.var_v);
        joint.view_mut((p, 0), (q, p)).copy_from(&model.cov_vu);
        joint.view_mut((0, p), (p, q)).copy_from(&model.cov_vu.transpose());
        if !z_equals_u {
            joint.view_mut((p + q, p + q), (r, r)).copy_from(&model.var_z);
            joint.view_mut((p, p + q), (q, r)).copy_from(&model.cov_vz);
            joint.view_mut((p + q, p), (r, q)).copy_from(&model.cov_vz.transpose());
            joint.view_mut((0, p + q), (p, r)).copy_from(cov_uz);
            joint.view_mut((p + q, 0), (r, p)).copy_from(&cov_uz.transpose());
        }
        check_psd("joint covariance of (U, V, Z)", &joint)?;
        Ok(Self {
            p,
            q,
            r,
            factor: psd_factor(&joint)?,
            noise: NoiseStream::new(d, n, seed, scheme)?,
            mu_v: model.mu_v.clone(),
            mu_z: model.mu_z.clone(),
            lambda: model.lambda.clone(),
            theta: model.theta.clone(),
            z_equals_u,
        })
    }

    /// The case `Z = U`; requires `Var Z = Var U` and `Cov(V, Z) = Cov(V, U)`.
    pub fn z_equals_u(model: &QuadraticGaussianModel, n: usize, seed: u64, scheme: SamplingScheme) -> Result<Self> {
        if model.r() != model.p()
            || (&model.var_z - &model.var_u).amax() != 0.0
            || (&model.cov_vz - &model.cov_vu).amax() != 0.0
        {
            return Err(Error::InvalidArgument(
                "Z = U needs Var Z = Var U and Cov(V, Z) = Cov(V, U)".into(),
            ));
        }
        Self::new(model, &model.var_u, n, seed, scheme)
    }

    pub fn len(&self) -> usize {
        self.noise.len()
    }

    pub fn is_empty(&self) -> bool {
        self.noise.is_empty()
    }

    pub fn is_z_equal_u(&self) -> bool {
        self.z_equals_u
    }

    fn noise_dim(&self) -> usize {
        self.noise.dim()
    }

    /// Draw `i`; `buf` holds two noise-sized scratch vectors.
    pub fn draw_with(&self, i: usize, buf: &mut [f64]) -> JointDraw {
        let d = self.noise_dim();
        let (xi, scratch) = buf.split_at_mut(d);
        self.noise.fill(i, xi, &mut scratch[..d]);
        let g = &self.factor * Vector::from_column_slice(xi);
        let u = g.rows(0, self.p).into_owned();
        let uu = |form: &Bilinear| form.apply(&u, &u);
        let y = &self.mu_v + g.rows(self.p, self.q) + uu(&self.theta);
        let z = if self.z_equals_u { u.clone() } else { g.rows(self.p + self.q, self.r).into_owned() };
        let x = &self.mu_z + z + uu(&self.lambda);
        JointDraw { u, x, y }
    }

    pub fn draw(&self, i: usize) -> JointDraw {
        let mut buf = self.buffer();
        self.draw_with(i, &mut buf)
    }

    fn buffer(&self) -> Vec<f64> {
        vec![0.0; 2 * self.noise_dim()]
    }
}

/// Bounded scalar test functions with `max(sup |h|, sup |h'|) = 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestFunction {
    One,
    Sin,
    Cos,
    Tanh,
    HalfSinDouble,
    Arctan,
    Lorentzian,
    GaussianBump,
}

impl TestFunction {
    pub const BATTERY: [TestFunction; 8] = [
        TestFunction::One,
        TestFunction::Sin,
        TestFunction::Cos,
        TestFunction::Tanh,
        TestFunction::HalfSinDouble,
        TestFunction::Arctan,
        TestFunction::Lorentzian,
        TestFunction::GaussianBump,
    ];

    pub fn eval(self, y: f64) -> f64 {
        match self {
            TestFunction::One => 1.0,
            TestFunction::Sin => y.sin(),
            TestFunction::Cos => y.cos(),
            TestFunction::Tanh => y.tanh(),
            TestFunction::HalfSinDouble => 0.5 * (2.0 * y).sin(),
            TestFunction::Arctan => std::f64::consts::FRAC_2_PI * y.atan(),
            TestFunction::Lorentzian => 1.0 / (1.0 + y * y),
            TestFunction::GaussianBump => (-0.5 * y * y).exp(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TestFunction::One => "one",
            TestFunction::Sin => "sin",
            TestFunction::Cos => "cos",
            TestFunction::Tanh => "tanh",
            TestFunction::HalfSinDouble => "half-sin-double",
            TestFunction::Arctan => "arctan",
            TestFunction::Lorentzian => "lorentzian",
            TestFunction::GaussianBump => "gaussian-bump",
        }
    }
}

/// Monte Carlo estimate of `E[h(ŷ_j) F_k]` for all `j < q` and components `k`,
/// flattened row-major in `j`.
#[derive(Clone, Debug)]
pub struct ContractEstimate {
    pub function: TestFunction,
    pub mean: Vector,
    pub std_err: Vector,
    pub norm: f64,
    pub norm_std_err: f64,
}

impl ContractEstimate {
    fn from_batches(function: TestFunction, m: &BatchMeans) -> Self {
        let mean = m.mean();
        Self {
            function,
            norm: mean.norm(),
            norm_std_err: m.norm_std_err(),
            std_err: m.std_err(),
            mean,
        }
    }
}

/// Mean contract `E[h(ŷ) ⊗ (W − X)]` and, for `Z = U`, the variance contract
/// `E[h(ŷ) ⊗ ((W − X)(W − X)ᵀ − V̂)]` over the battery.
#[derive(Clone, Debug)]
pub struct WeakContract {
    pub mean: Vec<ContractEstimate>,
    pub variance: Vec<ContractEstimate>,
}

impl WeakContract {
    pub fn max_mean_norm(&self) -> f64 {
        self.mean.iter().map(|e| e.norm).fold(0.0, f64::max)
    }

    pub fn max_variance_norm(&self) -> f64 {
        self.variance.iter().map(|e| e.norm).fold(0.0, f64::max)
    }
}

pub fn weak_contract(model: &QuadraticGaussianModel, sampler: &JointSampler, battery: &[TestFunction]) -> Result<WeakContract> {
    let map = model.mean_map()?;
    let var_hat = if sampler.is_z_equal_u() {
        Some(approx_conditional_var(model)?)
    } else {
        None
    };
    let (q, r) = (model.q(), model.r());
    let mean_dim = q * r;
    let var_dim = q * r * r;
    let nvar = if var_hat.is_some() { battery.len() } else { 0 };
    let parts: Vec<(Vec<BatchSum>, Vec<BatchSum>)> = batch_ranges(sampler.len(), BATCHES)
        .into_par_iter()
        .map(|range| {
            let mut means = vec![BatchSum::new(mean_dim); battery.len()];
            let mut vars = vec![BatchSum::new(var_dim); nvar];
            let mut buf = sampler.buffer();
            let mut row_m = vec![0.0; mean_dim];
            let mut row_v = vec![0.0; var_dim];
            for i in range {
                let d = sampler.draw_with(i, &mut buf);
                let yhat = &d.y - map.expected_y();
                let err = map.eval_centred(&yhat) - &d.x;
                let sq = var_hat.as_ref().map(|v| &err * err.transpose() - v);
                for (fi, h) in battery.iter().enumerate() {
                    for j in 0..q {
                        let hj = h.eval(yhat[j]);
                        for k in 0..r {
                            row_m[j * r + k] = hj * err[k];
                        }
                        if let Some(sq) = &sq {
                            for k in 0..r {
                                for l in 0..r {
                                    row_v[(j * r + k) * r + l] = hj * sq[(k, l)];
                                }
                            }
                        }
                    }
                    means[fi].add(&row_m);
                    if sq.is_some() {
                        vars[fi].add(&row_v);
                    }
                }
            }
            (means, vars)
        })
        .collect();
    let mut means = vec![BatchMeans::new(mean_dim); battery.len()];
    let mut vars = vec![BatchMeans::new(var_dim); nvar];
    for (pm, pv) in parts {
        for (a, b) in means.iter_mut().zip(pm) {
            a.push(b);
        }
        for (a, b) in vars.iter_mut().zip(pv) {
            a.push(b);
        }
    }
    Ok(WeakContract {
        mean: battery.iter().zip(&means).map(|(&h, m)| ContractEstimate::from_batches(h, m)).collect(),
        variance: battery.iter().zip(&vars).map(|(&h, m)| ContractEstimate::from_batches(h, m)).collect(),
    })
}

/// Second moment of `W − X` over samples with `|ŷ_0| / sd(ŷ_0)` in `[lo, hi)`.
#[derive(Clone, Debug, Serialize)]
pub struct VarianceShell {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// Row-major `r × r`.
    pub second_moment: Vec<f64>,
    pub std_err: Vec<f64>,
}

/// Bins samples into symmetric shells of the standardized first observation
/// coordinate; shell `i` is `edges[i] ≤ |ŷ_0| / sd < edges[i + 1]`.
pub fn shell_variances(model: &QuadraticGaussianModel, sampler: &JointSampler, edges: &[f64]) -> Result<Vec<VarianceShell>> {
    if edges.len() < 2 || edges.windows(2).any(|w| w[0] >= w[1]) || edges[0] < 0.0 {
        return Err(Error::InvalidArgument("shell edges must be increasing and nonnegative".into()));
    }
    let map = model.mean_map()?;
    let r = model.r();
    let sd = model.var_v[(0, 0)].sqrt();
    let nshell = edges.len() - 1;
    let parts: Vec<Vec<BatchSum>> = batch_ranges(sampler.len(), BATCHES)
        .into_par_iter()
        .map(|range| {
            let mut acc = vec![BatchSum::new(r * r); nshell];
            let mut buf = sampler.buffer();
            let mut row = vec![0.0; r * r];
            for i in range {
                let d = sampler.draw_with(i, &mut buf);
                let yhat = &d.y - map.expected_y();
                let s = yhat[0].abs() / sd;
                let Some(b) = (0..nshell).find(|&b| edges[b] <= s && s < edges[b + 1]) else {
                    continue;
                };
                let err = map.eval_centred(&yhat) - &d.x;
                for k in 0..r {
                    for l in 0..r {
                        row[k * r + l] = err[k] * err[l];
                    }
                }
                acc[b].add(&row);
            }
            acc
        })
        .collect();
    let mut acc = vec![BatchMeans::new(r * r); nshell];
    for part in parts {
        for (a, b) in acc.iter_mut().zip(part) {
            a.push(b);
        }
    }
    Ok(acc
        .iter()
        .enumerate()
        .map(|(b, m)| VarianceShell {
            lo: edges[b],
            hi: edges[b + 1],
            count: m.count(),
            second_moment: m.mean().as_slice().to_vec(),
            std_err: m.std_err().as_slice().to_vec(),
        })
        .collect())
}
