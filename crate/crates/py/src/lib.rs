//! Python bindings: chart geometry, exponential barycentres, the
//! quadratic-Gaussian conditional moments and the filter experiments.
//!
//! Vectors are lists of floats and matrices are lists of rows. Charts are
//! selected by builtin name with an optional dict of numeric parameters.

use std::collections::BTreeMap;

use intrinsic_filter::barycentre::{self, TangentMoments};
use intrinsic_filter::experiments::filter::{self as study, Scenario};
use intrinsic_filter::gaussian_cond::{self, QuadraticGaussianModel};
use intrinsic_filter::linalg::{Bilinear, Matrix, Vector};
use intrinsic_filter::manifold::{self, builtin_chart, ChartRef};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn err(e: intrinsic_filter::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn chart(name: &str, params: Option<BTreeMap<String, f64>>) -> PyResult<ChartRef> {
    builtin_chart(name, &params.unwrap_or_default()).map_err(err)
}

fn vector(xs: &[f64]) -> Vector {
    Vector::from_column_slice(xs)
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Matrix> {
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return Err(PyValueError::new_err("ragged matrix rows"));
    }
    Ok(Matrix::from_fn(rows.len(), m, |i, j| rows[i][j]))
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn bilinear(c: &[Vec<Vec<f64>>]) -> PyResult<Bilinear> {
    let out = c.len();
    let inp = c.first().map_or(0, Vec::len);
    let flat: Vec<f64> = c.iter().flatten().flatten().copied().collect();
    Bilinear::from_flat(out, inp, flat).map_err(err)
}

/// Third-order Taylor approximation of `exp_y(t v)`.
#[pyfunction]
#[pyo3(signature = (chart_name, y, v, t = 1.0, params = None))]
fn exp_taylor(chart_name: &str, y: Vec<f64>, v: Vec<f64>, t: f64, params: Option<BTreeMap<String, f64>>) -> PyResult<Vec<f64>> {
    let c = chart(chart_name, params)?;
    Ok(manifold::exp_taylor(c.as_ref(), &vector(&y), &vector(&v), t).map_err(err)?.as_slice().to_vec())
}

/// `exp_y(v)` by RK4 integration of the geodesic equation.
#[pyfunction]
#[pyo3(signature = (chart_name, y, v, steps = 64, params = None))]
fn exp_geodesic(chart_name: &str, y: Vec<f64>, v: Vec<f64>, steps: usize, params: Option<BTreeMap<String, f64>>) -> PyResult<Vec<f64>> {
    let c = chart(chart_name, params)?;
    Ok(manifold::exp_geodesic(c.as_ref(), &vector(&y), &vector(&v), steps).map_err(err)?.as_slice().to_vec())
}

#[pyfunction]
#[pyo3(signature = (chart_name, x, u, v, params = None))]
fn sectional_curvature(chart_name: &str, x: Vec<f64>, u: Vec<f64>, v: Vec<f64>, params: Option<BTreeMap<String, f64>>) -> PyResult<f64> {
    let c = chart(chart_name, params)?;
    manifold::sectional_curvature(c.as_ref(), &vector(&x), &vector(&u), &vector(&v)).map_err(err)
}

/// Curvature-corrected exponential barycentre of a Gaussian with tangent
/// mean `mu` and covariance `sigma` at `base`.
#[pyfunction]
#[pyo3(signature = (chart_name, base, mu, sigma, params = None))]
fn exp_barycentre(
    chart_name: &str,
    base: Vec<f64>,
    mu: Vec<f64>,
    sigma: Vec<Vec<f64>>,
    params: Option<BTreeMap<String, f64>>,
) -> PyResult<Vec<f64>> {
    let c = chart(chart_name, params)?;
    let m = TangentMoments::new(vector(&base), vector(&mu), matrix(&sigma)?).map_err(err)?;
    Ok(barycentre::exp_barycentre(c.as_ref(), &m).map_err(err)?.as_slice().to_vec())
}

/// Quadratically perturbed Gaussian `X = Z + λ(U, U)`, `Y = V + θ(U, U)`;
/// `lam[k][i][j]` and `theta[k][i][j]` are symmetric coefficient arrays.
#[pyclass(name = "QuadraticGaussian")]
struct PyQuadraticGaussian {
    inner: QuadraticGaussianModel,
}

#[pymethods]
impl PyQuadraticGaussian {
    #[new]
    #[pyo3(signature = (var_u, cov_vu, var_v, cov_vz, var_z, lam, theta, mu_v = None, mu_z = None))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        var_u: Vec<Vec<f64>>,
        cov_vu: Vec<Vec<f64>>,
        var_v: Vec<Vec<f64>>,
        cov_vz: Vec<Vec<f64>>,
        var_z: Vec<Vec<f64>>,
        lam: Vec<Vec<Vec<f64>>>,
        theta: Vec<Vec<Vec<f64>>>,
        mu_v: Option<Vec<f64>>,
        mu_z: Option<Vec<f64>>,
    ) -> PyResult<Self> {
        let (q, r) = (var_v.len(), var_z.len());
        let inner = QuadraticGaussianModel::new(
            matrix(&var_u)?,
            matrix(&cov_vu)?,
            matrix(&var_v)?,
            matrix(&cov_vz)?,
            matrix(&var_z)?,
            mu_v.map_or_else(|| Vector::zeros(q), |m| vector(&m)),
            mu_z.map_or_else(|| Vector::zeros(r), |m| vector(&m)),
            bilinear(&lam)?,
            bilinear(&theta)?,
        )
        .map_err(err)?;
        Ok(Self { inner })
    }

    /// Approximate `E[X | Y = y]`.
    fn conditional_mean(&self, y: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(gaussian_cond::approx_conditional_mean(&self.inner, &vector(&y)).map_err(err)?.as_slice().to_vec())
    }

    /// Approximate conditional covariance of `X` given `Y`.
    fn conditional_var(&self) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&gaussian_cond::approx_conditional_var(&self.inner).map_err(err)?))
    }
}

fn scenario(config: &str) -> PyResult<Scenario> {
    serde_json::from_str(config).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Runs the multi-step filter on a simulated path; takes and returns JSON.
#[pyfunction]
#[pyo3(signature = (config = "{}"))]
fn run_filter(config: &str) -> PyResult<String> {
    let steps = study::run_scenario(&scenario(config)?).map_err(err)?;
    serde_json::to_string(&steps).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Largest gaps between the intrinsic filter, the EKF and the Kalman filter
/// on a flat-linear scenario, as JSON.
#[pyfunction]
#[pyo3(signature = (config = "{}"))]
fn flat_reduction(config: &str) -> PyResult<String> {
    let r = study::flat_reduction(&scenario(config)?).map_err(err)?;
    serde_json::to_string(&r).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pymodule]
fn pyintrinsic(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(exp_taylor, m)?)?;
    m.add_function(wrap_pyfunction!(exp_geodesic, m)?)?;
    m.add_function(wrap_pyfunction!(sectional_curvature, m)?)?;
    m.add_function(wrap_pyfunction!(exp_barycentre, m)?)?;
    m.add_function(wrap_pyfunction!(run_filter, m)?)?;
    m.add_function(wrap_pyfunction!(flat_reduction, m)?)?;
    m.add_class::<PyQuadraticGaussian>()?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
