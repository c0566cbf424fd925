//! Diffusion-induced geometry, the deterministic flow with its covariance
//! transports, second fundamental forms and approximate intrinsic location
//! parameters.

mod flow;
mod geometry;
mod observation;

pub use flow::{ailp, ailp_state, flow_second_fundamental_form, integrate_flow, FlowBundle, DEFAULT_FLOW_STEPS};
pub use geometry::{
    canonical_connector, coordinate_generator, drift_decomposition, induced_cometric, intrinsic_generator,
    DriftSplit, InducedGeometry,
};
pub use observation::{second_fundamental_form, second_fundamental_form_bilinear, ObservationMap, ObservationSpec};

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Bilinear, Matrix, Vector};

pub const BUILTIN_MODELS: &[&str] = &["flat-linear", "scalar-exp", "warped-2d"];

/// An Itô diffusion `dX = b(X)dt + γσ₀(X)dW` in one chart.
///
/// Matrices cross this interface as row-major slices.
pub trait DiffusionModel: Send + Sync {
    fn dim(&self) -> usize;

    fn name(&self) -> String;

    /// Noise scale `γ`.
    fn gamma(&self) -> f64;

    fn contains(&self, x: &[f64]) -> bool {
        x.iter().all(|v| v.is_finite())
    }

    /// Coordinate drift `b(x)`.
    fn drift_into(&self, x: &[f64], out: &mut [f64]);

    /// Unscaled dispersion `σ₀(x)`.
    fn sigma0_into(&self, x: &[f64], out: &mut [f64]);

    /// `∂_l α₀(x)` for `α₀ = σ₀σ₀ᵀ`, when known in closed form.
    fn dcometric0(&self, x: &[f64], l: usize) -> Option<Matrix> {
        let _ = (x, l);
        None
    }

    /// Whether [`DiffusionModel::christoffel_into`] and
    /// [`DiffusionModel::dchristoffel_into`] are implemented.
    fn closed_form_connector(&self) -> bool {
        false
    }

    /// Whether the induced connector vanishes identically.
    fn is_flat(&self) -> bool {
        false
    }

    /// Closed-form Levi-Civita connector of `α₀⁻¹`, layout `[k][i][j]`.
    fn christoffel_into(&self, x: &[f64], out: &mut [f64]) {
        let _ = (x, out);
    }

    /// Closed-form connector derivative, layout `[l][k][i][j]`.
    fn dchristoffel_into(&self, x: &[f64], out: &mut [f64]) {
        let _ = (x, out);
    }

    /// `Db(x)`; central differences unless overridden.
    fn drift_jacobian(&self, x: &[f64]) -> Matrix {
        let p = self.dim();
        let h = 1e-6 * x.iter().map(|v| v * v).sum::<f64>().sqrt().max(1.0);
        let mut xp = x.to_vec();
        let mut bp = vec![0.0; p];
        let mut bm = vec![0.0; p];
        let mut jac = Matrix::zeros(p, p);
        for l in 0..p {
            xp[l] = x[l] + h;
            self.drift_into(&xp, &mut bp);
            xp[l] = x[l] - h;
            self.drift_into(&xp, &mut bm);
            xp[l] = x[l];
            for k in 0..p {
                jac[(k, l)] = (bp[k] - bm[k]) / (2.0 * h);
            }
        }
        jac
    }

    /// `D²b(x)` as a bilinear map; central differences of the Jacobian
    /// unless overridden.
    fn drift_hessian(&self, x: &[f64]) -> Bilinear {
        let p = self.dim();
        let h = 1e-4 * x.iter().map(|v| v * v).sum::<f64>().sqrt().max(1.0);
        let mut xp = x.to_vec();
        let mut out = Bilinear::zeros(p, p);
        for j in 0..p {
            xp[j] = x[j] + h;
            let jp = self.drift_jacobian(&xp);
            xp[j] = x[j] - h;
            let jm = self.drift_jacobian(&xp);
            xp[j] = x[j];
            for k in 0..p {
                for i in 0..p {
                    out.set(k, i, j, (jp[(k, i)] - jm[(k, i)]) / (2.0 * h));
                }
            }
        }
        out.symmetrized()
    }
}

pub type ModelRef = Arc<dyn DiffusionModel>;

/// `σ(x) = γσ₀(x)`.
pub fn sigma(model: &dyn DiffusionModel, x: &[f64]) -> Matrix {
    let p = model.dim();
    let mut buf = vec![0.0; p * p];
    model.sigma0_into(x, &mut buf);
    Matrix::from_row_slice(p, p, &buf) * model.gamma()
}

pub fn drift(model: &dyn DiffusionModel, x: &[f64]) -> Vector {
    let mut out = Vector::zeros(model.dim());
    model.drift_into(x, out.as_mut_slice());
    out
}

/// Linear drift `Ax + c` with constant dispersion.
#[derive(Clone, Debug)]
pub struct FlatLinear {
    pub a: Matrix,
    pub c: Vector,
    pub sigma0: Matrix,
    pub gamma: f64,
}

impl FlatLinear {
    pub fn new(a: Matrix, c: Vector, sigma0: Matrix, gamma: f64) -> Result<Self> {
        let p = a.nrows();
        if a.ncols() != p || c.len() != p || sigma0.shape() != (p, p) {
            return Err(Error::Dimension {
                what: "flat-linear model",
                expected: p,
                got: c.len(),
            });
        }
        Ok(Self { a, c, sigma0, gamma })
    }
}

impl DiffusionModel for FlatLinear {
    fn dim(&self) -> usize {
        self.a.nrows()
    }

    fn name(&self) -> String {
        "flat-linear".into()
    }

    fn gamma(&self) -> f64 {
        self.gamma
    }

    fn drift_into(&self, x: &[f64], out: &mut [f64]) {
        let p = self.dim();
        for k in 0..p {
            out[k] = self.c[k] + (0..p).map(|j| self.a[(k, j)] * x[j]).sum::<f64>();
        }
    }

    fn sigma0_into(&self, _x: &[f64], out: &mut [f64]) {
        let p = self.dim();
        for i in 0..p {
            for j in 0..p {
                out[i * p + j] = self.sigma0[(i, j)];
            }
        }
    }

    fn dcometric0(&self, _x: &[f64], _l: usize) -> Option<Matrix> {
        Some(Matrix::zeros(self.dim(), self.dim()))
    }

    fn closed_form_connector(&self) -> bool {
        true
    }

    fn is_flat(&self) -> bool {
        true
    }

    fn christoffel_into(&self, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }

    fn dchristoffel_into(&self, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }

    fn drift_jacobian(&self, _x: &[f64]) -> Matrix {
        self.a.clone()
    }

    fn drift_hessian(&self, _x: &[f64]) -> Bilinear {
        Bilinear::zeros(self.dim(), self.dim())
    }
}

/// One-dimensional `dX = -κX dt + γe^X dW`; the induced connector is `Γ = -1`.
#[derive(Clone, Copy, Debug)]
pub struct ScalarExp {
    pub kappa: f64,
    pub gamma: f64,
}

impl DiffusionModel for ScalarExp {
    fn dim(&self) -> usize {
        1
    }

    fn name(&self) -> String {
        "scalar-exp".into()
    }

    fn gamma(&self) -> f64 {
        self.gamma
    }

    fn contains(&self, x: &[f64]) -> bool {
        x[0].is_finite() && x[0].abs() < 50.0
    }

    fn drift_into(&self, x: &[f64], out: &mut [f64]) {
        out[0] = -self.kappa * x[0];
    }

    fn sigma0_into(&self, x: &[f64], out: &mut [f64]) {
        out[0] = x[0].exp();
    }

    fn dcometric0(&self, x: &[f64], _l: usize) -> Option<Matrix> {
        Some(Matrix::from_element(1, 1, 2.0 * (2.0 * x[0]).exp()))
    }

    fn closed_form_connector(&self) -> bool {
        true
    }

    fn christoffel_into(&self, _x: &[f64], out: &mut [f64]) {
        out[0] = -1.0;
    }

    fn dchristoffel_into(&self, _x: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }

    fn drift_jacobian(&self, _x: &[f64]) -> Matrix {
        Matrix::from_element(1, 1, -self.kappa)
    }

    fn drift_hessian(&self, _x: &[f64]) -> Bilinear {
        Bilinear::zeros(1, 1)
    }
}

/// Planar model with `σ₀ = diag(1, 1 + x₁²)` and polynomial drift
/// `b = (-κx₁ + c x₂², -κx₂ + c x₁x₂)`.
#[derive(Clone, Copy, Debug)]
pub struct Warped2d {
    pub kappa: f64,
    pub c: f64,
    pub gamma: f64,
}

impl DiffusionModel for Warped2d {
    fn dim(&self) -> usize {
        2
    }

    fn name(&self) -> String {
        "warped-2d".into()
    }

    fn gamma(&self) -> f64 {
        self.gamma
    }

    fn drift_into(&self, x: &[f64], out: &mut [f64]) {
        out[0] = -self.kappa * x[0] + self.c * x[1] * x[1];
        out[1] = -self.kappa * x[1] + self.c * x[0] * x[1];
    }

    fn sigma0_into(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&[1.0, 0.0, 0.0, 1.0 + x[0] * x[0]]);
    }

    fn dcometric0(&self, x: &[f64], l: usize) -> Option<Matrix> {
        let mut d = Matrix::zeros(2, 2);
        if l == 0 {
            d[(1, 1)] = 4.0 * x[0] * (1.0 + x[0] * x[0]);
        }
        Some(d)
    }

    fn closed_form_connector(&self) -> bool {
        true
    }

    fn christoffel_into(&self, x: &[f64], out: &mut [f64]) {
        let s = 1.0 + x[0] * x[0];
        out.fill(0.0);
        // Γ¹₂₂ and Γ²₁₂ = Γ²₂₁
        out[3] = 2.0 * x[0] / (s * s * s);
        out[5] = -2.0 * x[0] / s;
        out[6] = out[5];
    }

    fn dchristoffel_into(&self, x: &[f64], out: &mut [f64]) {
        let x1 = x[0];
        let s = 1.0 + x1 * x1;
        out.fill(0.0);
        out[3] = (2.0 - 10.0 * x1 * x1) / (s * s * s * s);
        out[5] = (2.0 * x1 * x1 - 2.0) / (s * s);
        out[6] = out[5];
    }

    fn drift_jacobian(&self, x: &[f64]) -> Matrix {
        Matrix::from_row_slice(
            2,
            2,
            &[-self.kappa, 2.0 * self.c * x[1], self.c * x[1], -self.kappa + self.c * x[0]],
        )
    }

    fn drift_hessian(&self, _x: &[f64]) -> Bilinear {
        let mut h = Bilinear::zeros(2, 2);
        h.set(0, 1, 1, 2.0 * self.c);
        h.set(1, 0, 1, self.c);
        h.set(1, 1, 0, self.c);
        h
    }
}

/// The model seen through the affine chart `x̃ = Tx + c`.
#[derive(Clone)]
pub struct LinearModelChange {
    inner: ModelRef,
    t: Matrix,
    t_inv: Matrix,
    offset: Vector,
}

impl LinearModelChange {
    pub fn new(inner: ModelRef, t: Matrix, offset: Vector) -> Result<Self> {
        let p = inner.dim();
        if t.shape() != (p, p) || offset.len() != p {
            return Err(Error::Dimension {
                what: "chart change",
                expected: p,
                got: offset.len(),
            });
        }
        let t_inv = t
            .clone()
            .try_inverse()
            .ok_or(Error::Singular {
                what: "chart change",
                condition: f64::INFINITY,
            })?;
        Ok(Self { inner, t, t_inv, offset })
    }

    pub fn forward(&self, x: &[f64]) -> Vector {
        &self.t * Vector::from_column_slice(x) + &self.offset
    }

    pub fn backward(&self, y: &[f64]) -> Vector {
        &self.t_inv * (Vector::from_column_slice(y) - &self.offset)
    }
}

impl DiffusionModel for LinearModelChange {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn name(&self) -> String {
        format!("linear-change({})", self.inner.name())
    }

    fn gamma(&self) -> f64 {
        self.inner.gamma()
    }

    fn contains(&self, y: &[f64]) -> bool {
        self.inner.contains(self.backward(y).as_slice())
    }

    fn drift_into(&self, y: &[f64], out: &mut [f64]) {
        let x = self.backward(y);
        let b = drift(self.inner.as_ref(), x.as_slice());
        out.copy_from_slice((&self.t * b).as_slice());
    }

    fn sigma0_into(&self, y: &[f64], out: &mut [f64]) {
        let p = self.dim();
        let x = self.backward(y);
        let s = &self.t * sigma(self.inner.as_ref(), x.as_slice()) / self.inner.gamma();
        for i in 0..p {
            for j in 0..p {
                out[i * p + j] = s[(i, j)];
            }
        }
    }
}

fn default_flat_a() -> Vec<Vec<f64>> {
    vec![vec![-1.0, 0.5], vec![0.0, -0.5]]
}

fn default_flat_c() -> Vec<f64> {
    vec![0.0, 0.0]
}

fn default_identity2() -> Vec<Vec<f64>> {
    vec![vec![1.0, 0.0], vec![0.0, 1.0]]
}

fn one() -> f64 {
    1.0
}

fn half() -> f64 {
    0.5
}

/// Builtin model selection as it appears in configuration files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelSpec {
    FlatLinear {
        #[serde(default = "default_flat_a")]
        a: Vec<Vec<f64>>,
        #[serde(default = "default_flat_c")]
        c: Vec<f64>,
        #[serde(default = "default_identity2")]
        sigma: Vec<Vec<f64>>,
    },
    ScalarExp {
        #[serde(default = "one")]
        kappa: f64,
    },
    #[serde(rename = "warped-2d")]
    Warped2d {
        #[serde(default = "one")]
        kappa: f64,
        #[serde(default = "half")]
        c: f64,
    },
}

pub(crate) fn matrix_from_rows(rows: &[Vec<f64>], what: &'static str) -> Result<Matrix> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return Err(Error::Config(format!("{what}: ragged matrix rows")));
    }
    Ok(Matrix::from_fn(n, m, |i, j| rows[i][j]))
}

impl ModelSpec {
    pub fn default_for(name: &str) -> Result<Self> {
        serde_json::from_value(serde_json::json!({ "name": name })).map_err(|_| {
            Error::Config(format!("unknown model `{name}` (expected one of {})", BUILTIN_MODELS.join(", ")))
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            ModelSpec::FlatLinear { .. } => "flat-linear",
            ModelSpec::ScalarExp { .. } => "scalar-exp",
            ModelSpec::Warped2d { .. } => "warped-2d",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ModelSpec::FlatLinear { a, .. } => a.len(),
            ModelSpec::ScalarExp { .. } => 1,
            ModelSpec::Warped2d { .. } => 2,
        }
    }

    pub fn build(&self, gamma: f64) -> Result<ModelRef> {
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(Error::Config(format!("noise scale must be positive, got {gamma}")));
        }
        Ok(match self {
            ModelSpec::FlatLinear { a, c, sigma } => {
                let a = matrix_from_rows(a, "flat-linear drift")?;
                let s = matrix_from_rows(sigma, "flat-linear dispersion")?;
                Arc::new(FlatLinear::new(a, Vector::from_column_slice(c), s, gamma).map_err(|e| Error::Config(e.to_string()))?)
            }
            ModelSpec::ScalarExp { kappa } => Arc::new(ScalarExp { kappa: *kappa, gamma }),
            ModelSpec::Warped2d { kappa, c } => Arc::new(Warped2d { kappa: *kappa, c: *c, gamma }),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_defaults_and_unknown_fields() {
        let m = ModelSpec::default_for("warped-2d").unwrap();
        assert_eq!(m, ModelSpec::Warped2d { kappa: 1.0, c: 0.5 });
        assert!(ModelSpec::default_for("nope").is_err());
        let bad = serde_json::from_str::<ModelSpec>(r#"{"name": "scalar-exp", "kapa": 2}"#);
        assert!(bad.is_err());
        let ok: ModelSpec = serde_json::from_str(r#"{"name": "scalar-exp", "kappa": 2}"#).unwrap();
        assert_eq!(ok, ModelSpec::ScalarExp { kappa: 2.0 });
    }

    #[test]
    fn analytic_drift_derivatives_match_defaults() {
        struct Fd(Warped2d);
        impl DiffusionModel for Fd {
            fn dim(&self) -> usize {
                2
            }
            fn name(&self) -> String {
                "fd".into()
            }
            fn gamma(&self) -> f64 {
                self.0.gamma
            }
            fn drift_into(&self, x: &[f64], out: &mut [f64]) {
                self.0.drift_into(x, out)
            }
            fn sigma0_into(&self, x: &[f64], out: &mut [f64]) {
                self.0.sigma0_into(x, out)
            }
        }
        let w = Warped2d {
            kappa: 0.7,
            c: 0.4,
            gamma: 0.1,
        };
        let x = [0.3, -0.8];
        let fd = Fd(w);
        assert!((fd.drift_jacobian(&x) - w.drift_jacobian(&x)).amax() < 1e-8);
        assert!(fd.drift_hessian(&x).sub(&w.drift_hessian(&x)).max_abs() < 1e-6);
    }
}
