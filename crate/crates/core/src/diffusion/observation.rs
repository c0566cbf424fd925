use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Bilinear, Matrix, Vector};
use crate::manifold::{connector, ensure_contains, Chart, ChartRef, FlatChart};

use super::matrix_from_rows;

type PointFn = dyn Fn(&[f64]) -> Vector + Send + Sync;
type JacFn = dyn Fn(&[f64]) -> Matrix + Send + Sync;
type HessFn = dyn Fn(&[f64]) -> Bilinear + Send + Sync;
type BetaFn = dyn Fn(&[f64]) -> Matrix + Send + Sync;

/// A map `ψ: N → M` with its first two coordinate derivatives and the
/// observation noise covariance `β(y) = γ²β₀(y)` on `M`.
#[derive(Clone)]
pub struct ObservationMap {
    name: String,
    p: usize,
    psi: Arc<PointFn>,
    jac: Arc<JacFn>,
    hess: Arc<HessFn>,
    chart_m: ChartRef,
    beta0: Arc<BetaFn>,
    gamma: f64,
}

impl std::fmt::Debug for ObservationMap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ObservationMap")
            .field("name", &self.name)
            .field("p", &self.p)
            .field("q", &self.q())
            .finish()
    }
}

impl ObservationMap {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        p: usize,
        chart_m: ChartRef,
        gamma: f64,
        psi: impl Fn(&[f64]) -> Vector + Send + Sync + 'static,
        jac: impl Fn(&[f64]) -> Matrix + Send + Sync + 'static,
        hess: impl Fn(&[f64]) -> Bilinear + Send + Sync + 'static,
        beta0: impl Fn(&[f64]) -> Matrix + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            p,
            psi: Arc::new(psi),
            jac: Arc::new(jac),
            hess: Arc::new(hess),
            chart_m,
            beta0: Arc::new(beta0),
            gamma,
        }
    }

    /// `ψ = id` into `chart` itself, with `β₀ = beta0`.
    pub fn identity(chart: ChartRef, gamma: f64, beta0: Matrix) -> Self {
        let p = chart.dim();
        Self::new(
            "identity",
            p,
            chart,
            gamma,
            Vector::from_column_slice,
            move |_| Matrix::identity(p, p),
            move |_| Bilinear::zeros(p, p),
            move |_| beta0.clone(),
        )
    }

    /// `ψ(x) = Hx + ½C(x, x) + c` into flat `R^q`.
    pub fn quadratic(h: Matrix, c: Bilinear, offset: Vector, gamma: f64, beta0: Matrix) -> Result<Self> {
        let (q, p) = h.shape();
        if c.out_dim() != q || c.in_dim() != p || offset.len() != q || beta0.shape() != (q, q) {
            return Err(Error::Dimension {
                what: "quadratic observation map",
                expected: q,
                got: offset.len(),
            });
        }
        let c = c.symmetrized();
        let (h1, c1, c2, c3) = (h.clone(), c.clone(), c.clone(), h);
        Ok(Self::new(
            if c.max_abs() == 0.0 { "linear" } else { "quadratic" },
            p,
            Arc::new(FlatChart::new(q)),
            gamma,
            move |x| {
                let x = Vector::from_column_slice(x);
                &h1 * &x + c1.apply(&x, &x) * 0.5 + &offset
            },
            move |x| {
                let x = Vector::from_column_slice(x);
                let mut j = c3.clone();
                for k in 0..q {
                    let row = c2.component(k) * &x;
                    for i in 0..p {
                        j[(k, i)] += row[i];
                    }
                }
                j
            },
            move |_| c.clone(),
            move |_| beta0.clone(),
        ))
    }

    pub fn linear(h: Matrix, offset: Vector, gamma: f64, beta0: Matrix) -> Result<Self> {
        let (q, p) = h.shape();
        Self::quadratic(h, Bilinear::zeros(q, p), offset, gamma, beta0)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn q(&self) -> usize {
        self.chart_m.dim()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn chart_m(&self) -> &ChartRef {
        &self.chart_m
    }

    pub fn psi(&self, x: &[f64]) -> Vector {
        (self.psi)(x)
    }

    /// `J = Dψ(x)`, `q x p`.
    pub fn jacobian(&self, x: &[f64]) -> Matrix {
        (self.jac)(x)
    }

    /// `D²ψ(x)` as a bilinear map with `q` outputs.
    pub fn hessian(&self, x: &[f64]) -> Bilinear {
        (self.hess)(x)
    }

    /// `β(y) = γ²β₀(y)`.
    pub fn beta(&self, y: &[f64]) -> Matrix {
        (self.beta0)(y) * (self.gamma * self.gamma)
    }

    /// The same map with a different noise scale.
    pub fn with_gamma(&self, gamma: f64) -> Self {
        Self {
            gamma,
            ..self.clone()
        }
    }
}

/// `∇dψ(x)` as a bilinear map:
/// `D²ψ(x) - Dψ(x)Γ(x) + Γ̄(ψ(x))(Dψ(x) ·, Dψ(x) ·)`.
pub fn second_fundamental_form_bilinear(obs: &ObservationMap, chart_n: &dyn Chart, x: &Vector) -> Result<Bilinear> {
    ensure_contains(chart_n, x.as_slice())?;
    let y = obs.psi(x.as_slice());
    let j = obs.jacobian(x.as_slice());
    let gamma_n = connector(chart_n, x)?;
    let gamma_m = connector(obs.chart_m().as_ref(), &y)?;
    Ok(obs
        .hessian(x.as_slice())
        .sub(&gamma_n.map_output(&j))
        .add(&gamma_m.map_input(&j))
        .symmetrized())
}

pub fn second_fundamental_form(obs: &ObservationMap, chart_n: &dyn Chart, x: &Vector, v: &Vector, w: &Vector) -> Result<Vector> {
    Ok(second_fundamental_form_bilinear(obs, chart_n, x)?.apply(v, w))
}

fn default_beta() -> f64 {
    1.0
}

/// Builtin observation maps as they appear in configuration files; `beta`
/// is the scalar `b` in `β₀ = b·I`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ObservationSpec {
    Identity {
        #[serde(default = "default_beta")]
        beta: f64,
    },
    Linear {
        h: Vec<Vec<f64>>,
        #[serde(default)]
        offset: Option<Vec<f64>>,
        #[serde(default = "default_beta")]
        beta: f64,
    },
    /// `c[k][i][j]` are the second derivatives of output `k`.
    Quadratic {
        h: Vec<Vec<f64>>,
        c: Vec<Vec<Vec<f64>>>,
        #[serde(default)]
        offset: Option<Vec<f64>>,
        #[serde(default = "default_beta")]
        beta: f64,
    },
}

impl ObservationSpec {
    pub fn build(&self, chart_n: ChartRef, gamma: f64) -> Result<ObservationMap> {
        let p = chart_n.dim();
        let offset_of = |o: &Option<Vec<f64>>, q: usize| {
            o.as_ref().map_or_else(|| Vector::zeros(q), |v| Vector::from_column_slice(v))
        };
        let check_beta = |b: f64| {
            if b > 0.0 && b.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("observation noise must be positive, got {b}")))
            }
        };
        let built = match self {
            ObservationSpec::Identity { beta } => {
                check_beta(*beta)?;
                ObservationMap::identity(chart_n, gamma, Matrix::identity(p, p) * *beta)
            }
            ObservationSpec::Linear { h, offset, beta } => {
                check_beta(*beta)?;
                let h = matrix_from_rows(h, "observation matrix")?;
                let q = h.nrows();
                ObservationMap::linear(h, offset_of(offset, q), gamma, Matrix::identity(q, q) * *beta)?
            }
            ObservationSpec::Quadratic { h, c, offset, beta } => {
                check_beta(*beta)?;
                let h = matrix_from_rows(h, "observation matrix")?;
                let q = h.nrows();
                let mats = c
                    .iter()
                    .map(|rows| matrix_from_rows(rows, "observation curvature"))
                    .collect::<Result<Vec<_>>>()?;
                let c = Bilinear::from_matrices(&mats)?;
                ObservationMap::quadratic(h, c, offset_of(offset, q), gamma, Matrix::identity(q, q) * *beta)?
            }
        };
        if built.p() != p {
            return Err(Error::Config(format!(
                "observation map expects state dimension {}, model has {p}",
                built.p()
            )));
        }
        Ok(built)
    }
}
