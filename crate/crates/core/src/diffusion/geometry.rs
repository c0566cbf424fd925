use crate::error::{Error, Result};
use crate::linalg::{bilinear_apply, spd_cholesky, spd_inverse, Bilinear, Matrix, Vector};
use crate::manifold::{ensure_contains, fd_dchristoffel, Chart};

use super::{drift, ModelRef};

/// `α(x) = σ(x)σ(x)ᵀ`.
pub fn induced_cometric(model: &dyn super::DiffusionModel, x: &[f64]) -> Matrix {
    let s = super::sigma(model, x);
    &s * s.transpose()
}

/// The geometry a diffusion induces on its state space: cometric `α`,
/// metric `g = α⁻¹` and the Levi-Civita connection of `g`.
///
/// As a [`Chart`], the connector comes from the model's closed form when it
/// has one and from [`canonical_connector`] otherwise.
#[derive(Clone)]
pub struct InducedGeometry {
    model: ModelRef,
}

impl std::fmt::Debug for InducedGeometry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("InducedGeometry").field("model", &self.model.name()).finish()
    }
}

fn fd_step(x: &[f64], rel: f64) -> f64 {
    rel * x.iter().map(|v| v * v).sum::<f64>().sqrt().max(1.0)
}

impl InducedGeometry {
    pub fn new(model: ModelRef) -> Self {
        Self { model }
    }

    pub fn model(&self) -> &ModelRef {
        &self.model
    }

    pub fn gamma(&self) -> f64 {
        self.model.gamma()
    }

    pub fn sigma(&self, x: &[f64]) -> Matrix {
        super::sigma(self.model.as_ref(), x)
    }

    pub fn cometric(&self, x: &[f64]) -> Matrix {
        induced_cometric(self.model.as_ref(), x)
    }

    fn cometric0(&self, x: &[f64]) -> Matrix {
        let p = self.model.dim();
        let mut buf = vec![0.0; p * p];
        self.model.sigma0_into(x, &mut buf);
        let s = Matrix::from_row_slice(p, p, &buf);
        &s * s.transpose()
    }

    fn dcometric0(&self, x: &[f64], l: usize) -> Matrix {
        if let Some(d) = self.model.dcometric0(x, l) {
            return d;
        }
        let h = fd_step(x, 1e-5);
        let mut xp = x.to_vec();
        xp[l] = x[l] + h;
        let ap = self.cometric0(&xp);
        xp[l] = x[l] - h;
        let am = self.cometric0(&xp);
        (ap - am) / (2.0 * h)
    }

    /// `g = α⁻¹`; rank-deficient cometrics are refused.
    pub fn metric_checked(&self, x: &[f64]) -> Result<Matrix> {
        ensure_contains(self, x)?;
        spd_inverse(&self.cometric(x), "cometric").map_err(rank_deficient)
    }

    /// Evaluates `2g(Γ(e_i ⊗ e_j))·e_l = ∂_i g_jl + ∂_j g_li - ∂_l g_ij`
    /// with `∂g = -g (∂α) g` and solves for `Γ`.
    fn eq42_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        let p = self.model.dim();
        let a0 = self.cometric0(x);
        let ch = spd_cholesky(&a0, "cometric").map_err(rank_deficient)?;
        let g0 = ch.inverse();
        let dg: Vec<Matrix> = (0..p).map(|l| -(&g0 * self.dcometric0(x, l) * &g0)).collect();
        let mut rhs = Matrix::zeros(p, p * p);
        for i in 0..p {
            for j in 0..p {
                for l in 0..p {
                    rhs[(l, i * p + j)] = dg[i][(j, l)] + dg[j][(l, i)] - dg[l][(i, j)];
                }
            }
        }
        let sol = spd_cholesky(&g0, "metric").map_err(rank_deficient)?.solve(&rhs);
        for k in 0..p {
            for ij in 0..p * p {
                out[k * p * p + ij] = 0.5 * sol[(k, ij)];
            }
        }
        Ok(())
    }

    /// `ζ(x) = ½Γ(x)(α(x))`.
    pub fn zeta(&self, x: &[f64]) -> Result<Vector> {
        let p = self.model.dim();
        let mut out = Vector::zeros(p);
        self.zeta_into(x, out.as_mut_slice())?;
        Ok(out)
    }

    fn zeta_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        ensure_contains(self, x)?;
        let p = self.model.dim();
        let mut gamma = vec![0.0; p * p * p];
        self.christoffel_checked(x, &mut gamma)?;
        let alpha = self.cometric(x);
        for k in 0..p {
            let mut s = 0.0;
            for i in 0..p {
                for j in 0..p {
                    s += gamma[(k * p + i) * p + j] * alpha[(i, j)];
                }
            }
            out[k] = 0.5 * s;
        }
        Ok(())
    }

    fn christoffel_checked(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        if self.model.closed_form_connector() {
            self.model.christoffel_into(x, out);
            Ok(())
        } else {
            self.eq42_into(x, out)
        }
    }

    /// Intrinsic drift `ξ = b + ζ`.
    pub fn xi(&self, x: &[f64]) -> Result<Vector> {
        Ok(drift(self.model.as_ref(), x) + self.zeta(x)?)
    }

    /// `Dξ(x)`: the model's drift Jacobian plus central differences of `ζ`.
    pub fn xi_jacobian(&self, x: &[f64]) -> Result<Matrix> {
        let p = self.model.dim();
        let mut jac = self.model.drift_jacobian(x);
        let h = fd_step(x, 1e-5);
        let mut xp = x.to_vec();
        for l in 0..p {
            xp[l] = x[l] + h;
            let zp = self.zeta(&xp)?;
            xp[l] = x[l] - h;
            let zm = self.zeta(&xp)?;
            xp[l] = x[l];
            for k in 0..p {
                jac[(k, l)] += (zp[k] - zm[k]) / (2.0 * h);
            }
        }
        Ok(jac)
    }

    /// `D²ξ(x)`: the model's drift Hessian plus second differences of `ζ`.
    pub fn xi_hessian(&self, x: &[f64]) -> Result<Bilinear> {
        let p = self.model.dim();
        let mut hess = self.model.drift_hessian(x);
        let h = fd_step(x, 2e-4);
        let z0 = self.zeta(x)?;
        let mut xp = x.to_vec();
        let at = |xp: &mut Vec<f64>, di: usize, si: f64, dj: usize, sj: f64| -> Result<Vector> {
            xp[di] += si * h;
            xp[dj] += sj * h;
            let z = self.zeta(xp);
            xp[di] -= si * h;
            xp[dj] -= sj * h;
            z
        };
        for i in 0..p {
            let zp = at(&mut xp, i, 1.0, i, 0.0)?;
            let zm = at(&mut xp, i, -1.0, i, 0.0)?;
            for k in 0..p {
                let v = hess.get(k, i, i) + (zp[k] - 2.0 * z0[k] + zm[k]) / (h * h);
                hess.set(k, i, i, v);
            }
            for j in i + 1..p {
                let pp = at(&mut xp, i, 1.0, j, 1.0)?;
                let pm = at(&mut xp, i, 1.0, j, -1.0)?;
                let mp = at(&mut xp, i, -1.0, j, 1.0)?;
                let mm = at(&mut xp, i, -1.0, j, -1.0)?;
                for k in 0..p {
                    let d = (pp[k] - pm[k] - mp[k] + mm[k]) / (4.0 * h * h);
                    let v = hess.get(k, i, j) + d;
                    hess.set(k, i, j, v);
                    hess.set(k, j, i, v);
                }
            }
        }
        Ok(hess)
    }
}

fn rank_deficient(e: Error) -> Error {
    match e {
        Error::Singular { condition, .. } => Error::Unsupported(format!(
            "diffusion variance is rank-deficient or ill-conditioned (condition {condition:.3e}); only full-rank models are supported"
        )),
        Error::NotPositiveDefinite(_) => {
            Error::Unsupported("diffusion variance is rank-deficient; only full-rank models are supported".into())
        }
        e => e,
    }
}

impl Chart for InducedGeometry {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn name(&self) -> String {
        format!("induced({})", self.model.name())
    }

    fn contains(&self, x: &[f64]) -> bool {
        self.model.contains(x)
    }

    fn metric(&self, x: &[f64]) -> Option<Matrix> {
        spd_inverse(&self.cometric(x), "cometric").ok()
    }

    fn christoffel_into(&self, x: &[f64], out: &mut [f64]) {
        if self.christoffel_checked(x, out).is_err() {
            out.fill(f64::NAN);
        }
    }

    fn dchristoffel_into(&self, x: &[f64], out: &mut [f64]) {
        if self.model.closed_form_connector() {
            self.model.dchristoffel_into(x, out);
        } else {
            let p = self.model.dim();
            fd_dchristoffel(&|y: &[f64], o: &mut [f64]| self.christoffel_into(y, o), p, x, 1e-4, out);
        }
    }

    fn analytic_derivative(&self) -> bool {
        self.model.closed_form_connector()
    }

    fn is_flat(&self) -> bool {
        self.model.is_flat()
    }
}

/// The canonical connector at `x`, always evaluated from the metric
/// derivatives (ignoring any closed form the model supplies).
pub fn canonical_connector(geom: &InducedGeometry, x: &Vector) -> Result<Bilinear> {
    ensure_contains(geom, x.as_slice())?;
    let p = geom.dim();
    let mut data = vec![0.0; p * p * p];
    geom.eq42_into(x.as_slice(), &mut data)?;
    Bilinear::from_flat(p, p, data)
}

/// Coordinate drift `b`, intrinsic drift `ξ = b + ζ` and `ζ = ½Γ(α)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DriftSplit {
    pub b: Vector,
    pub xi: Vector,
    pub zeta: Vector,
}

pub fn drift_decomposition(geom: &InducedGeometry, x: &Vector) -> Result<DriftSplit> {
    let zeta = geom.zeta(x.as_slice())?;
    let b = drift(geom.model().as_ref(), x.as_slice());
    Ok(DriftSplit {
        xi: &b + &zeta,
        b,
        zeta,
    })
}

/// `(ξ + ½Δ)f` from the gradient and Hessian of `f`, with
/// `Δf = Σ α^{ij}(∂_ij f - Γ^k_ij ∂_k f)`.
pub fn intrinsic_generator(geom: &InducedGeometry, x: &Vector, grad: &Vector, hess: &Matrix) -> Result<f64> {
    let p = geom.dim();
    let split = drift_decomposition(geom, x)?;
    let alpha = geom.cometric(x.as_slice());
    let mut gamma = vec![0.0; p * p * p];
    geom.christoffel_checked(x.as_slice(), &mut gamma)?;
    let mut lap = 0.0;
    let mut tmp = vec![0.0; p];
    for i in 0..p {
        for j in 0..p {
            let mut ei = vec![0.0; p];
            let mut ej = vec![0.0; p];
            ei[i] = 1.0;
            ej[j] = 1.0;
            bilinear_apply(&gamma, p, p, &ei, &ej, &mut tmp);
            let corr: f64 = tmp.iter().zip(grad.iter()).map(|(a, b)| a * b).sum();
            lap += alpha[(i, j)] * (hess[(i, j)] - corr);
        }
    }
    Ok(split.xi.dot(grad) + 0.5 * lap)
}

/// `Σ b^i ∂_i f + ½ Σ α^{ij} ∂_ij f`.
pub fn coordinate_generator(geom: &InducedGeometry, x: &Vector, grad: &Vector, hess: &Matrix) -> f64 {
    let b = drift(geom.model().as_ref(), x.as_slice());
    let alpha = geom.cometric(x.as_slice());
    b.dot(grad) + 0.5 * alpha.component_mul(hess).sum()
}
