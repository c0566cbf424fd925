use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::linalg::{symmetrize, Bilinear, Matrix, Vector};
use crate::manifold::{connector, ensure_contains, Chart};
use crate::ode::Rk4;

use super::geometry::InducedGeometry;
use super::observation::{second_fundamental_form_bilinear, ObservationMap};

pub const DEFAULT_FLOW_STEPS: usize = 512;

/// Largest condition number tolerated for the flow derivative `τ_0^t`.
const MAX_TAU_CONDITION: f64 = 1e12;

/// The deterministic `ξ`-flow from `x_0` over `[0, δ]` with its first and
/// second variations and accumulated noise covariances.
#[derive(Clone, Debug)]
pub struct FlowBundle {
    pub delta: f64,
    pub sigma0: Matrix,
    pub times: Vec<f64>,
    pub x: Vec<Vector>,
    /// `τ_0^t = Dφ_t(x_0)`.
    pub tau0t: Vec<Matrix>,
    /// `τ_t^0 = (τ_0^t)⁻¹`, integrated alongside.
    pub tau_t0: Vec<Matrix>,
    /// `τ_t^δ = τ_0^δ τ_t^0`.
    pub tau_t_delta: Vec<Matrix>,
    pub pi: Vec<Matrix>,
    /// `Ξ_δ = τ_0^δ Π_δ (τ_0^δ)ᵀ`.
    pub xi_delta: Matrix,
    /// `D²φ_δ(x_0)`.
    pub d2phi: Bilinear,
    /// `∫_0^δ τ_t^0 ∇dφ_t(x_0)(dΠ_t)`.
    pub pulled_integral: Vector,
    pub gamma_x0: Bilinear,
    pub gamma_xdelta: Bilinear,
}

impl FlowBundle {
    pub fn dim(&self) -> usize {
        self.sigma0.nrows()
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn x0(&self) -> &Vector {
        &self.x[0]
    }

    pub fn x_delta(&self) -> &Vector {
        self.x.last().expect("non-empty grid")
    }

    pub fn tau0_delta(&self) -> &Matrix {
        self.tau0t.last().expect("non-empty grid")
    }

    pub fn tau_delta0(&self) -> &Matrix {
        self.tau_t0.last().expect("non-empty grid")
    }

    pub fn pi_delta(&self) -> &Matrix {
        self.pi.last().expect("non-empty grid")
    }
}

fn condition(m: &Matrix) -> f64 {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().fold(0.0_f64, |a, &b| a.max(b));
    let min = sv.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    if min > 0.0 {
        max / min
    } else {
        f64::INFINITY
    }
}

/// Integrates `ẋ = ξ(x)` from `x0` over `[0, delta]` with `steps` RK4 steps,
/// together with `τ_0^t`, `τ_t^0`, `D²φ_t`, `Π_t` and the pulled-back AILP
/// integral, all on the same grid.
pub fn integrate_flow(geom: &InducedGeometry, x0: &Vector, sigma0: &Matrix, delta: f64, steps: usize) -> Result<FlowBundle> {
    let p = geom.dim();
    ensure_contains(geom, x0.as_slice())?;
    if steps == 0 {
        return Err(Error::InvalidArgument("flow needs at least one step".into()));
    }
    if !(delta.is_finite() && delta >= 0.0) {
        return Err(Error::InvalidArgument(format!("flow horizon must be non-negative, got {delta}")));
    }
    if sigma0.shape() != (p, p) {
        return Err(Error::Dimension {
            what: "initial covariance",
            expected: p,
            got: sigma0.nrows(),
        });
    }
    let gamma_x0 = connector(geom, x0)?;
    let (o_tau, o_tinv, o_d2, o_pi, o_int) = (p, p + p * p, p + 2 * p * p, p + 2 * p * p + p * p * p, p + 3 * p * p + p * p * p);
    let n = o_int + p;
    let mut state = vec![0.0; n];
    state[..p].copy_from_slice(x0.as_slice());
    for i in 0..p {
        state[o_tau + i * p + i] = 1.0;
        state[o_tinv + i * p + i] = 1.0;
        for j in 0..p {
            state[o_pi + i * p + j] = sigma0[(i, j)];
        }
    }
    let failure: RefCell<Option<Error>> = RefCell::new(None);
    // matrices are stored row-major in the state
    let mat = |s: &[f64], o: usize| Matrix::from_row_slice(p, p, &s[o..o + p * p]);
    let mut rhs = |_t: f64, s: &[f64], ds: &mut [f64]| {
        let x = &s[..p];
        let eval = || -> Result<(Vector, Matrix, Bilinear, Vector)> {
            ensure_contains(geom, x)?;
            Ok((geom.xi(x)?, geom.xi_jacobian(x)?, geom.xi_hessian(x)?, geom.zeta(x)?))
        };
        let (xi, dxi, d2xi, zeta) = match eval() {
            Ok(v) => v,
            Err(e) => {
                failure.borrow_mut().get_or_insert(e);
                ds.fill(f64::NAN);
                return;
            }
        };
        let alpha = geom.cometric(x);
        let tau = mat(s, o_tau);
        let tinv = mat(s, o_tinv);
        let dtau = &dxi * &tau;
        let dtinv = -(&tinv * &dxi);
        let m = &tinv * &alpha * tinv.transpose();
        ds[..p].copy_from_slice(xi.as_slice());
        for i in 0..p {
            for j in 0..p {
                ds[o_tau + i * p + j] = dtau[(i, j)];
                ds[o_tinv + i * p + j] = dtinv[(i, j)];
                ds[o_pi + i * p + j] = m[(i, j)];
            }
        }
        let d2 = &s[o_d2..o_d2 + p * p * p];
        let mut d2m = Vector::zeros(p);
        for k in 0..p {
            for a in 0..p {
                for b in 0..p {
                    let mut v = 0.0;
                    for mm in 0..p {
                        v += dxi[(k, mm)] * d2[(mm * p + a) * p + b];
                        for nn in 0..p {
                            v += d2xi.get(k, mm, nn) * tau[(mm, a)] * tau[(nn, b)];
                        }
                    }
                    ds[o_d2 + (k * p + a) * p + b] = v;
                    d2m[k] += d2[(k * p + a) * p + b] * m[(a, b)];
                }
            }
        }
        let integrand = &tinv * (d2m + zeta * 2.0) - gamma_x0.contract(&m);
        ds[o_int..o_int + p].copy_from_slice(integrand.as_slice());
    };

    let h = delta / steps as f64;
    let mut rk = Rk4::new(n);
    let mut times = Vec::with_capacity(steps + 1);
    let mut xs = Vec::with_capacity(steps + 1);
    let mut tau0t = Vec::with_capacity(steps + 1);
    let mut tau_t0 = Vec::with_capacity(steps + 1);
    let mut pi = Vec::with_capacity(steps + 1);
    let mut record = |t: f64, s: &[f64]| {
        times.push(t);
        xs.push(Vector::from_column_slice(&s[..p]));
        tau0t.push(mat(s, o_tau));
        tau_t0.push(mat(s, o_tinv));
        pi.push(symmetrize(&mat(s, o_pi)));
    };
    record(0.0, &state);
    for step in 0..steps {
        rk.step(&mut rhs, step as f64 * h, &mut state, h);
        if let Some(e) = failure.borrow_mut().take() {
            return Err(match e {
                Error::Domain { chart, .. } => Error::DomainExit { chart, step: step + 1 },
                e => e,
            });
        }
        if !state.iter().all(|v| v.is_finite()) || !geom.contains(&state[..p]) {
            return Err(Error::DomainExit {
                chart: geom.name(),
                step: step + 1,
            });
        }
        let cond = condition(&mat(&state, o_tau));
        if cond > MAX_TAU_CONDITION {
            return Err(Error::Singular {
                what: "flow derivative",
                condition: cond,
            });
        }
        record((step + 1) as f64 * h, &state);
    }
    let tau_end = tau0t.last().unwrap().clone();
    let tau_t_delta = tau_t0.iter().map(|m| &tau_end * m).collect();
    let xi_delta = symmetrize(&(&tau_end * pi.last().unwrap() * tau_end.transpose()));
    let d2phi = Bilinear::from_flat(p, p, state[o_d2..o_d2 + p * p * p].to_vec())?.symmetrized();
    let x_end = xs.last().unwrap().clone();
    Ok(FlowBundle {
        delta,
        sigma0: sigma0.clone(),
        times,
        tau0t,
        tau_t0,
        tau_t_delta,
        pi,
        xi_delta,
        d2phi,
        pulled_integral: Vector::from_column_slice(&state[o_int..o_int + p]),
        gamma_x0,
        gamma_xdelta: connector(geom, &x_end)?,
        x: xs,
    })
}

/// `∇dφ_δ(x_0) = D²φ_δ - τ_0^δ Γ(x_0) + Γ(x_δ)(τ_0^δ ·, τ_0^δ ·)`.
pub fn flow_second_fundamental_form(bundle: &FlowBundle) -> Bilinear {
    let tau = bundle.tau0_delta();
    bundle
        .d2phi
        .sub(&bundle.gamma_x0.map_output(tau))
        .add(&bundle.gamma_xdelta.map_input(tau))
}

/// `I[X_δ] = ½{∇dφ_δ(x_0)(Π_δ) - τ_0^δ ∫ τ_t^0 ∇dφ_t(x_0)(dΠ_t)}`.
pub fn ailp_state(bundle: &FlowBundle) -> Vector {
    let form = flow_second_fundamental_form(bundle);
    (form.contract(bundle.pi_delta()) - bundle.tau0_delta() * &bundle.pulled_integral) * 0.5
}

/// The AILP of `ψ(X_δ)` in `T_{ψ(x_δ)}M`, or of `X_δ` itself when `obs` is
/// `None`.
pub fn ailp(bundle: &FlowBundle, geom: &InducedGeometry, obs: Option<&ObservationMap>) -> Result<Vector> {
    let state = ailp_state(bundle);
    let Some(obs) = obs else {
        return Ok(state);
    };
    let xd = bundle.x_delta();
    let form = second_fundamental_form_bilinear(obs, geom, xd)?;
    let j = obs.jacobian(xd.as_slice());
    Ok(form.contract(&bundle.xi_delta) * 0.5 + j * state)
}
