//! The single-observation intrinsic update, recentering for the recursion,
//! and a coordinate extended Kalman filter baseline.

use crate::barycentre::{curvature_correction, TangentMoments};
use crate::diffusion::{
    ailp, ailp_state, drift, flow_second_fundamental_form, integrate_flow, second_fundamental_form_bilinear, FlowBundle,
    InducedGeometry, ObservationMap,
};
use crate::error::{Error, Result};
use crate::linalg::{min_eigenvalue, psd_factor, spd_solve, symmetrize, Bilinear, Matrix, Vector};
use crate::manifold::{ensure_contains, exp_taylor, log_numeric, transport_along_geodesic, Chart, LogOptions};
use crate::ode::rk4_integrate;

/// Geodesic steps used when carrying the posterior covariance to the new base.
pub const TRANSPORT_STEPS: usize = 32;

/// `X_0 = exp_{x_0}(U_0)` with `U_0` mean zero and covariance `Σ_0`.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterBelief {
    pub base: Vector,
    pub sigma0: Matrix,
}

impl FilterBelief {
    pub fn new(base: Vector, sigma0: Matrix) -> Result<Self> {
        let p = base.len();
        if sigma0.shape() != (p, p) {
            return Err(Error::Dimension {
                what: "belief covariance",
                expected: p,
                got: sigma0.nrows(),
            });
        }
        if (&sigma0 - sigma0.transpose()).amax() > 1e-12 * sigma0.amax().max(1.0) {
            return Err(Error::InvalidArgument("belief covariance is not symmetric".into()));
        }
        if p > 0 && min_eigenvalue(&sigma0) < -1e-12 * sigma0.amax().max(1e-300) {
            return Err(Error::NotPositiveDefinite("belief covariance"));
        }
        Ok(Self { base, sigma0 })
    }

    pub fn dim(&self) -> usize {
        self.base.len()
    }
}

/// Everything the update needs from the prediction over one interval.
#[derive(Clone, Debug)]
pub struct PredictState {
    pub bundle: FlowBundle,
    /// AILP of `X_δ` in `T_{x_δ}N`.
    pub ailp_state: Vector,
    /// AILP of `ψ(X_δ)` in `T_{ψ(x_δ)}M`.
    pub ailp_obs: Vector,
    pub psi_xdelta: Vector,
    /// `J = Dψ(x_δ)`.
    pub j: Matrix,
    pub beta_delta: Matrix,
}

impl PredictState {
    pub fn x_delta(&self) -> &Vector {
        self.bundle.x_delta()
    }

    pub fn xi_delta(&self) -> &Matrix {
        &self.bundle.xi_delta
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UpdateResult {
    pub x_delta: Vector,
    /// Approximate `E[U_δ | Z_δ]`.
    pub mu_hat: Vector,
    /// `(I - GJ)Ξ_δ`, symmetrized.
    pub sigma_hat: Matrix,
    pub gain: Matrix,
    /// The mean correction `E[ρ(Ẑ_δ ⊗ Ẑ_δ)]`.
    pub rho_mean: Vector,
    pub new_base: Vector,
}

pub fn predict(
    geom: &InducedGeometry,
    obs: &ObservationMap,
    belief: &FilterBelief,
    delta: f64,
    steps: usize,
) -> Result<PredictState> {
    if !(delta > 0.0) {
        return Err(Error::InvalidArgument(format!("prediction horizon must be positive, got {delta}")));
    }
    if obs.p() != geom.dim() {
        return Err(Error::Dimension {
            what: "observation map input",
            expected: geom.dim(),
            got: obs.p(),
        });
    }
    let bundle = integrate_flow(geom, &belief.base, &belief.sigma0, delta, steps)?;
    let state = ailp_state(&bundle);
    let ailp_obs = ailp(&bundle, geom, Some(obs))?;
    let xd = bundle.x_delta().clone();
    let psi_xdelta = obs.psi(xd.as_slice());
    ensure_contains(obs.chart_m().as_ref(), psi_xdelta.as_slice())?;
    Ok(PredictState {
        j: obs.jacobian(xd.as_slice()),
        beta_delta: obs.beta(psi_xdelta.as_slice()),
        psi_xdelta,
        ailp_state: state,
        ailp_obs,
        bundle,
    })
}

/// `exp⁻¹` on `M`: exact on flat charts, Newton on geodesics otherwise.
pub fn observation_log(obs: &ObservationMap, from: &Vector, to: &Vector, opts: &LogOptions) -> Result<Vector> {
    log_numeric(obs.chart_m().as_ref(), from, to, opts)
}

/// `Ẑ_δ = exp⁻¹_{ψ(x_δ)}(y1) - I[ψ(X_δ)]`.
pub fn innovation(pred: &PredictState, obs: &ObservationMap, y1: &Vector, opts: &LogOptions) -> Result<Vector> {
    Ok(observation_log(obs, &pred.psi_xdelta, y1, opts)? - &pred.ailp_obs)
}

/// `G = Ξ_δJᵀ(JΞ_δJᵀ + β)⁻¹`.
pub fn gain(pred: &PredictState) -> Result<Matrix> {
    kalman_gain(pred.xi_delta(), &pred.j, &pred.beta_delta)
}

pub fn kalman_gain(cov: &Matrix, j: &Matrix, beta: &Matrix) -> Result<Matrix> {
    let s = symmetrize(&(j * cov * j.transpose() + beta));
    Ok(spd_solve(&s, &(j * cov), "innovation covariance")?.transpose())
}

/// The bilinear `ρ_p` on `T_{x_δ}N` with `ρ(z) = ρ_p(Gz, Gz)`:
/// `½{(I - GJ)∇dφ_δ(τ_δ^0 ·, τ_δ^0 ·) - G∇dψ}`.
pub fn rho_form(pred: &PredictState, geom: &InducedGeometry, obs: &ObservationMap, g: &Matrix) -> Result<Bilinear> {
    let p = geom.dim();
    let xd = pred.x_delta();
    let ident = Matrix::identity(p, p) - g * &pred.j;
    let phi = flow_second_fundamental_form(&pred.bundle)
        .map_input(pred.bundle.tau_delta0())
        .map_output(&ident);
    let psi = second_fundamental_form_bilinear(obs, geom, xd)?.map_output(g);
    Ok(phi.sub(&psi).scaled(0.5))
}

/// Posterior mean and covariance of `U_δ` given the innovation, with the new
/// base point from the exponential barycentre.
pub fn update(pred: &PredictState, geom: &InducedGeometry, obs: &ObservationMap, zhat: &Vector) -> Result<UpdateResult> {
    if zhat.len() != obs.q() {
        return Err(Error::Dimension {
            what: "innovation",
            expected: obs.q(),
            got: zhat.len(),
        });
    }
    let p = geom.dim();
    let g = gain(pred)?;
    let rho = rho_form(pred, geom, obs, &g)?;
    let gz = &g * zhat;
    let gjx = &g * &pred.j * pred.xi_delta();
    let rho_mean = rho.contract(&symmetrize(&gjx));
    let mu_hat = &pred.ailp_state + &gz + rho.apply(&gz, &gz) - &rho_mean;
    let sigma_hat = symmetrize(&((Matrix::identity(p, p) - &g * &pred.j) * pred.xi_delta()));
    let new_base = recenter(geom, pred.x_delta(), &mu_hat, &sigma_hat)?;
    Ok(UpdateResult {
        x_delta: pred.x_delta().clone(),
        mu_hat,
        sigma_hat,
        gain: g,
        rho_mean,
        new_base,
    })
}

/// The tangent vector `μ̂ - ⅓ΣR(e_i, e_j)e_k μ̂^i Σ̂^{jk}` at `x_δ` whose
/// exponential is the recentred base.
pub fn recenter_vector(chart: &dyn Chart, x_delta: &Vector, mu_hat: &Vector, sigma_hat: &Matrix) -> Result<Vector> {
    let m = TangentMoments::new(x_delta.clone(), mu_hat.clone(), symmetrize(sigma_hat))?;
    Ok(mu_hat - curvature_correction(chart, &m)?)
}

pub fn recenter(chart: &dyn Chart, x_delta: &Vector, mu_hat: &Vector, sigma_hat: &Matrix) -> Result<Vector> {
    let v = recenter_vector(chart, x_delta, mu_hat, sigma_hat)?;
    exp_taylor(chart, x_delta, &v, 1.0)
}

/// The belief for the next interval: `Σ̂` parallel transported from `x_δ`
/// along the geodesic with initial velocity `v` to the new base.
pub fn carry_belief(chart: &dyn Chart, x_delta: &Vector, v: &Vector, sigma_hat: &Matrix, new_base: Vector) -> Result<FilterBelief> {
    let l = psd_factor(sigma_hat)?;
    let cols: Vec<Vector> = (0..l.ncols()).map(|c| l.column(c).into_owned()).collect();
    let (_, _, moved) = transport_along_geodesic(chart, x_delta, v, 1.0, TRANSPORT_STEPS, &cols)?;
    let p = x_delta.len();
    let mut lm = Matrix::zeros(p, cols.len());
    for (c, w) in moved.iter().enumerate() {
        lm.set_column(c, w);
    }
    FilterBelief::new(new_base, symmetrize(&(&lm * lm.transpose())))
}

/// One full step of the recursion.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub x_delta: Vector,
    pub zhat: Vector,
    pub mu_hat: Vector,
    pub sigma_hat: Matrix,
    pub x0_prime: Vector,
    pub next: FilterBelief,
}

pub fn filter_step(
    geom: &InducedGeometry,
    obs: &ObservationMap,
    belief: &FilterBelief,
    delta: f64,
    steps: usize,
    y1: &Vector,
    opts: &LogOptions,
) -> Result<StepRecord> {
    let pred = predict(geom, obs, belief, delta, steps)?;
    let zhat = innovation(&pred, obs, y1, opts)?;
    let upd = update(&pred, geom, obs, &zhat)?;
    let v = recenter_vector(geom, &upd.x_delta, &upd.mu_hat, &upd.sigma_hat)?;
    let next = carry_belief(geom, &upd.x_delta, &v, &upd.sigma_hat, upd.new_base.clone())?;
    Ok(StepRecord {
        x_delta: upd.x_delta,
        zhat,
        mu_hat: upd.mu_hat,
        sigma_hat: upd.sigma_hat,
        x0_prime: upd.new_base,
        next,
    })
}

/// Chains [`filter_step`] over a sequence of observations spaced `delta`
/// apart.
pub fn run_filter(
    geom: &InducedGeometry,
    obs: &ObservationMap,
    belief: &FilterBelief,
    delta: f64,
    steps: usize,
    observations: &[Vector],
    opts: &LogOptions,
) -> Result<Vec<StepRecord>> {
    let mut belief = belief.clone();
    let mut out = Vec::with_capacity(observations.len());
    for y in observations {
        let rec = filter_step(geom, obs, &belief, delta, steps, y, opts)?;
        belief = rec.next.clone();
        out.push(rec);
    }
    Ok(out)
}

/// Coordinate mean and covariance of the extended Kalman filter.
#[derive(Clone, Debug, PartialEq)]
pub struct EkfState {
    pub mean: Vector,
    pub cov: Matrix,
}

/// `ẋ = b(x)`, `Ṗ = Db P + P Dbᵀ + α(x)` over `[0, δ]` by RK4.
pub fn ekf_predict(geom: &InducedGeometry, state: &EkfState, delta: f64, steps: usize) -> Result<EkfState> {
    let model = geom.model().as_ref();
    let p = geom.dim();
    ensure_contains(geom, state.mean.as_slice())?;
    if steps == 0 {
        return Err(Error::InvalidArgument("prediction needs at least one step".into()));
    }
    let mut y = vec![0.0; p + p * p];
    y[..p].copy_from_slice(state.mean.as_slice());
    for i in 0..p {
        for j in 0..p {
            y[p + i * p + j] = state.cov[(i, j)];
        }
    }
    let rhs = |_t: f64, s: &[f64], ds: &mut [f64]| {
        let x = &s[..p];
        let b = drift(model, x);
        let db = model.drift_jacobian(x);
        let alpha = geom.cometric(x);
        let pm = Matrix::from_row_slice(p, p, &s[p..]);
        let dp = &db * &pm + &pm * db.transpose() + alpha;
        ds[..p].copy_from_slice(b.as_slice());
        for i in 0..p {
            for j in 0..p {
                ds[p + i * p + j] = dp[(i, j)];
            }
        }
    };
    rk4_integrate(rhs, &mut y, 0.0, delta, steps, |_, _, s| {
        s.iter().all(|v| v.is_finite()) && geom.contains(&s[..p])
    })
    .map_err(|step| Error::DomainExit {
        chart: geom.name(),
        step,
    })?;
    Ok(EkfState {
        mean: Vector::from_column_slice(&y[..p]),
        cov: symmetrize(&Matrix::from_row_slice(p, p, &y[p..])),
    })
}

/// Linear measurement update with `K = PJᵀ(JPJᵀ + β)⁻¹` and innovation
/// `exp⁻¹_{ψ(m)}(y1)`; no curvature or quadratic terms.
pub fn ekf_update(pred: &EkfState, obs: &ObservationMap, y1: &Vector, opts: &LogOptions) -> Result<EkfState> {
    let m = pred.mean.as_slice();
    let p = pred.mean.len();
    let y = obs.psi(m);
    let j = obs.jacobian(m);
    let k = kalman_gain(&pred.cov, &j, &obs.beta(y.as_slice()))?;
    let innov = observation_log(obs, &y, y1, opts)?;
    Ok(EkfState {
        mean: &pred.mean + &k * innov,
        cov: symmetrize(&((Matrix::identity(p, p) - &k * j) * &pred.cov)),
    })
}
