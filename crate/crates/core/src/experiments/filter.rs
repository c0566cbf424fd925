//! The single-observation update against the Monte Carlo conditional oracle,
//! the flat-space reduction, and simulated multi-step filter runs.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ladder_fit, norm_with_se, rows_to_matrix, LadderPoint};
use crate::diffusion::{InducedGeometry, ModelSpec, ObservationMap, ObservationSpec};
use crate::error::{Error, Result};
use crate::filter::{ekf_predict, ekf_update, kalman_gain, predict, run_filter, update, EkfState, FilterBelief};
use crate::gaussian_cond::conditional_gaussian;
use crate::linalg::{symmetrize, Matrix, Vector};
use crate::manifold::{exp_geodesic, log_numeric, Chart, GeodesicSolver, LogOptions};
use crate::mc::rng::{derive_seed, stream_rng};
use crate::mc::stats::chunk_ranges;
use crate::mc::{
    likelihood_weights, sample_initial, sample_observation, simulate_ensemble, simulate_sde, weighted_moments,
    ConditionalEstimate, ControlVariate, Ensemble, EnsembleSetup, FirstVariation, OrderFit, Weighted, PATH_LOG,
};

fn one() -> f64 {
    1.0
}

fn default_model() -> ModelSpec {
    ModelSpec::Warped2d { kappa: 1.0, c: 0.5 }
}

fn default_observation() -> ObservationSpec {
    ObservationSpec::Quadratic {
        h: vec![vec![1.0, 0.3], vec![-0.2, 1.0]],
        c: vec![
            vec![vec![1.0, 0.0], vec![0.0, 0.0]],
            vec![vec![0.0, 0.8], vec![0.8, -0.5]],
        ],
        offset: None,
        beta: 1.0,
    }
}

fn default_base() -> Vec<f64> {
    vec![0.4, -0.3]
}

fn identity2() -> Vec<Vec<f64>> {
    vec![vec![1.0, 0.0], vec![0.0, 1.0]]
}

fn default_zhat() -> Vec<f64> {
    vec![0.5, -0.3]
}

fn default_sde_steps() -> usize {
    256
}

fn default_paths() -> usize {
    1_000_000
}

fn default_ladder() -> Vec<f64> {
    vec![0.2, 0.1, 0.05]
}

pub(crate) fn matrix_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// One observation interval on a model and observation map; all scales are
/// tied to `γ` by `Σ₀ = γ²·sigma0`, `δ = γ²·t0` and `Ẑ_δ = γ·zhat`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpdateStudy {
    #[serde(default = "default_model")]
    pub model: ModelSpec,
    #[serde(default = "default_observation")]
    pub observation: ObservationSpec,
    #[serde(default = "default_base")]
    pub base: Vec<f64>,
    #[serde(default = "identity2")]
    pub sigma0: Vec<Vec<f64>>,
    #[serde(default = "one")]
    pub t0: f64,
    #[serde(default = "default_zhat")]
    pub zhat: Vec<f64>,
    #[serde(default = "default_sde_steps")]
    pub sde_steps: usize,
    #[serde(default = "default_paths")]
    pub n_paths: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_ladder")]
    pub gammas: Vec<f64>,
}

impl Default for UpdateStudy {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

/// The pieces of one rung that the estimates are built from.
pub struct UpdateCase {
    pub geom: InducedGeometry,
    pub obs: ObservationMap,
    pub belief: FilterBelief,
    pub delta: f64,
    pub zhat: Vector,
}

impl UpdateStudy {
    pub fn case(&self, gamma: f64) -> Result<UpdateCase> {
        let geom = InducedGeometry::new(self.model.build(gamma)?);
        let obs = self.observation.build(Arc::new(geom.clone()), gamma)?;
        let g2 = gamma * gamma;
        let sigma0 = rows_to_matrix(&self.sigma0, "sigma0")? * g2;
        let belief = FilterBelief::new(Vector::from_column_slice(&self.base), sigma0)?;
        if self.zhat.len() != obs.q() {
            return Err(Error::Config(format!(
                "innovation has {} components, observation has {}",
                self.zhat.len(),
                obs.q()
            )));
        }
        if !(self.t0 > 0.0) {
            return Err(Error::Config(format!("t0 must be positive, got {}", self.t0)));
        }
        Ok(UpdateCase {
            geom,
            obs,
            belief,
            delta: g2 * self.t0,
            zhat: Vector::from_column_slice(&self.zhat) * gamma,
        })
    }
}

/// Filter, EKF and oracle quantities at one noise scale.
#[derive(Clone, Debug, Serialize)]
pub struct UpdateRung {
    pub gamma: f64,
    pub n_paths: usize,
    pub ess: f64,
    pub zhat: Vec<f64>,
    pub mu_hat: Vec<f64>,
    pub oracle_mean: Vec<f64>,
    pub oracle_mean_se: Vec<f64>,
    pub filter_error: f64,
    pub filter_error_se: f64,
    pub ekf_estimate: Vec<f64>,
    pub ekf_error: f64,
    pub ekf_error_se: f64,
    pub sigma_hat: Vec<Vec<f64>>,
    pub oracle_cov: Vec<Vec<f64>>,
    pub oracle_cov_se: Vec<Vec<f64>>,
    /// `max |Σ̂ − C| − 3·se` over entries.
    pub cov_excess: f64,
    pub x0_prime: Vec<f64>,
    /// Conditional mean of `exp⁻¹_{x₀′}(X_δ)`.
    pub recentred_mean: Vec<f64>,
    pub recentred_norm: f64,
    pub recentred_se: f64,
    /// Conditional third moment tensor of `exp⁻¹_{x₀′}(X_δ)`, flattened.
    pub third_moment: Vec<f64>,
    pub third_norm: f64,
    pub third_se: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct UpdateReport {
    pub rungs: Vec<UpdateRung>,
    pub filter_fit: Option<OrderFit>,
    pub ekf_fit: Option<OrderFit>,
    pub recentred_fit: Option<OrderFit>,
    pub third_fit: Option<OrderFit>,
}

fn diag_se(se: &Vector) -> Matrix {
    Matrix::from_diagonal(&se.component_mul(se))
}

fn estimate_norm(est: &Vector, se: &Vector, target: &Vector) -> (f64, f64) {
    let d = est - target;
    norm_with_se(&d, &diag_se(se), &Matrix::identity(d.len(), d.len()))
}

/// Weighted conditional moments of `value` given `Z_δ = ailp_obs + ẑ`, with
/// the first-variation process as control variate. The likelihood weights
/// are exact when `M` is flat and `β` constant.
pub struct Oracle<'a> {
    ens: &'a Ensemble,
    weights: Vec<f64>,
    control_weights: Vec<f64>,
    lambda_mean: Vector,
    lambda_cov: Matrix,
}

impl<'a> Oracle<'a> {
    pub fn new(ens: &'a Ensemble, geom: &InducedGeometry, sigma0: &Matrix, j: &Matrix, beta: &Matrix, query: &Vector, zhat: &Vector) -> Result<Self> {
        let n = ens.len();
        let xi = FirstVariation::new(&ens.flow, geom).covariance(sigma0);
        let s_zz = j * &xi * j.transpose() + beta;
        let (lambda_mean, lambda_cov) = conditional_gaussian(&xi, &(j * &xi), &s_zz, zhat, &Vector::zeros(zhat.len()))?;
        Ok(Self {
            weights: likelihood_weights(n, |i| Vector::from_column_slice(ens.z_clean(i)), query, beta)?,
            control_weights: likelihood_weights(n, |i| j * Vector::from_column_slice(ens.lambda(i)), zhat, beta)?,
            ens,
            lambda_mean,
            lambda_cov,
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Moments of `value(i)` controlled by `Λ_δ`.
    pub fn moments(&self, value: &(dyn Fn(usize) -> Vector + Sync)) -> Result<ConditionalEstimate> {
        let p = self.ens.p();
        let lam = |i: usize| Vector::from_column_slice(self.ens.lambda(i));
        weighted_moments(
            &Weighted {
                weights: &self.weights,
                dim: p,
                value,
            },
            Some(&ControlVariate {
                sample: Weighted {
                    weights: &self.control_weights,
                    dim: p,
                    value: &lam,
                },
                mean: self.lambda_mean.clone(),
                cov: self.lambda_cov.clone(),
            }),
        )
    }

    /// Mean of `v(i)⊗v(i)⊗v(i)` controlled by the centred `Λ_δ`, whose
    /// conditional third moment vanishes.
    pub fn third_moment(&self, value: &(dyn Fn(usize) -> Vector + Sync)) -> Result<ConditionalEstimate> {
        let p = self.ens.p();
        let cube = |v: &Vector| Vector::from_fn(p * p * p, |k, _| v[k / (p * p)] * v[(k / p) % p] * v[k % p]);
        let main = |i: usize| cube(&value(i));
        let ctrl = |i: usize| cube(&(Vector::from_column_slice(self.ens.lambda(i)) - &self.lambda_mean));
        let d = p * p * p;
        weighted_moments(
            &Weighted {
                weights: &self.weights,
                dim: d,
                value: &main,
            },
            Some(&ControlVariate {
                sample: Weighted {
                    weights: &self.control_weights,
                    dim: d,
                    value: &ctrl,
                },
                mean: Vector::zeros(d),
                cov: Matrix::zeros(d, d),
            }),
        )
    }
}

/// `exp⁻¹_base(X_δ)` for every path.
pub fn path_logs(geom: &InducedGeometry, ens: &Ensemble, base: &Vector) -> Result<Vec<f64>> {
    let p = ens.p();
    let parts = chunk_ranges(ens.len(), 1024)
        .into_par_iter()
        .map(|r| -> Result<Vec<f64>> {
            let mut solver = GeodesicSolver::new(geom);
            let mut out = Vec::with_capacity(r.len() * p);
            for i in r {
                let e = solver
                    .log(base, &Vector::from_column_slice(ens.x_delta(i)), &PATH_LOG)
                    .map_err(|e| Error::Sample {
                        index: i,
                        source: Box::new(e),
                    })?;
                out.extend_from_slice(e.as_slice());
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.concat())
}

pub fn update_rung(study: &UpdateStudy, gamma: f64, rung: u64) -> Result<UpdateRung> {
    update_rung_with_paths(study, gamma, rung).map(|(r, _)| r)
}

/// [`update_rung`] that also returns the simulated paths.
pub fn update_rung_with_paths(study: &UpdateStudy, gamma: f64, rung: u64) -> Result<(UpdateRung, Ensemble)> {
    let case = study.case(gamma)?;
    let (geom, obs, belief) = (&case.geom, &case.obs, &case.belief);
    let p = geom.dim();
    let setup = EnsembleSetup::new(geom, Some(obs), belief, case.delta).with_steps(study.sde_steps);
    let ens = simulate_ensemble(&setup, study.n_paths, derive_seed(study.seed, rung))?;
    let pred = predict(geom, obs, belief, case.delta, study.sde_steps)?;
    let upd = update(&pred, geom, obs, &case.zhat)?;
    let query = &pred.ailp_obs + &case.zhat;
    let oracle = Oracle::new(&ens, geom, &belief.sigma0, &pred.j, &pred.beta_delta, &query, &case.zhat)?;

    let u = |i: usize| Vector::from_column_slice(ens.u_delta(i));
    let est = oracle.moments(&u)?;
    let (filter_error, filter_error_se) = estimate_norm(&upd.mu_hat, &est.mean_std_err, &est.mean);

    let ekf0 = EkfState {
        mean: belief.base.clone(),
        cov: belief.sigma0.clone(),
    };
    let y1 = exp_geodesic(obs.chart_m().as_ref(), &pred.psi_xdelta, &query, LogOptions::default().steps)?;
    let ekf = ekf_update(&ekf_predict(geom, &ekf0, case.delta, study.sde_steps)?, obs, &y1, &LogOptions::default())?;
    let ekf_u = log_numeric(geom, pred.x_delta(), &ekf.mean, &LogOptions::default())?;
    let (ekf_error, ekf_error_se) = estimate_norm(&ekf_u, &est.mean_std_err, &est.mean);

    let cov_excess = (0..p * p)
        .map(|k| (upd.sigma_hat[k] - est.cov[k]).abs() - 3.0 * est.cov_std_err[k])
        .fold(f64::NEG_INFINITY, f64::max);

    let logs = path_logs(geom, &ens, &upd.new_base)?;
    let eta = |i: usize| Vector::from_column_slice(&logs[i * p..(i + 1) * p]);
    let rec = oracle.moments(&eta)?;
    let (recentred_norm, recentred_se) = estimate_norm(&rec.mean, &rec.mean_std_err, &Vector::zeros(p));
    let third = oracle.third_moment(&eta)?;
    let (third_norm, third_se) = estimate_norm(&third.mean, &third.mean_std_err, &Vector::zeros(p * p * p));

    let rung = UpdateRung {
        gamma,
        n_paths: study.n_paths,
        ess: est.ess,
        zhat: case.zhat.as_slice().to_vec(),
        mu_hat: upd.mu_hat.as_slice().to_vec(),
        oracle_mean: est.mean.as_slice().to_vec(),
        oracle_mean_se: est.mean_std_err.as_slice().to_vec(),
        filter_error,
        filter_error_se,
        ekf_estimate: ekf_u.as_slice().to_vec(),
        ekf_error,
        ekf_error_se,
        sigma_hat: matrix_rows(&upd.sigma_hat),
        oracle_cov: matrix_rows(&est.cov),
        oracle_cov_se: matrix_rows(&est.cov_std_err),
        cov_excess,
        x0_prime: upd.new_base.as_slice().to_vec(),
        recentred_mean: rec.mean.as_slice().to_vec(),
        recentred_norm,
        recentred_se,
        third_moment: third.mean.as_slice().to_vec(),
        third_norm,
        third_se,
    };
    drop(oracle);
    Ok((rung, ens))
}

pub fn update_study(study: &UpdateStudy) -> Result<UpdateReport> {
    update_study_with(study, |_, _| Ok(()))
}

/// [`update_study`] handing each rung's paths to `paths` before they are
/// dropped.
pub fn update_study_with(study: &UpdateStudy, mut paths: impl FnMut(usize, &Ensemble) -> Result<()>) -> Result<UpdateReport> {
    if study.gammas.len() < 3 {
        return Err(Error::Config(format!("the ladder needs at least 3 rungs, got {}", study.gammas.len())));
    }
    let rungs = study
        .gammas
        .iter()
        .enumerate()
        .map(|(r, &g)| {
            let (rung, ens) = update_rung_with_paths(study, g, r as u64)?;
            paths(r, &ens)?;
            Ok(rung)
        })
        .collect::<Result<Vec<_>>>()?;
    let fit = |f: &dyn Fn(&UpdateRung) -> (f64, f64)| {
        let pts: Vec<LadderPoint> = rungs
            .iter()
            .map(|r| {
                let (error, std_err) = f(r);
                LadderPoint {
                    gamma: r.gamma,
                    error,
                    std_err,
                }
            })
            .collect();
        ladder_fit(&pts)
    };
    Ok(UpdateReport {
        filter_fit: fit(&|r| (r.filter_error, r.filter_error_se))?,
        ekf_fit: fit(&|r| (r.ekf_error, r.ekf_error_se))?,
        recentred_fit: fit(&|r| (r.recentred_norm, r.recentred_se))?,
        third_fit: fit(&|r| (r.third_norm, r.third_se))?,
        rungs,
    })
}

/// `(e^{Aδ}, ∫₀^δ e^{As}ds·c, Q)` for `dx = (Ax + c)dt + dW`, `Cov dW = α dt`,
/// by Van Loan's block exponential.
pub fn van_loan(a: &Matrix, c: &Vector, alpha: &Matrix, delta: f64) -> (Matrix, Vector, Matrix) {
    let p = a.nrows();
    let mut m = Matrix::zeros(2 * p, 2 * p);
    m.view_mut((0, 0), (p, p)).copy_from(&(-a * delta));
    m.view_mut((0, p), (p, p)).copy_from(&(alpha * delta));
    m.view_mut((p, p), (p, p)).copy_from(&(a.transpose() * delta));
    let e = m.exp();
    let ead = e.view((p, p), (p, p)).transpose();
    let q = &ead * e.view((0, p), (p, p));
    let mut aug = Matrix::zeros(p + 1, p + 1);
    aug.view_mut((0, 0), (p, p)).copy_from(&(a * delta));
    aug.view_mut((0, p), (p, 1)).copy_from(&(c * delta));
    let shift = aug.exp().view((0, p), (p, 1)).column(0).into_owned();
    (ead, shift, symmetrize(&q))
}

fn default_flat_model() -> ModelSpec {
    ModelSpec::FlatLinear {
        a: vec![vec![-0.8, 0.3], vec![-0.2, -0.4]],
        c: vec![0.1, -0.3],
        sigma: vec![vec![1.0, 0.0], vec![0.3, 0.7]],
    }
}

fn default_linear_observation() -> ObservationSpec {
    ObservationSpec::Linear {
        h: vec![vec![1.0, 0.5], vec![0.0, 1.2]],
        offset: Some(vec![0.2, -0.1]),
        beta: 0.5,
    }
}

fn default_scenario_sigma0() -> Vec<Vec<f64>> {
    vec![vec![0.06, 0.01], vec![0.01, 0.05]]
}

fn half() -> f64 {
    0.5
}

fn default_delta() -> f64 {
    0.3
}

fn default_filter_steps() -> usize {
    20
}

fn default_flow_steps() -> usize {
    128
}

/// A multi-step run on one simulated truth path. `sigma0` is the initial
/// covariance as given, not scaled by `γ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default = "default_flat_model")]
    pub model: ModelSpec,
    #[serde(default = "default_linear_observation")]
    pub observation: ObservationSpec,
    #[serde(default = "half")]
    pub gamma: f64,
    #[serde(default = "default_base")]
    pub base: Vec<f64>,
    #[serde(default = "default_scenario_sigma0")]
    pub sigma0: Vec<Vec<f64>>,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_filter_steps")]
    pub n_steps: usize,
    /// Steps of the deterministic flow and the EKF covariance equation.
    #[serde(default = "default_flow_steps")]
    pub flow_steps: usize,
    /// Euler steps per interval of the simulated truth.
    #[serde(default = "default_sde_steps")]
    pub sde_steps: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for Scenario {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ScenarioStep {
    pub step: usize,
    pub time: f64,
    pub truth: Vec<f64>,
    pub observation: Vec<f64>,
    pub x_delta: Vec<f64>,
    pub zhat: Vec<f64>,
    pub mu_hat: Vec<f64>,
    pub sigma_hat: Vec<Vec<f64>>,
    pub x0_prime: Vec<f64>,
    pub filter_cov: Vec<Vec<f64>>,
    pub ekf_mean: Vec<f64>,
    pub ekf_cov: Vec<Vec<f64>>,
    pub filter_error: f64,
    pub ekf_error: f64,
}

/// Simulated truth and observations: stream 0 draws `X_0`, stream `k`
/// drives interval `k`.
pub fn simulate_truth(sc: &Scenario, geom: &InducedGeometry, obs: &ObservationMap, belief: &FilterBelief) -> Result<(Vec<Vector>, Vec<Vector>)> {
    let (mut x, _) = sample_initial(geom, belief, &mut stream_rng(sc.seed, 0))?;
    let mut truth = Vec::with_capacity(sc.n_steps);
    let mut ys = Vec::with_capacity(sc.n_steps);
    for k in 1..=sc.n_steps {
        let mut rng = stream_rng(sc.seed, k as u64);
        x = simulate_sde(geom.model().as_ref(), &x, sc.delta, sc.sde_steps, &mut rng)?;
        ys.push(sample_observation(obs, &x, &mut rng)?);
        truth.push(x.clone());
    }
    Ok((truth, ys))
}

pub fn run_scenario(sc: &Scenario) -> Result<Vec<ScenarioStep>> {
    if !(sc.delta > 0.0) {
        return Err(Error::Config(format!("delta must be positive, got {}", sc.delta)));
    }
    let geom = InducedGeometry::new(sc.model.build(sc.gamma)?);
    let obs = sc.observation.build(Arc::new(geom.clone()), sc.gamma)?;
    let belief = FilterBelief::new(Vector::from_column_slice(&sc.base), rows_to_matrix(&sc.sigma0, "sigma0")?)?;
    let (truth, ys) = simulate_truth(sc, &geom, &obs, &belief)?;
    let opts = LogOptions::default();
    let records = run_filter(&geom, &obs, &belief, sc.delta, sc.flow_steps, &ys, &opts)?;
    let mut ekf = EkfState {
        mean: belief.base.clone(),
        cov: belief.sigma0.clone(),
    };
    let mut out = Vec::with_capacity(records.len());
    for (k, rec) in records.iter().enumerate() {
        ekf = ekf_update(&ekf_predict(&geom, &ekf, sc.delta, sc.flow_steps)?, &obs, &ys[k], &opts)?;
        out.push(ScenarioStep {
            step: k + 1,
            time: (k + 1) as f64 * sc.delta,
            truth: truth[k].as_slice().to_vec(),
            observation: ys[k].as_slice().to_vec(),
            x_delta: rec.x_delta.as_slice().to_vec(),
            zhat: rec.zhat.as_slice().to_vec(),
            mu_hat: rec.mu_hat.as_slice().to_vec(),
            sigma_hat: matrix_rows(&rec.sigma_hat),
            x0_prime: rec.x0_prime.as_slice().to_vec(),
            filter_cov: matrix_rows(&rec.next.sigma0),
            ekf_mean: ekf.mean.as_slice().to_vec(),
            ekf_cov: matrix_rows(&ekf.cov),
            filter_error: (&rec.x0_prime - &truth[k]).norm(),
            ekf_error: (&ekf.mean - &truth[k]).norm(),
        });
    }
    Ok(out)
}

/// Largest entrywise gaps between the intrinsic filter, the EKF and the
/// textbook Kalman filter over a scenario on a flat-linear model with a
/// linear observation.
#[derive(Clone, Debug, Serialize)]
pub struct FlatReduction {
    pub steps: usize,
    pub filter_vs_kalman: f64,
    pub ekf_vs_kalman: f64,
    pub filter_vs_ekf: f64,
    pub per_step: Vec<f64>,
}

pub fn flat_reduction(sc: &Scenario) -> Result<FlatReduction> {
    let ModelSpec::FlatLinear { a, c, sigma } = &sc.model else {
        return Err(Error::Config(format!("flat reduction needs the flat-linear model, got {}", sc.model.name())));
    };
    let a = rows_to_matrix(a, "flat-linear drift")?;
    let s = rows_to_matrix(sigma, "flat-linear dispersion")? * sc.gamma;
    let c = Vector::from_column_slice(c);
    let geom = InducedGeometry::new(sc.model.build(sc.gamma)?);
    let obs = sc.observation.build(Arc::new(geom.clone()), sc.gamma)?;
    if matches!(sc.observation, ObservationSpec::Quadratic { .. }) {
        return Err(Error::Config("flat reduction needs a linear observation map".into()));
    }
    let p = a.nrows();
    let h = obs.jacobian(&vec![0.0; p]);
    let d = obs.psi(&vec![0.0; p]);
    let r = obs.beta(d.as_slice());
    let (ead, shift, q) = van_loan(&a, &c, &(&s * s.transpose()), sc.delta);

    let steps = run_scenario(sc)?;
    let belief_cov = rows_to_matrix(&sc.sigma0, "sigma0")?;
    let mut m = Vector::from_column_slice(&sc.base);
    let mut pk = belief_cov;
    let mut report = FlatReduction {
        steps: steps.len(),
        filter_vs_kalman: 0.0,
        ekf_vs_kalman: 0.0,
        filter_vs_ekf: 0.0,
        per_step: Vec::with_capacity(steps.len()),
    };
    let gap = |x: &[f64], y: &Vector| x.iter().zip(y.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let gap_m = |x: &[Vec<f64>], y: &Matrix| (0..p).map(|i| gap(&x[i], &y.row(i).transpose())).fold(0.0, f64::max);
    for st in &steps {
        m = &ead * &m + &shift;
        pk = &ead * &pk * ead.transpose() + &q;
        let k = kalman_gain(&pk, &h, &r)?;
        m = &m + &k * (Vector::from_column_slice(&st.observation) - &h * &m - &d);
        pk = symmetrize(&((Matrix::identity(p, p) - &k * &h) * &pk));
        let f = gap(&st.x0_prime, &m).max(gap_m(&st.filter_cov, &pk));
        let e = gap(&st.ekf_mean, &m).max(gap_m(&st.ekf_cov, &pk));
        let fe = gap(&st.x0_prime, &Vector::from_column_slice(&st.ekf_mean));
        report.filter_vs_kalman = report.filter_vs_kalman.max(f);
        report.ekf_vs_kalman = report.ekf_vs_kalman.max(e);
        report.filter_vs_ekf = report.filter_vs_ekf.max(fe);
        report.per_step.push(f.max(e));
    }
    Ok(report)
}
