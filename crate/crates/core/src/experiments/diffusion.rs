//! Diffusion-geometry identities and the AILP against simulated endpoints.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::filter::{matrix_rows, van_loan};
use super::rows_to_matrix;
use crate::diffusion::{coordinate_generator, integrate_flow, intrinsic_generator, InducedGeometry, ModelSpec, ObservationSpec};
use crate::error::{Error, Result};
use crate::filter::{predict, FilterBelief};
use crate::linalg::{Matrix, Vector};
use crate::manifold::Chart;
use crate::mc::rng::{derive_seed, stream_rng};
use crate::mc::{simulate_ensemble, EnsembleSetup, VectorMoments};

fn default_ailp_cases() -> Vec<AilpCase> {
    vec![
        AilpCase {
            model: ModelSpec::default_for("flat-linear").expect("builtin"),
            observation: ObservationSpec::Quadratic {
                h: vec![vec![1.0, 0.3], vec![-0.2, 1.0]],
                c: vec![vec![vec![1.0, 0.0], vec![0.0, 0.0]], vec![vec![0.0, 0.8], vec![0.8, -0.5]]],
                offset: None,
                beta: 1.0,
            },
            base: vec![0.4, -0.3],
        },
        AilpCase {
            model: ModelSpec::default_for("scalar-exp").expect("builtin"),
            observation: ObservationSpec::Quadratic {
                h: vec![vec![1.0]],
                c: vec![vec![vec![1.0]]],
                offset: None,
                beta: 1.0,
            },
            base: vec![0.3],
        },
        AilpCase {
            model: ModelSpec::default_for("warped-2d").expect("builtin"),
            observation: ObservationSpec::Quadratic {
                h: vec![vec![1.0, 0.3], vec![-0.2, 1.0]],
                c: vec![vec![vec![1.0, 0.0], vec![0.0, 0.0]], vec![vec![0.0, 0.8], vec![0.8, -0.5]]],
                offset: None,
                beta: 1.0,
            },
            base: vec![0.4, -0.3],
        },
    ]
}

fn default_gamma() -> f64 {
    0.1
}

fn one() -> f64 {
    1.0
}

fn million() -> usize {
    1_000_000
}

fn default_sde_steps() -> usize {
    256
}

fn ten() -> f64 {
    10.0
}

fn twenty() -> usize {
    20
}

/// One model with an observation map; `Σ₀ = γ²I` at `base`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AilpCase {
    pub model: ModelSpec,
    pub observation: ObservationSpec,
    pub base: Vec<f64>,
}

/// Lyapunov, first-variation, generator and AILP checks; `δ = γ²·t0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionCheck {
    #[serde(default = "default_ailp_cases")]
    pub cases: Vec<AilpCase>,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "one")]
    pub t0: f64,
    #[serde(default = "million")]
    pub n_paths: usize,
    #[serde(default = "default_sde_steps")]
    pub sde_steps: usize,
    /// Random points and test functions per model for the generator split.
    #[serde(default = "twenty")]
    pub generator_configs: usize,
    /// Mean allowance `allowance·‖Ξ_δ‖²` on top of three standard errors.
    #[serde(default = "ten")]
    pub allowance: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for DiffusionCheck {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct MeanCheck {
    pub predicted: Vec<f64>,
    pub estimate: Vec<f64>,
    pub std_err: Vec<f64>,
    pub allowance: f64,
    /// `max_k |estimate − predicted| − 3·se − allowance`; passes when `≤ 0`.
    pub excess: f64,
}

impl MeanCheck {
    fn new(predicted: &Vector, m: &VectorMoments, allowance: f64) -> Self {
        let est = m.mean();
        let se = m.std_err();
        let excess = (0..est.len())
            .map(|k| (est[k] - predicted[k]).abs() - 3.0 * se[k] - allowance)
            .fold(f64::NEG_INFINITY, f64::max);
        Self {
            predicted: predicted.as_slice().to_vec(),
            estimate: est.as_slice().to_vec(),
            std_err: se.as_slice().to_vec(),
            allowance,
            excess,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ModelDiffusion {
    pub model: String,
    pub n_paths: usize,
    /// `max |Var Λ_δ − Ξ_δ| − 3·se` over entries.
    pub lambda_cov_excess: f64,
    pub xi_delta: Vec<Vec<f64>>,
    pub lambda_cov: Vec<Vec<f64>>,
    /// Largest `|intrinsic − coordinate|` generator gap.
    pub generator_gap: f64,
    pub ailp_state: MeanCheck,
    pub ailp_obs: MeanCheck,
}

#[derive(Clone, Debug, Serialize)]
pub struct DiffusionReport {
    /// `max |Ξ_δ − closed form|` on the flat-linear model.
    pub lyapunov_gap: f64,
    pub models: Vec<ModelDiffusion>,
}

/// `Ξ_δ` on the flat-linear model against the block-exponential closed form.
pub fn lyapunov_gap(spec: &ModelSpec, gamma: f64, base: &Vector, sigma0: &Matrix, delta: f64) -> Result<f64> {
    let ModelSpec::FlatLinear { a, c, sigma } = spec else {
        return Err(Error::Config("the Lyapunov check needs the flat-linear model".into()));
    };
    let a = rows_to_matrix(a, "flat-linear drift")?;
    let s = rows_to_matrix(sigma, "flat-linear dispersion")? * gamma;
    let geom = InducedGeometry::new(spec.build(gamma)?);
    let flow = integrate_flow(&geom, base, sigma0, delta, 1024)?;
    let (ead, _, q) = van_loan(&a, &Vector::from_column_slice(c), &(&s * s.transpose()), delta);
    Ok((&flow.xi_delta - (&ead * sigma0 * ead.transpose() + q)).amax())
}

fn generator_gap(geom: &InducedGeometry, base: &Vector, n: usize, seed: u64) -> Result<f64> {
    let p = geom.dim();
    let mut rng = stream_rng(seed, 0);
    let mut gap = 0.0f64;
    for _ in 0..n {
        let a = Vector::from_fn(p, |_, _| rng.random_range(-1.0..1.0));
        let b = Vector::from_fn(p, |_, _| rng.random_range(-1.0..1.0));
        let c: f64 = rng.random_range(-1.0..1.0);
        let x = base + Vector::from_fn(p, |_, _| rng.random_range(-0.5..0.5));
        // f(x) = sin(a·x + c) + (b·x)²/2
        let s = a.dot(&x) + c;
        let grad = &a * s.cos() + &b * b.dot(&x);
        let hess = &a * a.transpose() * (-s.sin()) + &b * b.transpose();
        let lhs = intrinsic_generator(geom, &x, &grad, &hess)?;
        gap = gap.max((lhs - coordinate_generator(geom, &x, &grad, &hess)).abs());
    }
    Ok(gap)
}

pub fn check_diffusion(cfg: &DiffusionCheck) -> Result<DiffusionReport> {
    if !(cfg.gamma > 0.0 && cfg.t0 > 0.0) {
        return Err(Error::Config("gamma and t0 must be positive".into()));
    }
    let g2 = cfg.gamma * cfg.gamma;
    let delta = g2 * cfg.t0;
    let mut lyapunov = None;
    let models = cfg
        .cases
        .iter()
        .enumerate()
        .map(|(ci, case)| {
            let geom = InducedGeometry::new(case.model.build(cfg.gamma)?);
            let p = geom.dim();
            if case.base.len() != p {
                return Err(Error::Config(format!("{}: base needs {p} coordinates", case.model.name())));
            }
            let base = Vector::from_column_slice(&case.base);
            let sigma0 = Matrix::identity(p, p) * g2;
            if matches!(case.model, ModelSpec::FlatLinear { .. }) && lyapunov.is_none() {
                lyapunov = Some(lyapunov_gap(&case.model, cfg.gamma, &base, &sigma0, delta)?);
            }
            let obs = case.observation.build(Arc::new(geom.clone()), cfg.gamma)?;
            let belief = FilterBelief::new(base.clone(), sigma0.clone())?;
            let setup = EnsembleSetup::new(&geom, Some(&obs), &belief, delta).with_steps(cfg.sde_steps);
            let ens = simulate_ensemble(&setup, cfg.n_paths, derive_seed(cfg.seed, ci as u64))?;
            let pred = predict(&geom, &obs, &belief, delta, cfg.sde_steps)?;
            let xi_scale = pred.xi_delta().clone().symmetric_eigen().eigenvalues.max();
            let allowance = cfg.allowance * xi_scale * xi_scale;
            let q = obs.q();
            let flat_m = obs.chart_m().is_flat();

            let (mut lam, mut u, mut z) = (VectorMoments::new(p), VectorMoments::new(p), VectorMoments::new(q));
            for i in 0..ens.len() {
                let l = Vector::from_column_slice(ens.lambda(i));
                lam.push(l.as_slice());
                u.push((Vector::from_column_slice(ens.u_delta(i)) - &l).as_slice());
                let mut zi = Vector::from_column_slice(ens.z_delta(i)) - &pred.j * &l;
                if flat_m {
                    zi -= Vector::from_column_slice(ens.z_delta(i)) - Vector::from_column_slice(ens.z_clean(i));
                }
                z.push(zi.as_slice());
            }
            let (cov, cov_se) = (lam.covariance(), lam.covariance_std_err());
            let lambda_cov_excess = (0..p * p)
                .map(|k| (cov[k] - pred.xi_delta()[k]).abs() - 3.0 * cov_se[k])
                .fold(f64::NEG_INFINITY, f64::max);
            Ok(ModelDiffusion {
                model: case.model.name().into(),
                n_paths: cfg.n_paths,
                lambda_cov_excess,
                xi_delta: matrix_rows(pred.xi_delta()),
                lambda_cov: matrix_rows(&cov),
                generator_gap: generator_gap(&geom, &base, cfg.generator_configs, derive_seed(cfg.seed, 1000 + ci as u64))?,
                ailp_state: MeanCheck::new(&pred.ailp_state, &u, allowance),
                ailp_obs: MeanCheck::new(&pred.ailp_obs, &z, allowance),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let lyapunov_gap = match lyapunov {
        Some(g) => g,
        None => {
            let spec = ModelSpec::default_for("flat-linear")?;
            let p = spec.dim();
            lyapunov_gap(&spec, cfg.gamma, &Vector::zeros(p), &(Matrix::identity(p, p) * g2), delta)?
        }
    };
    Ok(DiffusionReport { lyapunov_gap, models })
}
