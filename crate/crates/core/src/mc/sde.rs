//! Euler–Maruyama paths, the coupled first-variation process and ensembles
//! of `(U_δ, Z_δ)` samples.

use std::io::Write;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::rng::{fill_normal, stream_rng};
use super::stats::chunk_ranges;
use crate::diffusion::{integrate_flow, DiffusionModel, FlowBundle, InducedGeometry, ObservationMap};
use crate::error::{Error, Result};
use crate::filter::FilterBelief;
use crate::linalg::{psd_factor, Matrix, Vector};
use crate::manifold::{ensure_contains, Chart, GeodesicSolver, LogOptions};

pub const DEFAULT_SDE_STEPS: usize = 1024;

/// Fewest Euler steps per interval accepted by the oracle.
pub const MIN_SDE_STEPS: usize = 64;

/// Newton options for the per-path logarithms.
pub const PATH_LOG: LogOptions = LogOptions {
    steps: 8,
    tol: 1e-12,
    max_iter: 30,
};

fn default_sde_steps() -> usize {
    DEFAULT_SDE_STEPS
}

fn default_bandwidth_scale() -> f64 {
    1.0
}

/// Monte Carlo settings. The Euler step is `dt = δ / sde_steps`, so it
/// divides every horizon on the ladder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub n_paths: usize,
    #[serde(default = "default_sde_steps")]
    pub sde_steps: usize,
    pub seed: u64,
    #[serde(default)]
    pub gamma_ladder: Vec<f64>,
    #[serde(default = "default_bandwidth_scale")]
    pub bandwidth_scale: f64,
}

impl SimulationConfig {
    pub fn dt(&self, delta: f64) -> f64 {
        delta / self.sde_steps as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_paths == 0 {
            return Err(Error::Config("n_paths must be positive".into()));
        }
        if self.sde_steps < MIN_SDE_STEPS {
            return Err(Error::Config(format!(
                "sde_steps must be at least {MIN_SDE_STEPS}, got {}",
                self.sde_steps
            )));
        }
        if !(self.bandwidth_scale > 0.0 && self.bandwidth_scale.is_finite()) {
            return Err(Error::Config("bandwidth_scale must be positive".into()));
        }
        if let Some(g) = self.gamma_ladder.iter().find(|g| !(**g > 0.0 && g.is_finite())) {
            return Err(Error::Config(format!("ladder values must be positive, got {g}")));
        }
        Ok(())
    }
}

fn sde_loop(
    model: &dyn DiffusionModel,
    x_init: &Vector,
    delta: f64,
    steps: usize,
    mut noise: impl FnMut(usize, &mut [f64]),
) -> Result<Vector> {
    let p = model.dim();
    if x_init.len() != p {
        return Err(Error::Dimension {
            what: "initial state",
            expected: p,
            got: x_init.len(),
        });
    }
    if steps == 0 || !(delta >= 0.0 && delta.is_finite()) {
        return Err(Error::InvalidArgument(format!("bad discretization: delta {delta}, {steps} steps")));
    }
    if !model.contains(x_init.as_slice()) {
        return Err(Error::Domain {
            chart: model.name(),
            point: x_init.as_slice().to_vec(),
        });
    }
    let dt = delta / steps as f64;
    let sq = dt.sqrt() * model.gamma();
    let mut x = x_init.as_slice().to_vec();
    let mut b = vec![0.0; p];
    let mut s = vec![0.0; p * p];
    let mut dw = vec![0.0; p];
    for k in 0..steps {
        model.drift_into(&x, &mut b);
        model.sigma0_into(&x, &mut s);
        noise(k, &mut dw);
        for i in 0..p {
            let mut v = b[i] * dt;
            for j in 0..p {
                v += sq * s[i * p + j] * dw[j];
            }
            x[i] += v;
        }
        if !(x.iter().all(|v| v.is_finite()) && model.contains(&x)) {
            return Err(Error::DomainExit {
                chart: model.name(),
                step: k + 1,
            });
        }
    }
    Ok(Vector::from_vec(x))
}

/// Euler–Maruyama `X_{t+dt} = X_t + b dt + σ √dt N(0, I)` over `[0, δ]`.
pub fn simulate_sde(model: &dyn DiffusionModel, x_init: &Vector, delta: f64, steps: usize, rng: &mut ChaCha8Rng) -> Result<Vector> {
    sde_loop(model, x_init, delta, steps, |_, dw| fill_normal(rng, dw))
}

/// [`simulate_sde`], also writing the standard normal draws of every step
/// into `normals` (length `steps · p`).
pub fn simulate_sde_recording(
    model: &dyn DiffusionModel,
    x_init: &Vector,
    delta: f64,
    steps: usize,
    rng: &mut ChaCha8Rng,
    normals: &mut [f64],
) -> Result<Vector> {
    let p = model.dim();
    if normals.len() != steps * p {
        return Err(Error::Dimension {
            what: "increment buffer",
            expected: steps * p,
            got: normals.len(),
        });
    }
    sde_loop(model, x_init, delta, steps, |k, dw| {
        fill_normal(rng, dw);
        normals[k * p..(k + 1) * p].copy_from_slice(dw);
    })
}

/// `Λ_δ = τ_0^δ U_0 + Σ_k τ_{t_k}^δ σ(x_{t_k}) ΔW_k` along the flow grid.
#[derive(Clone, Debug)]
pub struct FirstVariation {
    dt: f64,
    tau0_delta: Matrix,
    kernels: Vec<Matrix>,
}

impl FirstVariation {
    pub fn new(bundle: &FlowBundle, geom: &InducedGeometry) -> Self {
        let steps = bundle.steps();
        let kernels = (0..steps)
            .map(|k| &bundle.tau_t_delta[k] * geom.sigma(bundle.x[k].as_slice()))
            .collect();
        Self {
            dt: bundle.delta / steps as f64,
            tau0_delta: bundle.tau0_delta().clone(),
            kernels,
        }
    }

    pub fn steps(&self) -> usize {
        self.kernels.len()
    }

    /// Exact covariance of the discretized `Λ_δ` when `Var(U_0) = sigma0`;
    /// it equals `Ξ_δ` up to the `O(dt)` quadrature error.
    pub fn covariance(&self, sigma0: &Matrix) -> Matrix {
        let mut c = &self.tau0_delta * sigma0 * self.tau0_delta.transpose();
        for m in &self.kernels {
            c += m * m.transpose() * self.dt;
        }
        c
    }

    /// `normals` are the standard normal draws behind `ΔW_k = √dt N_k`.
    pub fn apply(&self, u0: &[f64], normals: &[f64], out: &mut [f64]) {
        let p = self.tau0_delta.nrows();
        let sq = self.dt.sqrt();
        for i in 0..p {
            out[i] = (0..p).map(|j| self.tau0_delta[(i, j)] * u0[j]).sum();
        }
        for (k, m) in self.kernels.iter().enumerate() {
            let n = &normals[k * p..(k + 1) * p];
            for i in 0..p {
                let mut v = 0.0;
                for j in 0..p {
                    v += m[(i, j)] * n[j];
                }
                out[i] += sq * v;
            }
        }
    }
}

pub fn first_variation(fv: &FirstVariation, u0: &Vector, normals: &[f64]) -> Result<Vector> {
    let p = u0.len();
    if normals.len() != fv.steps() * p {
        return Err(Error::Dimension {
            what: "increment record",
            expected: fv.steps() * p,
            got: normals.len(),
        });
    }
    let mut out = Vector::zeros(p);
    fv.apply(u0.as_slice(), normals, out.as_mut_slice());
    Ok(out)
}

fn exp_point(solver: &mut GeodesicSolver, y: &Vector, v: &Vector, steps: usize) -> Result<Vector> {
    let p = y.len();
    let mut b = Vector::zeros(p);
    let mut bp = Vector::zeros(p);
    solver.integrate(y.as_slice(), v.as_slice(), 1.0, steps, b.as_mut_slice(), bp.as_mut_slice())?;
    Ok(b)
}

/// Draws `U_0 ~ N(0, Σ_0)` and returns `(exp_{x_0}(U_0), U_0)`.
pub fn sample_initial(chart: &dyn Chart, belief: &FilterBelief, rng: &mut ChaCha8Rng) -> Result<(Vector, Vector)> {
    let l = psd_factor(&belief.sigma0)?;
    let mut z = Vector::zeros(belief.dim());
    fill_normal(rng, z.as_mut_slice());
    let u0 = l * z;
    if u0.iter().all(|v| *v == 0.0) {
        return Ok((belief.base.clone(), u0));
    }
    let x0 = exp_point(&mut GeodesicSolver::new(chart), &belief.base, &u0, LogOptions::default().steps)?;
    Ok((x0, u0))
}

/// `Y_1 = exp_{ψ(x)}(V_1)` with `V_1 ~ N(0, β(ψ(x)))`.
pub fn sample_observation(obs: &ObservationMap, x_end: &Vector, rng: &mut ChaCha8Rng) -> Result<Vector> {
    let y = obs.psi(x_end.as_slice());
    let chart = obs.chart_m().as_ref();
    ensure_contains(chart, y.as_slice())?;
    let l = psd_factor(&obs.beta(y.as_slice()))?;
    let mut z = Vector::zeros(obs.q());
    fill_normal(rng, z.as_mut_slice());
    let v = l * z;
    if v.iter().all(|x| *x == 0.0) {
        return Ok(y);
    }
    exp_point(&mut GeodesicSolver::new(chart), &y, &v, LogOptions::default().steps)
}

/// One simulated realization.
#[derive(Clone, Debug, PartialEq)]
pub struct PathSample {
    pub u0: Vector,
    pub x_delta: Vector,
    /// `exp⁻¹_{x_δ}(X_δ)` at the deterministic flow endpoint.
    pub u_delta: Vector,
    /// `exp⁻¹_{ψ(x_δ)}(Y_1)`.
    pub z_delta: Vector,
    /// `exp⁻¹_{ψ(x_δ)}(ψ(X_δ))`, the noise-free part of the observation.
    pub z_clean: Vector,
    pub lambda_delta: Vector,
}

/// What to simulate: the diffusion from `belief` over `[0, δ]`, observed
/// through `obs` when given.
#[derive(Clone, Copy)]
pub struct EnsembleSetup<'a> {
    pub geom: &'a InducedGeometry,
    pub obs: Option<&'a ObservationMap>,
    pub belief: &'a FilterBelief,
    pub delta: f64,
    pub sde_steps: usize,
    pub log: LogOptions,
}

impl<'a> EnsembleSetup<'a> {
    pub fn new(geom: &'a InducedGeometry, obs: Option<&'a ObservationMap>, belief: &'a FilterBelief, delta: f64) -> Self {
        Self {
            geom,
            obs,
            belief,
            delta,
            sde_steps: DEFAULT_SDE_STEPS,
            log: PATH_LOG,
        }
    }

    pub fn with_steps(mut self, sde_steps: usize) -> Self {
        self.sde_steps = sde_steps;
        self
    }
}

/// Samples stored row-wise as `[U_0, X_δ, U_δ, Λ_δ, Z_δ, Z_clean]`.
#[derive(Clone, Debug)]
pub struct Ensemble {
    p: usize,
    q: usize,
    n: usize,
    data: Vec<f64>,
    pub flow: FlowBundle,
    pub psi_xdelta: Option<Vector>,
    pub seed: u64,
}

impl Ensemble {
    fn stride(&self) -> usize {
        4 * self.p + 2 * self.q
    }

    fn field(&self, i: usize, offset: usize, len: usize) -> &[f64] {
        let o = i * self.stride() + offset;
        &self.data[o..o + len]
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn u0(&self, i: usize) -> &[f64] {
        self.field(i, 0, self.p)
    }

    pub fn x_delta(&self, i: usize) -> &[f64] {
        self.field(i, self.p, self.p)
    }

    pub fn u_delta(&self, i: usize) -> &[f64] {
        self.field(i, 2 * self.p, self.p)
    }

    pub fn lambda(&self, i: usize) -> &[f64] {
        self.field(i, 3 * self.p, self.p)
    }

    pub fn z_delta(&self, i: usize) -> &[f64] {
        self.field(i, 4 * self.p, self.q)
    }

    pub fn z_clean(&self, i: usize) -> &[f64] {
        self.field(i, 4 * self.p + self.q, self.q)
    }

    pub fn sample(&self, i: usize) -> PathSample {
        let v = Vector::from_column_slice;
        PathSample {
            u0: v(self.u0(i)),
            x_delta: v(self.x_delta(i)),
            u_delta: v(self.u_delta(i)),
            z_delta: v(self.z_delta(i)),
            z_clean: v(self.z_clean(i)),
            lambda_delta: v(self.lambda(i)),
        }
    }

    /// CSV dump: `path`, then `u_delta_*`, `z_delta_*` and `lambda_*`
    /// components.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        let mut header = vec!["path".to_string()];
        header.extend((0..self.p).map(|i| format!("u_delta_{i}")));
        header.extend((0..self.q).map(|i| format!("z_delta_{i}")));
        header.extend((0..self.p).map(|i| format!("lambda_{i}")));
        writeln!(w, "{}", header.join(","))?;
        for i in 0..self.n {
            let mut line = i.to_string();
            for x in self.u_delta(i).iter().chain(self.z_delta(i)).chain(self.lambda(i)) {
                line.push(',');
                line.push_str(&format!("{x:e}"));
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

struct PathWorkspace<'a> {
    solver_n: GeodesicSolver<'a>,
    solver_m: Option<GeodesicSolver<'a>>,
    normals: Vec<f64>,
    z: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn simulate_path(
    setup: &EnsembleSetup,
    fv: &FirstVariation,
    l0: &Matrix,
    x_delta: &Vector,
    psi_xdelta: Option<&Vector>,
    seed: u64,
    i: usize,
    ws: &mut PathWorkspace,
    row: &mut [f64],
) -> Result<()> {
    let p = setup.geom.dim();
    let model = setup.geom.model().as_ref();
    let mut rng = stream_rng(seed, i as u64);
    fill_normal(&mut rng, &mut ws.z[..p]);
    let u0 = l0 * Vector::from_column_slice(&ws.z[..p]);
    let x0 = if u0.iter().all(|v| *v == 0.0) {
        setup.belief.base.clone()
    } else {
        exp_point(&mut ws.solver_n, &setup.belief.base, &u0, setup.log.steps)?
    };
    let xd = simulate_sde_recording(model, &x0, setup.delta, setup.sde_steps, &mut rng, &mut ws.normals)?;
    let ud = ws.solver_n.log(x_delta, &xd, &setup.log)?;
    row[..p].copy_from_slice(u0.as_slice());
    row[p..2 * p].copy_from_slice(xd.as_slice());
    row[2 * p..3 * p].copy_from_slice(ud.as_slice());
    fv.apply(u0.as_slice(), &ws.normals, &mut row[3 * p..4 * p]);
    if let (Some(obs), Some(base), Some(solver)) = (setup.obs, psi_xdelta, ws.solver_m.as_mut()) {
        let q = obs.q();
        let y = obs.psi(xd.as_slice());
        let lb = psd_factor(&obs.beta(y.as_slice()))?;
        fill_normal(&mut rng, &mut ws.z[..q]);
        let v1 = lb * Vector::from_column_slice(&ws.z[..q]);
        let y1 = exp_point(solver, &y, &v1, setup.log.steps)?;
        let zd = solver.log(base, &y1, &setup.log)?;
        let zc = solver.log(base, &y, &setup.log)?;
        row[4 * p..4 * p + q].copy_from_slice(zd.as_slice());
        row[4 * p + q..4 * p + 2 * q].copy_from_slice(zc.as_slice());
    }
    Ok(())
}

/// Simulates `n_paths` independent realizations; path `i` draws all its
/// randomness from stream `i` of `seed`, so the result does not depend on
/// the thread count.
pub fn simulate_ensemble(setup: &EnsembleSetup, n_paths: usize, seed: u64) -> Result<Ensemble> {
    let geom = setup.geom;
    let p = geom.dim();
    if setup.sde_steps < MIN_SDE_STEPS {
        return Err(Error::InvalidArgument(format!(
            "at least {MIN_SDE_STEPS} Euler steps per interval are required, got {}",
            setup.sde_steps
        )));
    }
    if setup.belief.dim() != p {
        return Err(Error::Dimension {
            what: "belief",
            expected: p,
            got: setup.belief.dim(),
        });
    }
    let flow = integrate_flow(geom, &setup.belief.base, &setup.belief.sigma0, setup.delta, setup.sde_steps)?;
    let fv = FirstVariation::new(&flow, geom);
    let l0 = psd_factor(&setup.belief.sigma0)?;
    let x_delta = flow.x_delta().clone();
    let psi_xdelta = match setup.obs {
        Some(obs) => {
            let y = obs.psi(x_delta.as_slice());
            ensure_contains(obs.chart_m().as_ref(), y.as_slice())?;
            Some(y)
        }
        None => None,
    };
    let q = setup.obs.map_or(0, |o| o.q());
    let stride = 4 * p + 2 * q;
    let chunks: Vec<Vec<f64>> = chunk_ranges(n_paths, 1024)
        .into_par_iter()
        .map(|range| -> Result<Vec<f64>> {
            let mut ws = PathWorkspace {
                solver_n: GeodesicSolver::new(geom),
                solver_m: setup.obs.map(|o| GeodesicSolver::new(o.chart_m().as_ref())),
                normals: vec![0.0; setup.sde_steps * p],
                z: vec![0.0; p.max(q)],
            };
            let mut out = vec![0.0; range.len() * stride];
            for (r, i) in range.enumerate() {
                simulate_path(setup, &fv, &l0, &x_delta, psi_xdelta.as_ref(), seed, i, &mut ws, &mut out[r * stride..(r + 1) * stride])
                    .map_err(|e| Error::Sample {
                        index: i,
                        source: Box::new(e),
                    })?;
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(Ensemble {
        p,
        q,
        n: n_paths,
        data: chunks.concat(),
        flow,
        psi_xdelta,
        seed,
    })
}
