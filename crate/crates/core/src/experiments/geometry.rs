//! Exponential-map, curvature, ζ-derivative and barycentre studies.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ladder_fit, norm_with_se, rows_to_matrix, LadderPoint};
use crate::barycentre::{exp_barycentre, TangentMoments};
use crate::error::{Error, Result};
use crate::jacobi::{jacobi_integrate, lemma22_endpoint, zeta_derivatives, zeta_finite_differences, CurveJet, FieldJet3, JetCurve, VariationJet};
use crate::linalg::{Matrix, Vector};
use crate::manifold::{
    builtin_chart, curvature, exp_taylor, geodesic_integrate, metric_at, sectional_curvature, Chart, ChartParams, ChartRef, GeodesicSolver,
    LogOptions,
};
use crate::mc::rng::{derive_seed, stream_rng};
use crate::mc::stats::chunk_ranges;
use crate::mc::{gaussian_vectors, OrderFit, SamplingScheme};

/// Multiplier on the slope standard error when comparing slope intervals.
pub const SLOPE_INTERVAL_Z: f64 = 2.0;

/// A builtin chart with a base point and a direction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChartCase {
    pub chart: String,
    #[serde(default)]
    pub params: ChartParams,
    pub base: Vec<f64>,
    #[serde(default)]
    pub velocity: Vec<f64>,
    /// Constant sectional curvature the chart should report, when known.
    #[serde(default)]
    pub curvature: Option<f64>,
}

impl ChartCase {
    fn build(&self) -> Result<(ChartRef, Vector)> {
        let chart = builtin_chart(&self.chart, &self.params)?;
        if self.base.len() != chart.dim() {
            return Err(Error::Config(format!(
                "{}: base point has {} coordinates, chart has dimension {}",
                self.chart,
                self.base.len(),
                chart.dim()
            )));
        }
        if !chart.contains(&self.base) {
            return Err(Error::Config(format!("{}: base point {:?} is outside the chart", self.chart, self.base)));
        }
        Ok((chart, Vector::from_column_slice(&self.base)))
    }

    fn velocity(&self, dim: usize) -> Result<Vector> {
        if self.velocity.len() != dim {
            return Err(Error::Config(format!("{}: velocity needs {dim} components", self.chart)));
        }
        Ok(Vector::from_column_slice(&self.velocity))
    }
}

fn curved_cases() -> Vec<ChartCase> {
    vec![
        ChartCase {
            chart: "sphere-stereo".into(),
            params: ChartParams::new(),
            base: vec![0.3, -0.2],
            velocity: vec![0.8, 0.6],
            curvature: Some(1.0),
        },
        ChartCase {
            chart: "poincare-half-plane".into(),
            params: ChartParams::new(),
            base: vec![0.1, 1.2],
            velocity: vec![0.7, -0.5],
            curvature: Some(-1.0),
        },
    ]
}

fn default_ts() -> Vec<f64> {
    vec![0.2, 0.1, 0.05, 0.025]
}

fn default_gammas() -> Vec<f64> {
    vec![0.2, 0.1, 0.05]
}

fn reference_steps() -> usize {
    1024
}

fn hundred() -> usize {
    100
}

fn thousand() -> usize {
    1000
}

fn check_ladder(xs: &[f64]) -> Result<()> {
    if xs.len() < 3 {
        return Err(Error::Config(format!("the ladder needs at least 3 rungs, got {}", xs.len())));
    }
    if let Some(x) = xs.iter().find(|x| !(**x > 0.0 && x.is_finite())) {
        return Err(Error::Config(format!("ladder values must be positive, got {x}")));
    }
    Ok(())
}

fn random_point(chart: &dyn Chart, base: &Vector, rng: &mut impl Rng) -> Result<Vector> {
    for _ in 0..1000 {
        let x = base.map(|b| b + rng.random_range(-0.5..0.5));
        if chart.contains(x.as_slice()) {
            return Ok(x);
        }
    }
    Err(Error::Config(format!("no chart points found near {:?}", base.as_slice())))
}

fn random_vector(dim: usize, rng: &mut impl Rng) -> Vector {
    Vector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryCheck {
    #[serde(default = "curved_cases")]
    pub charts: Vec<ChartCase>,
    #[serde(default = "default_ts")]
    pub ts: Vec<f64>,
    /// RK4 steps of the reference geodesic.
    #[serde(default = "reference_steps")]
    pub reference_steps: usize,
    /// Random points and vectors for the curvature identities.
    #[serde(default = "hundred")]
    pub n_configs: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for GeometryCheck {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ChartGeometry {
    pub chart: String,
    pub flat: bool,
    pub analytic_derivative: bool,
    pub exp_errors: Vec<LadderPoint>,
    pub exp_fit: Option<OrderFit>,
    /// `max |R(u,v)w + R(v,u)w|`.
    pub antisymmetry: f64,
    /// `max |R(u,v)w + R(v,w)u + R(w,u)v|`.
    pub bianchi: f64,
    /// Range of sectional curvatures over the random configurations;
    /// `None` without a metric.
    pub sectional: Option<(f64, f64)>,
    pub expected_curvature: Option<f64>,
}

pub fn check_geometry(cfg: &GeometryCheck) -> Result<Vec<ChartGeometry>> {
    check_ladder(&cfg.ts)?;
    cfg.charts
        .iter()
        .enumerate()
        .map(|(ci, case)| {
            let (chart, base) = case.build()?;
            let c = chart.as_ref();
            let v = case.velocity(c.dim())?;
            let exp_errors = cfg
                .ts
                .iter()
                .map(|&t| {
                    let (b, _) = geodesic_integrate(c, &base, &v, t, cfg.reference_steps)?;
                    Ok(LadderPoint {
                        gamma: t,
                        error: (exp_taylor(c, &base, &v, t)? - b).norm(),
                        std_err: 0.0,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let mut rng = stream_rng(cfg.seed, ci as u64);
            let (mut antisymmetry, mut bianchi) = (0.0f64, 0.0f64);
            let mut sectional: Option<(f64, f64)> = None;
            let with_metric = c.metric(&case.base).is_some();
            for _ in 0..cfg.n_configs {
                let x = random_point(c, &base, &mut rng)?;
                let (u, v, w) = (random_vector(c.dim(), &mut rng), random_vector(c.dim(), &mut rng), random_vector(c.dim(), &mut rng));
                let a = curvature(c, &x, &u, &v, &w)?;
                antisymmetry = antisymmetry.max((&a + curvature(c, &x, &v, &u, &w)?).amax());
                let cyc = &a + curvature(c, &x, &v, &w, &u)? + curvature(c, &x, &w, &u, &v)?;
                bianchi = bianchi.max(cyc.amax());
                if with_metric && c.dim() >= 2 {
                    if let Ok(k) = sectional_curvature(c, &x, &u, &v) {
                        sectional = Some(sectional.map_or((k, k), |(lo, hi)| (lo.min(k), hi.max(k))));
                    }
                }
            }
            Ok(ChartGeometry {
                chart: c.name(),
                flat: c.is_flat(),
                analytic_derivative: c.analytic_derivative(),
                exp_fit: ladder_fit(&exp_errors)?,
                exp_errors,
                antisymmetry,
                bianchi,
                sectional,
                expected_curvature: case.curvature,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JacobiCheck {
    #[serde(default = "curved_cases")]
    pub charts: Vec<ChartCase>,
    #[serde(default = "default_gammas")]
    pub gammas: Vec<f64>,
    /// Random jets per rung for the ζ derivatives.
    #[serde(default = "thousand")]
    pub n_configs: usize,
    /// Random directions per rung for the Jacobi endpoint expansion.
    #[serde(default = "hundred")]
    pub n_fields: usize,
    /// Base spacing of the finite-difference stencils.
    #[serde(default = "default_eps0")]
    pub eps0: f64,
    #[serde(default = "default_exp_steps")]
    pub exp_steps: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_eps0() -> f64 {
    1e-2
}

fn default_exp_steps() -> usize {
    64
}

impl Default for JacobiCheck {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ChartJacobi {
    pub chart: String,
    /// Mean `|formula − integrated|` of the third-order Jacobi endpoint.
    pub endpoint: Vec<LadderPoint>,
    pub endpoint_fit: Option<OrderFit>,
    /// Mean `|formula − finite difference|` of `ζ′, ζ″, ζ‴`.
    pub zeta: [Vec<LadderPoint>; 3],
    pub zeta_fit: [Option<OrderFit>; 3],
}

fn mean_point(gamma: f64, xs: &[f64]) -> LadderPoint {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    LadderPoint {
        gamma,
        error: m,
        std_err: (var / n).sqrt(),
    }
}

fn unscaled_fit(points: &[LadderPoint]) -> Result<Option<OrderFit>> {
    let plain: Vec<LadderPoint> = points.iter().map(|p| LadderPoint { std_err: 0.0, ..*p }).collect();
    ladder_fit(&plain)
}

fn jet(dim: usize, g: f64, y: &Vector, rng: &mut impl Rng) -> (CurveJet, VariationJet) {
    let mut r = || random_vector(dim, rng) * g;
    (
        CurveJet {
            y: y.clone(),
            yp: r(),
            nabla_yp: r(),
            nabla2_yp: r(),
        },
        VariationJet {
            v0: r(),
            nv1: r(),
            nv2: r(),
            nv3: r(),
        },
    )
}

pub fn check_jacobi(cfg: &JacobiCheck) -> Result<Vec<ChartJacobi>> {
    check_ladder(&cfg.gammas)?;
    if !(cfg.eps0 > 0.0) || cfg.n_configs == 0 || cfg.n_fields == 0 {
        return Err(Error::Config("eps0, n_configs and n_fields must be positive".into()));
    }
    let log = LogOptions {
        steps: cfg.exp_steps,
        ..LogOptions::default()
    };
    cfg.charts
        .iter()
        .enumerate()
        .map(|(ci, case)| {
            let (chart, y) = case.build()?;
            let c = chart.as_ref();
            let p = c.dim();
            let mut endpoint = Vec::new();
            let mut zeta: [Vec<LadderPoint>; 3] = Default::default();
            for &g in &cfg.gammas {
                let ends = (0..cfg.n_fields)
                    .into_par_iter()
                    .map(|k| {
                        let mut rng = stream_rng(derive_seed(cfg.seed, 2 * ci as u64), k as u64);
                        let (v, j0, nj0) = (random_vector(p, &mut rng) * g, random_vector(p, &mut rng) * g, random_vector(p, &mut rng) * g);
                        let f = FieldJet3::jacobi(c, &y, &v, &j0, &nj0)?;
                        Ok((lemma22_endpoint(c, &y, &v, &f)? - jacobi_integrate(c, &y, &v, &j0, &nj0, 256)?).norm())
                    })
                    .collect::<Result<Vec<f64>>>()?;
                endpoint.push(mean_point(g, &ends));
                let errs = (0..cfg.n_configs)
                    .into_par_iter()
                    .map(|k| {
                        let mut rng = stream_rng(derive_seed(cfg.seed, 2 * ci as u64 + 1), k as u64);
                        let (curve, var) = jet(p, g, &y, &mut rng);
                        let (a1, a2, a3) = zeta_derivatives(c, &curve, &var)?;
                        let (f1, f2, f3) = zeta_finite_differences(c, &JetCurve::new(curve, var), cfg.eps0, cfg.exp_steps, &log)?;
                        Ok([(a1 - f1).norm(), (a2 - f2).norm(), (a3 - f3).norm()])
                    })
                    .collect::<Result<Vec<[f64; 3]>>>()?;
                for (d, z) in zeta.iter_mut().enumerate() {
                    let xs: Vec<f64> = errs.iter().map(|e| e[d]).collect();
                    z.push(mean_point(g, &xs));
                }
            }
            // the same configurations are reused on every rung, so the
            // per-rung error bars are not independent
            Ok(ChartJacobi {
                chart: c.name(),
                endpoint_fit: unscaled_fit(&endpoint)?,
                zeta_fit: [unscaled_fit(&zeta[0])?, unscaled_fit(&zeta[1])?, unscaled_fit(&zeta[2])?],
                endpoint,
                zeta,
            })
        })
        .collect()
}

fn polar_case() -> ChartCase {
    ChartCase {
        chart: "sphere-polar".into(),
        params: ChartParams::new(),
        base: vec![1.2, 0.3],
        velocity: vec![],
        curvature: None,
    }
}

fn default_mu() -> Vec<f64> {
    vec![1.0, 0.6]
}

fn default_sigma() -> Vec<Vec<f64>> {
    vec![vec![1.0, 0.3], vec![0.3, 0.8]]
}

fn million() -> usize {
    1_000_000
}

fn sixteen() -> usize {
    16
}

/// `η ~ N(γ·mu, γ²·sigma)` pushed through `exp_base`; the residual mean of
/// the samples is measured at the corrected barycentre and at `exp_base(μ)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BarycentreCheck {
    #[serde(default = "polar_case")]
    pub chart: ChartCase,
    #[serde(default = "default_mu")]
    pub mu: Vec<f64>,
    #[serde(default = "default_sigma")]
    pub sigma: Vec<Vec<f64>>,
    #[serde(default = "default_gammas")]
    pub gammas: Vec<f64>,
    /// Samples per rung; moment-matched antithetic pairs.
    #[serde(default = "million")]
    pub n_samples: usize,
    /// RK4 steps of every exponential map and logarithm.
    #[serde(default = "sixteen")]
    pub geodesic_steps: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for BarycentreCheck {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BarycentreRung {
    pub gamma: f64,
    pub corrected_point: Vec<f64>,
    pub naive_point: Vec<f64>,
    pub corrected: LadderPoint,
    pub naive: LadderPoint,
}

#[derive(Clone, Debug, Serialize)]
pub struct BarycentreReport {
    pub chart: String,
    pub rungs: Vec<BarycentreRung>,
    pub corrected_fit: Option<OrderFit>,
    pub naive_fit: Option<OrderFit>,
    /// Whether `slope ± z·se` of the two fits are disjoint.
    pub separated: bool,
}

/// Normal-equation sums for regressing per-pair means on `[1, ξ⊗ξ]`.
struct PairSums {
    xtx: Matrix,
    xty: Matrix,
    yty: Matrix,
    ysum: Vector,
    n: usize,
}

impl PairSums {
    fn new(k: usize, p: usize) -> Self {
        Self {
            xtx: Matrix::zeros(k, k),
            xty: Matrix::zeros(k, p),
            yty: Matrix::zeros(p, p),
            ysum: Vector::zeros(p),
            n: 0,
        }
    }

    fn push(&mut self, x: &Vector, y: &Vector) {
        self.xtx.ger(1.0, x, x, 1.0);
        self.xty.ger(1.0, x, y, 1.0);
        self.yty.ger(1.0, y, y, 1.0);
        self.ysum += y;
        self.n += 1;
    }

    fn merge(&mut self, o: &PairSums) {
        self.xtx += &o.xtx;
        self.xty += &o.xty;
        self.yty += &o.yty;
        self.ysum += &o.ysum;
        self.n += o.n;
    }

    /// Mean of `y` and the covariance of that mean from the regression
    /// residuals.
    fn mean_and_cov(&self) -> Result<(Vector, Matrix)> {
        let n = self.n as f64;
        let b = self
            .xtx
            .clone()
            .lu()
            .solve(&self.xty)
            .ok_or(Error::Singular {
                what: "pair regression",
                condition: f64::INFINITY,
            })?;
        let rss = &self.yty - b.transpose() * &self.xty;
        let dof = (self.n - self.xtx.nrows()).max(1) as f64;
        Ok((&self.ysum / n, crate::linalg::symmetrize(&(rss / (dof * n)))))
    }
}

fn quad_features(xi: &Vector) -> Vector {
    let p = xi.len();
    let mut f = Vec::with_capacity(1 + p * (p + 1) / 2);
    f.push(1.0);
    for a in 0..p {
        for b in a..p {
            f.push(xi[a] * xi[b]);
        }
    }
    Vector::from_vec(f)
}

pub fn check_barycentre(cfg: &BarycentreCheck) -> Result<BarycentreReport> {
    check_ladder(&cfg.gammas)?;
    let (chart, base) = cfg.chart.build()?;
    let c = chart.as_ref();
    let p = c.dim();
    let mu1 = Vector::from_column_slice(&cfg.mu);
    let sigma1 = rows_to_matrix(&cfg.sigma, "sigma")?;
    if mu1.len() != p || sigma1.shape() != (p, p) {
        return Err(Error::Config(format!("mu and sigma must match the chart dimension {p}")));
    }
    let log = LogOptions {
        steps: cfg.geodesic_steps,
        tol: 1e-13,
        max_iter: 50,
    };
    let k = 1 + p * (p + 1) / 2;
    let rungs = cfg
        .gammas
        .iter()
        .enumerate()
        .map(|(r, &g)| {
            let mu = &mu1 * g;
            let sigma = &sigma1 * (g * g);
            let m = TangentMoments::new(base.clone(), mu.clone(), sigma.clone())?;
            let z = exp_barycentre(c, &m)?;
            let mut solver = GeodesicSolver::new(c);
            let z0 = exp_point(&mut solver, &base, &mu, cfg.geodesic_steps)?;
            let etas = gaussian_vectors(&mu, &sigma, cfg.n_samples, derive_seed(cfg.seed, r as u64), SamplingScheme::MomentMatched)?;
            let parts = chunk_ranges(etas.len() / 2, 1024)
                .into_par_iter()
                .map(|range| {
                    let mut solver = GeodesicSolver::new(c);
                    let (mut sc, mut sn) = (PairSums::new(k, p), PairSums::new(k, p));
                    for pair in range {
                        let (mut yc, mut yn) = (Vector::zeros(p), Vector::zeros(p));
                        for i in [2 * pair, 2 * pair + 1] {
                            let x = exp_point(&mut solver, &base, &etas[i], cfg.geodesic_steps)?;
                            yc += solver.log(&z, &x, &log)? * 0.5;
                            yn += solver.log(&z0, &x, &log)? * 0.5;
                        }
                        let f = quad_features(&(&etas[2 * pair] - &mu));
                        sc.push(&f, &yc);
                        sn.push(&f, &yn);
                    }
                    Ok((sc, sn))
                })
                .collect::<Result<Vec<_>>>()?;
            let (mut sc, mut sn) = (PairSums::new(k, p), PairSums::new(k, p));
            for (a, b) in &parts {
                sc.merge(a);
                sn.merge(b);
            }
            let point = |s: &PairSums, at: &Vector| -> Result<LadderPoint> {
                let (mean, cov) = s.mean_and_cov()?;
                let (error, std_err) = norm_with_se(&mean, &cov, &metric_at(c, at)?);
                Ok(LadderPoint { gamma: g, error, std_err })
            };
            Ok(BarycentreRung {
                gamma: g,
                corrected: point(&sc, &z)?,
                naive: point(&sn, &z0)?,
                corrected_point: z.as_slice().to_vec(),
                naive_point: z0.as_slice().to_vec(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let corrected: Vec<LadderPoint> = rungs.iter().map(|r| r.corrected).collect();
    let naive: Vec<LadderPoint> = rungs.iter().map(|r| r.naive).collect();
    let corrected_fit = ladder_fit(&corrected)?;
    let naive_fit = ladder_fit(&naive)?;
    let separated = match (corrected_fit, naive_fit) {
        (Some(a), Some(b)) => a.slope - SLOPE_INTERVAL_Z * a.slope_se > b.slope + SLOPE_INTERVAL_Z * b.slope_se,
        _ => false,
    };
    Ok(BarycentreReport {
        chart: c.name(),
        rungs,
        corrected_fit,
        naive_fit,
        separated,
    })
}

fn exp_point(solver: &mut GeodesicSolver, y: &Vector, v: &Vector, steps: usize) -> Result<Vector> {
    let p = y.len();
    let (mut b, mut bp) = (Vector::zeros(p), Vector::zeros(p));
    solver.integrate(y.as_slice(), v.as_slice(), 1.0, steps, b.as_mut_slice(), bp.as_mut_slice())?;
    Ok(b)
}
