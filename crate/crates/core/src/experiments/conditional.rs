//! Weak-approximation and variance checks for the quadratic-Gaussian
//! conditional mean.

use serde::{Deserialize, Serialize};

use super::{ladder_fit, LadderPoint};
use crate::error::{Error, Result};
use crate::gaussian_cond::{approx_conditional_var, shell_variances, weak_contract, JointSampler, QuadraticGaussianModel, TestFunction, VarianceShell};
use crate::linalg::{Bilinear, Matrix, Vector};
use crate::mc::rng::derive_seed;
use crate::mc::{OrderFit, SamplingScheme};

fn default_gammas() -> Vec<f64> {
    vec![0.2, 0.1, 0.05]
}

fn one() -> f64 {
    1.0
}

fn ten_million() -> usize {
    10_000_000
}

fn default_edges() -> Vec<f64> {
    vec![0.0, 0.5, 1.0, 1.5, 2.0]
}

fn ten() -> f64 {
    10.0
}

fn moment_matched() -> SamplingScheme {
    SamplingScheme::MomentMatched
}

/// The scalar model with `Z = U`, `Var U = Var V = γ²`, `Cov(V, U) = γ²/2`,
/// `X = U + λU²` and `Y = V + θU²`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionalCheck {
    #[serde(default = "default_gammas")]
    pub gammas: Vec<f64>,
    #[serde(default = "one")]
    pub lambda: f64,
    #[serde(default = "one")]
    pub theta: f64,
    #[serde(default = "ten_million")]
    pub n_samples: usize,
    #[serde(default = "moment_matched")]
    pub scheme: SamplingScheme,
    /// Shell edges in units of `sd(Ŷ)`.
    #[serde(default = "default_edges")]
    pub shell_edges: Vec<f64>,
    /// Variance allowance `allowance·γ⁴` on top of three standard errors.
    #[serde(default = "ten")]
    pub allowance: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ConditionalCheck {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

pub fn scalar_model(gamma: f64, lambda: f64, theta: f64) -> Result<QuadraticGaussianModel> {
    let g2 = gamma * gamma;
    let m = |x: f64| Matrix::from_element(1, 1, x);
    QuadraticGaussianModel::new(
        m(g2),
        m(g2 / 2.0),
        m(g2),
        m(g2 / 2.0),
        m(g2),
        Vector::zeros(1),
        Vector::zeros(1),
        Bilinear::from_flat(1, 1, vec![lambda])?,
        Bilinear::from_flat(1, 1, vec![theta])?,
    )
}

#[derive(Clone, Debug, Serialize)]
pub struct ShellCheck {
    #[serde(flatten)]
    pub shell: VarianceShell,
    pub predicted: f64,
    /// `|second moment − predicted| − 3·se − allowance·γ⁴`; passes when `≤ 0`.
    pub excess: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ConditionalRung {
    pub gamma: f64,
    /// `‖E[h(Ŷ)(W − X)]‖` per test function, in battery order.
    pub mean: Vec<LadderPoint>,
    /// `‖E[h(Ŷ)((W − X)² − V̂)]‖` per test function.
    pub variance: Vec<LadderPoint>,
    pub shells: Vec<ShellCheck>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ConditionalReport {
    pub functions: Vec<&'static str>,
    pub rungs: Vec<ConditionalRung>,
    pub mean_fits: Vec<Option<OrderFit>>,
    pub variance_fits: Vec<Option<OrderFit>>,
    /// Largest shell excess over all rungs.
    pub shell_excess: f64,
}

pub fn check_conditional(cfg: &ConditionalCheck) -> Result<ConditionalReport> {
    if cfg.gammas.len() < 3 {
        return Err(Error::Config(format!("the ladder needs at least 3 rungs, got {}", cfg.gammas.len())));
    }
    let battery = TestFunction::BATTERY;
    let rungs = cfg
        .gammas
        .iter()
        .enumerate()
        .map(|(r, &g)| {
            let model = scalar_model(g, cfg.lambda, cfg.theta)?;
            let sampler = JointSampler::z_equals_u(&model, cfg.n_samples, derive_seed(cfg.seed, r as u64), cfg.scheme)?;
            let contract = weak_contract(&model, &sampler, &battery)?;
            let point = |norm: f64, std_err: f64| LadderPoint { gamma: g, error: norm, std_err };
            let predicted = approx_conditional_var(&model)?[(0, 0)];
            let shells = shell_variances(&model, &sampler, &cfg.shell_edges)?
                .into_iter()
                .map(|shell| {
                    let excess = (shell.second_moment[0] - predicted).abs() - 3.0 * shell.std_err[0] - cfg.allowance * g.powi(4);
                    ShellCheck { shell, predicted, excess }
                })
                .collect();
            Ok(ConditionalRung {
                gamma: g,
                mean: contract.mean.iter().map(|e| point(e.norm, e.norm_std_err)).collect(),
                variance: contract.variance.iter().map(|e| point(e.norm, e.norm_std_err)).collect(),
                shells,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let fits = |pick: &dyn Fn(&ConditionalRung) -> &Vec<LadderPoint>| {
        (0..battery.len())
            .map(|k| ladder_fit(&rungs.iter().map(|r| pick(r)[k]).collect::<Vec<_>>()))
            .collect::<Result<Vec<_>>>()
    };
    Ok(ConditionalReport {
        functions: battery.iter().map(|h| h.name()).collect(),
        mean_fits: fits(&|r| &r.mean)?,
        variance_fits: fits(&|r| &r.variance)?,
        shell_excess: rungs
            .iter()
            .flat_map(|r| r.shells.iter().map(|s| s.excess))
            .fold(f64::NEG_INFINITY, f64::max),
        rungs,
    })
}
