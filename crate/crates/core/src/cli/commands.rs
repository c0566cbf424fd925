use std::fs;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::load_config;
use super::output::{fit_row, write_report, Check, Table};
use super::Command;
use crate::diffusion::{ModelSpec, ObservationSpec};
use crate::error::Result;
use crate::experiments::conditional::{check_conditional, ConditionalCheck};
use crate::experiments::diffusion::{check_diffusion, DiffusionCheck, DiffusionReport};
use crate::experiments::filter::{flat_reduction, run_scenario, update_study_with, FlatReduction, Scenario, ScenarioStep, UpdateReport, UpdateStudy};
use crate::experiments::geometry::{check_barycentre, check_geometry, check_jacobi, BarycentreCheck, GeometryCheck, JacobiCheck};
use crate::experiments::LadderPoint;
use crate::mc::OrderFit;

pub const EXP_SLOPE: (f64, f64) = (3.7, 4.3);
pub const EXP_R2: f64 = 0.99;
pub const ANTISYMMETRY_TOL: f64 = 1e-12;
pub const BIANCHI_TOL: f64 = 1e-9;
pub const SECTIONAL_TOL: f64 = 1e-6;
pub const ZERO_TOL: f64 = 1e-12;
pub const JACOBI_SLOPE: f64 = 3.7;
pub const ZETA3_SLOPE: f64 = 3.3;
pub const CORRECTED_SLOPE: f64 = 3.5;
pub const NAIVE_SLOPE: f64 = 3.3;
pub const CONTRACT_SLOPE: f64 = 3.5;
pub const FLAT_TOL: f64 = 1e-10;
pub const UPDATE_SLOPE: f64 = 3.5;
pub const EKF_GAP: f64 = 0.5;
pub const COV_ALLOWANCE: f64 = 10.0;
pub const HYGIENE_SLOPE: f64 = 3.3;
pub const LYAPUNOV_TOL: f64 = 1e-8;
pub const GENERATOR_TOL: f64 = 1e-8;

/// Config of `mc-compare`: the update study and, optionally, the diffusion
/// identities and AILP checks.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McCompare {
    #[serde(default)]
    pub update: UpdateStudy,
    #[serde(default)]
    pub diffusion: Option<DiffusionCheck>,
    /// Write every rung's simulated paths to `paths_<rung>.csv`.
    #[serde(default)]
    pub dump_paths: bool,
}

pub(super) fn run(cmd: Command, config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<Vec<Check>> {
    let name = cmd.name();
    match cmd {
        Command::CheckGeometry => {
            let mut cfg: GeometryCheck = load_config(config)?;
            cfg.seed = seed.unwrap_or(cfg.seed);
            let res = check_geometry(&cfg)?;
            fs::create_dir_all(out)?;
            let mut ladder = Table::new(&["chart", "t", "error"]);
            let mut slopes = Table::new(&["chart", "quantity", "slope", "slope_se", "r2"]);
            let mut checks = Vec::new();
            for c in &res {
                for p in &c.exp_errors {
                    ladder.row(&[&c.chart, &p.gamma, &p.error]);
                }
                fit_row(&mut slopes, &c.chart, "exp_taylor", &c.exp_fit);
                checks.extend(order_checks(&format!("{}.exp", c.chart), &c.exp_errors, &c.exp_fit, |n, f| {
                    vec![Check::within(format!("{n}_slope"), f.slope, EXP_SLOPE.0, EXP_SLOPE.1), Check::at_least(format!("{n}_r2"), f.r2, EXP_R2)]
                }));
                checks.push(Check::at_most(format!("{}.antisymmetry", c.chart), c.antisymmetry, ANTISYMMETRY_TOL));
                checks.push(Check::at_most(format!("{}.bianchi", c.chart), c.bianchi, BIANCHI_TOL));
                if let Some(k) = c.expected_curvature {
                    let gap = c.sectional.map_or(f64::NAN, |(lo, hi)| (lo - k).abs().max((hi - k).abs()));
                    checks.push(Check::at_most(format!("{}.sectional", c.chart), gap, SECTIONAL_TOL));
                }
            }
            ladder.write(out, "exp_ladder.csv")?;
            slopes.write(out, "slope_table.csv")?;
            write_report(out, name, Some(cfg.seed), &cfg, &res, &checks)?;
            Ok(checks)
        }
        Command::CheckJacobi => {
            let mut cfg: JacobiCheck = load_config(config)?;
            cfg.seed = seed.unwrap_or(cfg.seed);
            let res = check_jacobi(&cfg)?;
            fs::create_dir_all(out)?;
            let mut ladder = Table::new(&["chart", "quantity", "gamma", "error", "std_err"]);
            let mut slopes = Table::new(&["chart", "quantity", "slope", "slope_se", "r2"]);
            let mut checks = Vec::new();
            for c in &res {
                let series = [
                    ("endpoint", &c.endpoint, &c.endpoint_fit, JACOBI_SLOPE),
                    ("zeta1", &c.zeta[0], &c.zeta_fit[0], JACOBI_SLOPE),
                    ("zeta2", &c.zeta[1], &c.zeta_fit[1], JACOBI_SLOPE),
                    ("zeta3", &c.zeta[2], &c.zeta_fit[2], ZETA3_SLOPE),
                ];
                for (q, pts, fit, bound) in series {
                    for p in pts {
                        ladder.row(&[&c.chart, &q, &p.gamma, &p.error, &p.std_err]);
                    }
                    fit_row(&mut slopes, &c.chart, q, fit);
                    checks.extend(order_checks(&format!("{}.{q}", c.chart), pts, fit, |n, f| {
                        vec![Check::at_least(format!("{n}_slope"), f.slope, bound)]
                    }));
                }
            }
            ladder.write(out, "jacobi_ladder.csv")?;
            slopes.write(out, "slope_table.csv")?;
            write_report(out, name, Some(cfg.seed), &cfg, &res, &checks)?;
            Ok(checks)
        }
        Command::CheckBarycentre => {
            let mut cfg: BarycentreCheck = load_config(config)?;
            cfg.seed = seed.unwrap_or(cfg.seed);
            let res = check_barycentre(&cfg)?;
            fs::create_dir_all(out)?;
            let p = res.rungs.first().map_or(0, |r| r.corrected_point.len());
            let mut cols = vec!["gamma".to_string(), "corrected".into(), "corrected_se".into(), "naive".into(), "naive_se".into()];
            cols.extend((0..p).map(|i| format!("corrected_point_{i}")));
            cols.extend((0..p).map(|i| format!("naive_point_{i}")));
            let mut ladder = Table::new(&cols.iter().map(String::as_str).collect::<Vec<_>>());
            for r in &res.rungs {
                let mut cells: Vec<&dyn std::fmt::Display> = vec![&r.gamma, &r.corrected.error, &r.corrected.std_err, &r.naive.error, &r.naive.std_err];
                cells.extend(r.corrected_point.iter().map(|x| x as &dyn std::fmt::Display));
                cells.extend(r.naive_point.iter().map(|x| x as &dyn std::fmt::Display));
                ladder.row(&cells);
            }
            let mut slopes = Table::new(&["chart", "quantity", "slope", "slope_se", "r2"]);
            fit_row(&mut slopes, &res.chart, "corrected", &res.corrected_fit);
            fit_row(&mut slopes, &res.chart, "naive", &res.naive_fit);
            let checks = vec![
                Check::slope_at_least("corrected_slope", &res.corrected_fit, CORRECTED_SLOPE),
                Check::slope_at_most("naive_slope", &res.naive_fit, NAIVE_SLOPE),
                Check::flag("intervals_separated", res.separated),
            ];
            ladder.write(out, "barycentre_ladder.csv")?;
            slopes.write(out, "slope_table.csv")?;
            write_report(out, name, Some(cfg.seed), &cfg, &res, &checks)?;
            Ok(checks)
        }
        Command::CheckConditional => {
            let mut cfg: ConditionalCheck = load_config(config)?;
            cfg.seed = seed.unwrap_or(cfg.seed);
            let res = check_conditional(&cfg)?;
            fs::create_dir_all(out)?;
            let mut ladder = Table::new(&["function", "gamma", "mean", "mean_se", "variance", "variance_se"]);
            let mut shells = Table::new(&["gamma", "lo", "hi", "count", "second_moment", "std_err", "predicted", "excess"]);
            let mut slopes = Table::new(&["function", "quantity", "slope", "slope_se", "r2"]);
            for r in &res.rungs {
                for (k, f) in res.functions.iter().enumerate() {
                    let (m, v) = (&r.mean[k], &r.variance[k]);
                    ladder.row(&[f, &r.gamma, &m.error, &m.std_err, &v.error, &v.std_err]);
                }
                for s in &r.shells {
                    let sh = &s.shell;
                    shells.row(&[&r.gamma, &sh.lo, &sh.hi, &sh.count, &sh.second_moment[0], &sh.std_err[0], &s.predicted, &s.excess]);
                }
            }
            let mut checks = Vec::new();
            for (k, f) in res.functions.iter().enumerate() {
                fit_row(&mut slopes, f, "mean", &res.mean_fits[k]);
                fit_row(&mut slopes, f, "variance", &res.variance_fits[k]);
                checks.push(Check::slope_at_least(format!("{f}.mean_slope"), &res.mean_fits[k], CONTRACT_SLOPE));
            }
            checks.push(Check::at_most("shell_variance_excess", res.shell_excess, 0.0));
            ladder.write(out, "contract_ladder.csv")?;
            shells.write(out, "shells.csv")?;
            slopes.write(out, "slope_table.csv")?;
            write_report(out, name, Some(cfg.seed), &cfg, &res, &checks)?;
            Ok(checks)
        }
        Command::RunFilter => {
            let mut cfg: Scenario = load_config(config)?;
            cfg.seed = seed.unwrap_or(cfg.seed);
            let steps = run_scenario(&cfg)?;
            let flat = if is_flat_linear(&cfg) { Some(flat_reduction(&cfg)?) } else { None };
            fs::create_dir_all(out)?;
            trajectory(&steps).write(out, "trajectory.csv")?;
            let mut checks = vec![Check::flag(
                "finite_estimates",
                steps.iter().all(|s| s.filter_error.is_finite() && s.ekf_error.is_finite()),
            )];
            if let Some(f) = &flat {
                checks.push(Check::at_most("filter_vs_kalman", f.filter_vs_kalman, FLAT_TOL));
                checks.push(Check::at_most("ekf_vs_kalman", f.ekf_vs_kalman, FLAT_TOL));
            }
            #[derive(Serialize)]
            struct Results<'a> {
                steps: &'a [ScenarioStep],
                flat_reduction: &'a Option<FlatReduction>,
            }
            let res = Results {
                steps: &steps,
                flat_reduction: &flat,
            };
            write_report(out, name, Some(cfg.seed), &cfg, &res, &checks)?;
            Ok(checks)
        }
        Command::McCompare => {
            let mut cfg: McCompare = load_config(config)?;
            if let Some(s) = seed {
                cfg.update.seed = s;
                if let Some(d) = cfg.diffusion.as_mut() {
                    d.seed = s;
                }
            }
            fs::create_dir_all(out)?;
            let update = update_study_with(&cfg.update, |r, ens| {
                if cfg.dump_paths {
                    let f = fs::File::create(out.join(format!("paths_{r}.csv")))?;
                    ens.write_csv(BufWriter::new(f))?;
                }
                Ok(())
            })?;
            let diffusion = cfg.diffusion.as_ref().map(check_diffusion).transpose()?;
            let mut checks = update_checks(&update);
            update_tables(&update, out)?;
            if let Some(d) = &diffusion {
                checks.extend(diffusion_checks(d));
                diffusion_table(d).write(out, "diffusion.csv")?;
            }
            #[derive(Serialize)]
            struct Results<'a> {
                update: &'a UpdateReport,
                diffusion: &'a Option<DiffusionReport>,
            }
            let res = Results {
                update: &update,
                diffusion: &diffusion,
            };
            write_report(out, name, Some(cfg.update.seed), &cfg, &res, &checks)?;
            Ok(checks)
        }
    }
}

/// Slope checks when the ladder has a fit; a ladder of exact zeros (flat
/// charts) passes when every error is below [`ZERO_TOL`].
fn order_checks(name: &str, pts: &[LadderPoint], fit: &Option<OrderFit>, slope: impl Fn(&str, &OrderFit) -> Vec<Check>) -> Vec<Check> {
    match fit {
        Some(f) => slope(name, f),
        None => {
            let worst = pts.iter().map(|p| p.error.abs()).fold(0.0, f64::max);
            vec![Check::at_most(format!("{name}_max_error"), worst, ZERO_TOL)]
        }
    }
}

fn is_flat_linear(sc: &Scenario) -> bool {
    matches!(sc.model, ModelSpec::FlatLinear { .. }) && !matches!(sc.observation, ObservationSpec::Quadratic { .. })
}

fn trajectory(steps: &[ScenarioStep]) -> Table {
    let p = steps.first().map_or(0, |s| s.truth.len());
    let q = steps.first().map_or(0, |s| s.observation.len());
    let mut cols = vec!["step".to_string(), "time".into()];
    for (prefix, n) in [("truth", p), ("observation", q), ("filter_mean", p), ("ekf_mean", p)] {
        cols.extend((0..n).map(|i| format!("{prefix}_{i}")));
    }
    cols.extend(["filter_error".into(), "ekf_error".into()]);
    let mut t = Table::new(&cols.iter().map(String::as_str).collect::<Vec<_>>());
    for s in steps {
        let mut cells: Vec<&dyn std::fmt::Display> = vec![&s.step, &s.time];
        for xs in [&s.truth, &s.observation, &s.x0_prime, &s.ekf_mean] {
            cells.extend(xs.iter().map(|x| x as &dyn std::fmt::Display));
        }
        cells.extend([&s.filter_error as &dyn std::fmt::Display, &s.ekf_error]);
        t.row(&cells);
    }
    t
}

pub(crate) fn update_checks(r: &UpdateReport) -> Vec<Check> {
    let slope = |f: &Option<OrderFit>| f.as_ref().map_or(f64::NAN, |f| f.slope);
    let mut checks = vec![
        Check::slope_at_least("filter_mean_slope", &r.filter_fit, UPDATE_SLOPE),
        Check::at_least("ekf_slope_gap", slope(&r.filter_fit) - slope(&r.ekf_fit), EKF_GAP),
    ];
    for rung in &r.rungs {
        let allowance = COV_ALLOWANCE * rung.gamma.powi(4);
        checks.push(Check::at_most(format!("covariance_excess@{}", rung.gamma), rung.cov_excess, allowance));
    }
    checks.push(Check::slope_at_least("recentred_mean_slope", &r.recentred_fit, HYGIENE_SLOPE));
    checks.push(Check::slope_at_least("third_moment_slope", &r.third_fit, HYGIENE_SLOPE));
    checks
}

fn update_tables(r: &UpdateReport, out: &Path) -> Result<()> {
    let mut ladder = Table::new(&[
        "gamma",
        "n_paths",
        "ess",
        "filter_error",
        "filter_error_se",
        "ekf_error",
        "ekf_error_se",
        "cov_excess",
        "recentred_norm",
        "recentred_se",
        "third_norm",
        "third_se",
    ]);
    for g in &r.rungs {
        ladder.row(&[
            &g.gamma,
            &g.n_paths,
            &g.ess,
            &g.filter_error,
            &g.filter_error_se,
            &g.ekf_error,
            &g.ekf_error_se,
            &g.cov_excess,
            &g.recentred_norm,
            &g.recentred_se,
            &g.third_norm,
            &g.third_se,
        ]);
    }
    let mut slopes = Table::new(&["estimator", "quantity", "slope", "slope_se", "r2"]);
    fit_row(&mut slopes, "intrinsic", "mean_error", &r.filter_fit);
    fit_row(&mut slopes, "ekf", "mean_error", &r.ekf_fit);
    fit_row(&mut slopes, "intrinsic", "recentred_mean", &r.recentred_fit);
    fit_row(&mut slopes, "intrinsic", "third_moment", &r.third_fit);
    ladder.write(out, "update_ladder.csv")?;
    slopes.write(out, "slope_table.csv")
}

pub(crate) fn diffusion_checks(d: &DiffusionReport) -> Vec<Check> {
    let mut checks = vec![Check::at_most("lyapunov_gap", d.lyapunov_gap, LYAPUNOV_TOL)];
    for m in &d.models {
        checks.push(Check::at_most(format!("{}.lambda_cov_excess", m.model), m.lambda_cov_excess, 0.0));
        checks.push(Check::at_most(format!("{}.generator_gap", m.model), m.generator_gap, GENERATOR_TOL));
        checks.push(Check::at_most(format!("{}.ailp_state_excess", m.model), m.ailp_state.excess, 0.0));
        checks.push(Check::at_most(format!("{}.ailp_obs_excess", m.model), m.ailp_obs.excess, 0.0));
    }
    checks
}

fn diffusion_table(d: &DiffusionReport) -> Table {
    let mut t = Table::new(&["model", "quantity", "value"]);
    t.row(&[&"flat-linear", &"lyapunov_gap", &d.lyapunov_gap]);
    for m in &d.models {
        t.row(&[&m.model, &"lambda_cov_excess", &m.lambda_cov_excess]);
        t.row(&[&m.model, &"generator_gap", &m.generator_gap]);
        t.row(&[&m.model, &"ailp_state_excess", &m.ailp_state.excess]);
        t.row(&[&m.model, &"ailp_obs_excess", &m.ailp_obs.excess]);
    }
    t
}
