//! Convergence-order and oracle experiments shared by the command-line
//! driver and the acceptance suite.

pub mod conditional;
pub mod diffusion;
pub mod filter;
pub mod geometry;

use serde::Serialize;

use crate::error::Result;
use crate::linalg::{Matrix, Vector};
use crate::mc::{order_fit, order_fit_weighted, OrderFit};

/// One rung of a ladder: a measured error with its Monte Carlo standard
/// error (zero for deterministic measurements).
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LadderPoint {
    pub gamma: f64,
    pub error: f64,
    pub std_err: f64,
}

/// Log-log slope of a ladder; weighted by the error bars when any are
/// nonzero, `None` when some error is not positive.
pub fn ladder_fit(points: &[LadderPoint]) -> Result<Option<OrderFit>> {
    if points.iter().any(|p| !(p.error > 0.0)) {
        return Ok(None);
    }
    let g: Vec<f64> = points.iter().map(|p| p.gamma).collect();
    let e: Vec<f64> = points.iter().map(|p| p.error).collect();
    if points.iter().all(|p| p.std_err == 0.0) {
        return order_fit(&g, &e).map(Some);
    }
    let s: Vec<f64> = points.iter().map(|p| p.std_err).collect();
    order_fit_weighted(&g, &e, &s).map(Some)
}

/// `‖m‖_g` and its delta-method standard error given the covariance of the
/// estimate `m`.
pub fn norm_with_se(m: &Vector, cov: &Matrix, g: &Matrix) -> (f64, f64) {
    let n = m.dot(&(g * m)).max(0.0).sqrt();
    if n == 0.0 {
        let se = (0..m.len()).map(|i| (cov[(i, i)] * g[(i, i)]).max(0.0).sqrt()).fold(0.0, f64::max);
        return (0.0, se);
    }
    let grad = g * m / n;
    (n, grad.dot(&(cov * &grad)).max(0.0).sqrt())
}

pub(crate) fn rows_to_matrix(rows: &[Vec<f64>], what: &'static str) -> Result<Matrix> {
    crate::diffusion::matrix_from_rows(rows, what)
}
