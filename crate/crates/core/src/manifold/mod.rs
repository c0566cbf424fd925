//! Chart-based differential geometry: connectors, curvature, exponential and
//! logarithm expansions, and integrated geodesic and transport oracles.

mod charts;
mod ops;

pub use charts::{
    builtin_chart, ConformalChart, FlatChart, LinearChart, MetricChart, SpherePolarChart, WarpedR2Chart,
    BUILTIN_CHARTS,
};
pub use ops::{
    covariant_derivative, curvature, exp_geodesic, exp_taylor, geodesic_integrate, inner, log_numeric, log_taylor,
    norm, parallel_transport_integrate, sectional_curvature, transport_along_geodesic, CurvatureAt, GeodesicSolver,
    LogOptions,
};

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::{Bilinear, Matrix, Vector};

/// Largest chart dimension supported by the stack-buffered kernels.
pub const MAX_DIM: usize = 8;

/// Numeric chart parameters keyed by name (shared with the CLI config).
pub type ChartParams = BTreeMap<String, f64>;

/// A single-chart description of a manifold with a torsion-free connection.
///
/// Connector coefficients use the layout `[k][i][j]` for `Γ^k_ij`, and the
/// connector derivative the layout `[l][k][i][j]` for `∂_l Γ^k_ij`.
pub trait Chart: Send + Sync {
    fn dim(&self) -> usize;

    fn name(&self) -> String;

    /// Domain guard.
    fn contains(&self, x: &[f64]) -> bool;

    /// Riemannian metric, when the chart carries one.
    fn metric(&self, x: &[f64]) -> Option<Matrix> {
        let _ = x;
        None
    }

    fn christoffel_into(&self, x: &[f64], out: &mut [f64]);

    /// Defaults to central differences of [`Chart::christoffel_into`] with
    /// step `1e-5 * max(1, |x|)`.
    fn dchristoffel_into(&self, x: &[f64], out: &mut [f64]) {
        fd_dchristoffel(&|y: &[f64], o: &mut [f64]| self.christoffel_into(y, o), self.dim(), x, 1e-5, out);
    }

    /// Whether [`Chart::dchristoffel_into`] is exact rather than synthesized.
    fn analytic_derivative(&self) -> bool {
        false
    }

    /// Whether the connector vanishes identically, so that geodesics are
    /// straight coordinate lines.
    fn is_flat(&self) -> bool {
        false
    }
}

pub type ChartRef = Arc<dyn Chart>;

/// Central-difference connector derivative with relative step `rel_h`.
pub fn fd_dchristoffel(gamma: &dyn Fn(&[f64], &mut [f64]), p: usize, x: &[f64], rel_h: f64, out: &mut [f64]) {
    let p3 = p * p * p;
    let h = rel_h * x.iter().map(|v| v * v).sum::<f64>().sqrt().max(1.0);
    let mut xp = x.to_vec();
    let mut gp = vec![0.0; p3];
    let mut gm = vec![0.0; p3];
    for l in 0..p {
        xp[l] = x[l] + h;
        gamma(&xp, &mut gp);
        xp[l] = x[l] - h;
        gamma(&xp, &mut gm);
        xp[l] = x[l];
        for m in 0..p3 {
            out[l * p3 + m] = (gp[m] - gm[m]) / (2.0 * h);
        }
    }
}

pub fn ensure_contains(chart: &dyn Chart, x: &[f64]) -> Result<()> {
    if x.len() != chart.dim() {
        return Err(Error::Dimension {
            what: "chart point",
            expected: chart.dim(),
            got: x.len(),
        });
    }
    if !chart.contains(x) {
        return Err(Error::Domain {
            chart: chart.name(),
            point: x.to_vec(),
        });
    }
    Ok(())
}

/// The connector `Γ(x)` as a bilinear map.
pub fn connector(chart: &dyn Chart, x: &Vector) -> Result<Bilinear> {
    ensure_contains(chart, x.as_slice())?;
    let p = chart.dim();
    let mut data = vec![0.0; p * p * p];
    chart.christoffel_into(x.as_slice(), &mut data);
    Bilinear::from_flat(p, p, data)
}

/// Directional derivative `DΓ(x)(v)` as a bilinear map.
pub fn connector_derivative(chart: &dyn Chart, x: &Vector, v: &Vector) -> Result<Bilinear> {
    ensure_contains(chart, x.as_slice())?;
    let p = chart.dim();
    let p3 = p * p * p;
    let mut d = vec![0.0; p * p3];
    chart.dchristoffel_into(x.as_slice(), &mut d);
    let mut data = vec![0.0; p3];
    for l in 0..p {
        let vl = v[l];
        for m in 0..p3 {
            data[m] += vl * d[l * p3 + m];
        }
    }
    Bilinear::from_flat(p, p, data)
}

/// Metric at `x`, or an error for connection-only charts.
pub fn metric_at(chart: &dyn Chart, x: &Vector) -> Result<Matrix> {
    ensure_contains(chart, x.as_slice())?;
    chart
        .metric(x.as_slice())
        .ok_or_else(|| Error::Unsupported(format!("chart `{}` has no metric", chart.name())))
}
