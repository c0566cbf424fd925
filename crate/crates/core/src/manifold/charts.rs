use std::sync::Arc;

use super::{fd_dchristoffel, Chart, ChartParams, ChartRef};
use crate::error::{Error, Result};
use crate::linalg::{spd_inverse, Matrix};

/// Names accepted by [`builtin_chart`].
pub const BUILTIN_CHARTS: &[&str] = &["flat", "sphere-stereo", "sphere-polar", "poincare-half-plane", "warped-r2"];

/// Euclidean `R^p` with `Γ = 0`.
#[derive(Clone, Debug)]
pub struct FlatChart {
    pub dim: usize,
}

impl FlatChart {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }
}

impl Chart for FlatChart {
    fn dim(&self) -> usize {
        self.dim
    }

    fn name(&self) -> String {
        "flat".into()
    }

    fn contains(&self, x: &[f64]) -> bool {
        x.iter().all(|v| v.is_finite())
    }

    fn metric(&self, _x: &[f64]) -> Option<Matrix> {
        Some(Matrix::identity(self.dim, self.dim))
    }

    fn christoffel_into(&self, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }

    fn dchristoffel_into(&self, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }

    fn is_flat(&self) -> bool {
        true
    }

    fn analytic_derivative(&self) -> bool {
        true
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum ConformalKind {
    /// `f = ln 2 - ln(1 + |x|^2)`: unit sphere, stereographic from the north pole.
    SphereStereo,
    /// `f = -ln x_p`: hyperbolic upper half-space.
    HalfSpace,
}

/// Conformally flat chart `g = e^{2f} I` with closed-form connector
/// `Γ^k_ij = δ_ik f_j + δ_jk f_i - δ_ij f_k`.
#[derive(Clone, Debug)]
pub struct ConformalChart {
    dim: usize,
    kind: ConformalKind,
    max_radius: f64,
}

impl ConformalChart {
    /// Unit sphere `S^p` in stereographic coordinates; points with
    /// `|x| >= max_radius` (a disk around the projection pole) are excluded.
    pub fn sphere_stereo(dim: usize, max_radius: f64) -> Self {
        assert!((1..=8).contains(&dim), "conformal charts support 1 <= p <= 8");
        Self {
            dim,
            kind: ConformalKind::SphereStereo,
            max_radius,
        }
    }

    /// Poincare upper half-space, `x_p > 0`.
    pub fn half_plane(dim: usize) -> Self {
        assert!((1..=8).contains(&dim), "conformal charts support 1 <= p <= 8");
        Self {
            dim,
            kind: ConformalKind::HalfSpace,
            max_radius: f64::INFINITY,
        }
    }

    fn f_grad(&self, x: &[f64], grad: &mut [f64]) {
        match self.kind {
            ConformalKind::SphereStereo => {
                let r2: f64 = x.iter().map(|v| v * v).sum();
                for (g, xi) in grad.iter_mut().zip(x) {
                    *g = -2.0 * xi / (1.0 + r2);
                }
            }
            ConformalKind::HalfSpace => {
                grad.fill(0.0);
                grad[self.dim - 1] = -1.0 / x[self.dim - 1];
            }
        }
    }

    fn f_hess(&self, x: &[f64], l: usize, i: usize) -> f64 {
        match self.kind {
            ConformalKind::SphereStereo => {
                let r2: f64 = x.iter().map(|v| v * v).sum();
                let d = if l == i { 1.0 } else { 0.0 };
                -2.0 * d / (1.0 + r2) + 4.0 * x[i] * x[l] / ((1.0 + r2) * (1.0 + r2))
            }
            ConformalKind::HalfSpace => {
                let n = self.dim - 1;
                if l == n && i == n {
                    1.0 / (x[n] * x[n])
                } else {
                    0.0
                }
            }
        }
    }

    fn conformal_factor(&self, x: &[f64]) -> f64 {
        match self.kind {
            ConformalKind::SphereStereo => {
                let r2: f64 = x.iter().map(|v| v * v).sum();
                4.0 / ((1.0 + r2) * (1.0 + r2))
            }
            ConformalKind::HalfSpace => 1.0 / (x[self.dim - 1] * x[self.dim - 1]),
        }
    }
}

impl Chart for ConformalChart {
    fn dim(&self) -> usize {
        self.dim
    }

    fn name(&self) -> String {
        match self.kind {
            ConformalKind::SphereStereo => "sphere-stereo".into(),
            ConformalKind::HalfSpace => "poincare-half-plane".into(),
        }
    }

    fn contains(&self, x: &[f64]) -> bool {
        if !x.iter().all(|v| v.is_finite()) {
            return false;
        }
        match self.kind {
            ConformalKind::SphereStereo => x.iter().map(|v| v * v).sum::<f64>().sqrt() < self.max_radius,
            ConformalKind::HalfSpace => x[self.dim - 1] > 0.0,
        }
    }

    fn metric(&self, x: &[f64]) -> Option<Matrix> {
        Some(Matrix::identity(self.dim, self.dim) * self.conformal_factor(x))
    }

    fn christoffel_into(&self, x: &[f64], out: &mut [f64]) {
        let p = self.dim;
        let mut buf = [0.0; 8];
        let f = &mut buf[..p];
        self.f_grad(x, f);
        out.fill(0.0);
        for k in 0..p {
            for i in 0..p {
                for j in 0..p {
                    let mut v = 0.0;
                    if i == k {
                        v += f[j];
                    }
                    if j == k {
                        v += f[i];
                    }
                    if i == j {
                        v -= f[k];
                    }
                    out[(k * p + i) * p + j] = v;
                }
            }
        }
    }

    fn dchristoffel_into(&self, x: &[f64], out: &mut [f64]) {
        let p = self.dim;
        let p3 = p * p * p;
        for l in 0..p {
            for k in 0..p {
                for i in 0..p {
                    for j in 0..p {
                        let mut v = 0.0;
                        if i == k {
                            v += self.f_hess(x, j, l);
                        }
                        if j == k {
                            v += self.f_hess(x, i, l);
                        }
                        if i == j {
                            v -= self.f_hess(x, k, l);
                        }
                        out[l * p3 + (k * p + i) * p + j] = v;
                    }
                }
            }
        }
    }

    fn analytic_derivative(&self) -> bool {
        true
    }
}

/// Unit sphere in spherical coordinates `(θ, φ)`, `g = diag(1, sin²θ)`.
#[derive(Clone, Debug)]
pub struct SpherePolarChart {
    pub margin: f64,
}

impl Chart for SpherePolarChart {
    fn dim(&self) -> usize {
        2
    }

    fn name(&self) -> String {
        "sphere-polar".into()
    }

    fn contains(&self, x: &[f64]) -> bool {
        x[0].is_finite() && x[1].is_finite() && x[0] > self.margin && x[0] < std::f64::consts::PI - self.margin
    }

    fn metric(&self, x: &[f64]) -> Option<Matrix> {
        let s = x[0].sin();
        Some(Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, s * s]))
    }

    fn christoffel_into(&self, x: &[f64], out: &mut [f64]) {
        let (s, c) = x[0].sin_cos();
        out.fill(0.0);
        out[3] = -s * c; // Γ^θ_φφ
        out[4 + 1] = c / s; // Γ^φ_θφ
        out[4 + 2] = c / s;
    }

    fn dchristoffel_into(&self, x: &[f64], out: &mut [f64]) {
        let s = x[0].sin();
        out.fill(0.0);
        out[3] = -(2.0 * x[0]).cos();
        out[5] = -1.0 / (s * s);
        out[6] = -1.0 / (s * s);
    }

    fn analytic_derivative(&self) -> bool {
        true
    }
}

/// Warped product on `R^2` with `g = diag(1, 1 + x_1²)`.
#[derive(Clone, Debug, Default)]
pub struct WarpedR2Chart;

impl Chart for WarpedR2Chart {
    fn dim(&self) -> usize {
        2
    }

    fn name(&self) -> String {
        "warped-r2".into()
    }

    fn contains(&self, x: &[f64]) -> bool {
        x[0].is_finite() && x[1].is_finite()
    }

    fn metric(&self, x: &[f64]) -> Option<Matrix> {
        Some(Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0 + x[0] * x[0]]))
    }

    fn christoffel_into(&self, x: &[f64], out: &mut [f64]) {
        let a = x[0];
        out.fill(0.0);
        out[3] = -a; // Γ^1_22
        let v = a / (1.0 + a * a);
        out[5] = v; // Γ^2_12
        out[6] = v;
    }

    fn dchristoffel_into(&self, x: &[f64], out: &mut [f64]) {
        let a = x[0];
        out.fill(0.0);
        out[3] = -1.0;
        let d = (1.0 - a * a) / ((1.0 + a * a) * (1.0 + a * a));
        out[5] = d;
        out[6] = d;
    }

    fn analytic_derivative(&self) -> bool {
        true
    }
}

type MetricFn = dyn Fn(&[f64]) -> Matrix + Send + Sync;
type MetricDerivFn = dyn Fn(&[f64], usize) -> Matrix + Send + Sync;
type DomainFn = dyn Fn(&[f64]) -> bool + Send + Sync;

/// Levi-Civita connection of an arbitrary metric given as a closure.
///
/// Without an analytic metric derivative, `∂g` is taken by central
/// differences and `DΓ` by a second, coarser central difference.
#[derive(Clone)]
pub struct MetricChart {
    dim: usize,
    name: String,
    metric: Arc<MetricFn>,
    dmetric: Option<Arc<MetricDerivFn>>,
    domain: Arc<DomainFn>,
}

impl MetricChart {
    pub fn new(dim: usize, name: impl Into<String>, metric: impl Fn(&[f64]) -> Matrix + Send + Sync + 'static) -> Self {
        Self {
            dim,
            name: name.into(),
            metric: Arc::new(metric),
            dmetric: None,
            domain: Arc::new(|x: &[f64]| x.iter().all(|v| v.is_finite())),
        }
    }

    /// Supplies `∂_l g` analytically.
    pub fn with_metric_derivative(mut self, d: impl Fn(&[f64], usize) -> Matrix + Send + Sync + 'static) -> Self {
        self.dmetric = Some(Arc::new(d));
        self
    }

    pub fn with_domain(mut self, domain: impl Fn(&[f64]) -> bool + Send + Sync + 'static) -> Self {
        self.domain = Arc::new(domain);
        self
    }

    fn dmetric_at(&self, x: &[f64], l: usize) -> Matrix {
        if let Some(d) = &self.dmetric {
            return d(x, l);
        }
        let h = 1e-5 * x.iter().map(|v| v * v).sum::<f64>().sqrt().max(1.0);
        let mut xp = x.to_vec();
        xp[l] += h;
        let gp = (self.metric)(&xp);
        xp[l] = x[l] - h;
        let gm = (self.metric)(&xp);
        (gp - gm) / (2.0 * h)
    }
}

impl std::fmt::Debug for MetricChart {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MetricChart").field("dim", &self.dim).field("name", &self.name).finish()
    }
}

impl Chart for MetricChart {
    fn dim(&self) -> usize {
        self.dim
    }

    fn name(&self) -> String {
        self.name.clone()
    }

    fn contains(&self, x: &[f64]) -> bool {
        (self.domain)(x)
    }

    fn metric(&self, x: &[f64]) -> Option<Matrix> {
        Some((self.metric)(x))
    }

    fn christoffel_into(&self, x: &[f64], out: &mut [f64]) {
        let p = self.dim;
        let g = (self.metric)(x);
        let ginv = spd_inverse(&g, "metric").unwrap_or_else(|_| g.clone().try_inverse().unwrap_or(g.clone() * f64::NAN));
        let dg: Vec<Matrix> = (0..p).map(|l| self.dmetric_at(x, l)).collect();
        // first-kind symbols Γ_lij = ½(∂_i g_lj + ∂_j g_li - ∂_l g_ij)
        for k in 0..p {
            for i in 0..p {
                for j in 0..p {
                    let mut s = 0.0;
                    for l in 0..p {
                        let first = 0.5 * (dg[i][(l, j)] + dg[j][(l, i)] - dg[l][(i, j)]);
                        s += ginv[(k, l)] * first;
                    }
                    out[(k * p + i) * p + j] = s;
                }
            }
        }
    }

    fn dchristoffel_into(&self, x: &[f64], out: &mut [f64]) {
        let rel = if self.dmetric.is_some() { 1e-5 } else { 1e-3 };
        fd_dchristoffel(&|y: &[f64], o: &mut [f64]| self.christoffel_into(y, o), self.dim, x, rel, out);
    }
}

/// The chart `x̃ = T x + c` over an inner chart; connector and metric are
/// pushed through the linear change exactly.
#[derive(Clone)]
pub struct LinearChart {
    inner: ChartRef,
    t: Matrix,
    t_inv: Matrix,
    offset: Vec<f64>,
}

impl LinearChart {
    pub fn new(inner: ChartRef, t: Matrix, offset: Vec<f64>) -> Result<Self> {
        let p = inner.dim();
        if t.nrows() != p || t.ncols() != p || offset.len() != p {
            return Err(Error::Dimension {
                what: "linear chart change",
                expected: p,
                got: t.nrows(),
            });
        }
        let t_inv = t.clone().try_inverse().ok_or(Error::Singular {
            what: "linear chart change",
            condition: f64::INFINITY,
        })?;
        Ok(Self { inner, t, t_inv, offset })
    }

    /// Maps inner coordinates to the new chart.
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let p = self.offset.len();
        (0..p)
            .map(|a| self.offset[a] + (0..p).map(|i| self.t[(a, i)] * x[i]).sum::<f64>())
            .collect()
    }

    /// Maps new-chart coordinates back to the inner chart.
    pub fn backward(&self, y: &[f64]) -> Vec<f64> {
        let p = self.offset.len();
        (0..p)
            .map(|i| (0..p).map(|a| self.t_inv[(i, a)] * (y[a] - self.offset[a])).sum::<f64>())
            .collect()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.t
    }
}

impl Chart for LinearChart {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn name(&self) -> String {
        format!("linear({})", self.inner.name())
    }

    fn is_flat(&self) -> bool {
        self.inner.is_flat()
    }

    fn contains(&self, y: &[f64]) -> bool {
        self.inner.contains(&self.backward(y))
    }

    fn metric(&self, y: &[f64]) -> Option<Matrix> {
        let g = self.inner.metric(&self.backward(y))?;
        Some(self.t_inv.transpose() * g * &self.t_inv)
    }

    fn christoffel_into(&self, y: &[f64], out: &mut [f64]) {
        let p = self.dim();
        let mut inner = vec![0.0; p * p * p];
        self.inner.christoffel_into(&self.backward(y), &mut inner);
        push_bilinear(&inner, &self.t, &self.t_inv, p, out);
    }

    fn dchristoffel_into(&self, y: &[f64], out: &mut [f64]) {
        let p = self.dim();
        let p3 = p * p * p;
        let mut inner = vec![0.0; p * p3];
        self.inner.dchristoffel_into(&self.backward(y), &mut inner);
        let mut pushed = vec![0.0; p * p3];
        for l in 0..p {
            push_bilinear(&inner[l * p3..(l + 1) * p3], &self.t, &self.t_inv, p, &mut pushed[l * p3..(l + 1) * p3]);
        }
        for d in 0..p {
            for m in 0..p3 {
                out[d * p3 + m] = (0..p).map(|l| self.t_inv[(l, d)] * pushed[l * p3 + m]).sum();
            }
        }
    }

    fn analytic_derivative(&self) -> bool {
        self.inner.analytic_derivative()
    }
}

fn push_bilinear(inner: &[f64], t: &Matrix, t_inv: &Matrix, p: usize, out: &mut [f64]) {
    for a in 0..p {
        for b in 0..p {
            for c in 0..p {
                let mut s = 0.0;
                for k in 0..p {
                    for i in 0..p {
                        for j in 0..p {
                            s += t[(a, k)] * inner[(k * p + i) * p + j] * t_inv[(i, b)] * t_inv[(j, c)];
                        }
                    }
                }
                out[(a * p + b) * p + c] = s;
            }
        }
    }
}

fn param(params: &ChartParams, key: &str, default: f64) -> f64 {
    params.get(key).copied().unwrap_or(default)
}

/// Builds a builtin chart by name.
///
/// Recognized parameters: `dim` (flat, sphere-stereo, poincare-half-plane),
/// `max_radius` (sphere-stereo, default 10), `margin` (sphere-polar, default 1e-3).
pub fn builtin_chart(name: &str, params: &ChartParams) -> Result<ChartRef> {
    let known: &[&str] = match name {
        "flat" | "poincare-half-plane" => &["dim"],
        "sphere-stereo" => &["dim", "max_radius"],
        "sphere-polar" => &["margin"],
        "warped-r2" => &[],
        _ => {
            return Err(Error::Config(format!(
                "unknown chart `{name}` (expected one of {})",
                BUILTIN_CHARTS.join(", ")
            )))
        }
    };
    if let Some(k) = params.keys().find(|k| !known.contains(&k.as_str())) {
        return Err(Error::Config(format!("unknown parameter `{k}` for chart `{name}`")));
    }
    let dim = param(params, "dim", 2.0);
    if dim < 1.0 || dim.fract() != 0.0 || dim > 8.0 {
        return Err(Error::Config(format!("chart dimension must be an integer in 1..=8, got {dim}")));
    }
    let dim = dim as usize;
    Ok(match name {
        "flat" => Arc::new(FlatChart::new(dim)),
        "sphere-stereo" => Arc::new(ConformalChart::sphere_stereo(dim, param(params, "max_radius", 10.0))),
        "poincare-half-plane" => Arc::new(ConformalChart::half_plane(dim)),
        "sphere-polar" => Arc::new(SpherePolarChart {
            margin: param(params, "margin", 1e-3),
        }),
        _ => Arc::new(WarpedR2Chart),
    })
}
