use nalgebra::LU;

use super::{connector, connector_derivative, ensure_contains, metric_at, Chart};
use crate::error::{Error, Result};
use crate::linalg::{bilinear_apply, Matrix, Vector};
use crate::ode::Rk4;

fn check_len(what: &'static str, v: &Vector, p: usize) -> Result<()> {
    if v.len() != p {
        return Err(Error::Dimension {
            what,
            expected: p,
            got: v.len(),
        });
    }
    Ok(())
}

/// `V' + Γ(y)(V ⊗ y')`: covariant derivative of `V` along a curve through `y`.
pub fn covariant_derivative(chart: &dyn Chart, y: &Vector, yp: &Vector, v: &Vector, vp: &Vector) -> Result<Vector> {
    let p = chart.dim();
    for (what, w) in [("curve velocity", yp), ("vector field", v), ("field derivative", vp)] {
        check_len(what, w, p)?;
    }
    Ok(vp + connector(chart, y)?.apply(v, yp))
}

/// Connector data frozen at one point, for repeated curvature evaluations.
#[derive(Clone, Debug)]
pub struct CurvatureAt {
    p: usize,
    gamma: Vec<f64>,
    dgamma: Vec<f64>,
}

impl CurvatureAt {
    pub fn new(chart: &dyn Chart, x: &Vector) -> Result<Self> {
        ensure_contains(chart, x.as_slice())?;
        let p = chart.dim();
        if p > super::MAX_DIM {
            return Err(Error::Unsupported(format!("chart dimension {p} above {}", super::MAX_DIM)));
        }
        let mut gamma = vec![0.0; p * p * p];
        let mut dgamma = vec![0.0; p * p * p * p];
        chart.christoffel_into(x.as_slice(), &mut gamma);
        chart.dchristoffel_into(x.as_slice(), &mut dgamma);
        Ok(Self { p, gamma, dgamma })
    }

    pub fn dim(&self) -> usize {
        self.p
    }

    fn gamma_apply(&self, u: &[f64], v: &[f64], out: &mut [f64]) {
        bilinear_apply(&self.gamma, self.p, self.p, u, v, out);
    }

    /// `DΓ(d)(u ⊗ v)`.
    fn dgamma_apply(&self, d: &[f64], u: &[f64], v: &[f64], out: &mut [f64]) {
        let p = self.p;
        let p3 = p * p * p;
        let mut tmp = [0.0; 8];
        out.fill(0.0);
        for l in 0..p {
            if d[l] == 0.0 {
                continue;
            }
            bilinear_apply(&self.dgamma[l * p3..(l + 1) * p3], p, p, u, v, &mut tmp[..p]);
            for k in 0..p {
                out[k] += d[l] * tmp[k];
            }
        }
    }

    /// `R(u,v)w = DΓ(v)(w⊗u) − DΓ(u)(w⊗v) + Γ(Γ(w⊗u)⊗v) − Γ(Γ(w⊗v)⊗u)`.
    pub fn apply_slices(&self, u: &[f64], v: &[f64], w: &[f64], out: &mut [f64]) {
        let p = self.p;
        let mut a = [0.0; 8];
        let mut b = [0.0; 8];
        let mut c = [0.0; 8];
        let mut d = [0.0; 8];
        self.dgamma_apply(v, w, u, &mut a[..p]);
        self.dgamma_apply(u, w, v, &mut b[..p]);
        self.gamma_apply(w, u, &mut d[..p]);
        self.gamma_apply(&d[..p], v, &mut c[..p]);
        self.gamma_apply(w, v, &mut out[..p]);
        self.gamma_apply(&out[..p], u, &mut d[..p]);
        for k in 0..p {
            out[k] = (a[k] - b[k]) + (c[k] - d[k]);
        }
    }

    pub fn apply(&self, u: &Vector, v: &Vector, w: &Vector) -> Vector {
        let mut out = Vector::zeros(self.p);
        self.apply_slices(u.as_slice(), v.as_slice(), w.as_slice(), out.as_mut_slice());
        out
    }

    /// Components `R_abc^k = R(e_a, e_b)e_c` in layout `[a][b][c][k]`.
    pub fn tensor(&self) -> Vec<f64> {
        let p = self.p;
        let mut out = vec![0.0; p * p * p * p];
        let mut ea = vec![0.0; p];
        let mut eb = vec![0.0; p];
        let mut ec = vec![0.0; p];
        for a in 0..p {
            ea.fill(0.0);
            ea[a] = 1.0;
            for b in 0..p {
                eb.fill(0.0);
                eb[b] = 1.0;
                for c in 0..p {
                    ec.fill(0.0);
                    ec[c] = 1.0;
                    let base = ((a * p + b) * p + c) * p;
                    self.apply_slices(&ea, &eb, &ec, &mut out[base..base + p]);
                }
            }
        }
        out
    }
}

/// Curvature tensor `R(u,v)w` from the connector and its derivative.
pub fn curvature(chart: &dyn Chart, x: &Vector, u: &Vector, v: &Vector, w: &Vector) -> Result<Vector> {
    let p = chart.dim();
    for (what, z) in [("u", u), ("v", v), ("w", w)] {
        check_len(what, z, p)?;
    }
    Ok(CurvatureAt::new(chart, x)?.apply(u, v, w))
}

pub fn inner(chart: &dyn Chart, x: &Vector, u: &Vector, v: &Vector) -> Result<f64> {
    let g = metric_at(chart, x)?;
    Ok(u.dot(&(g * v)))
}

pub fn norm(chart: &dyn Chart, x: &Vector, v: &Vector) -> Result<f64> {
    Ok(inner(chart, x, v, v)?.max(0.0).sqrt())
}

/// Sectional curvature of the plane spanned by `u, v`:
/// `⟨R(u,v)u, v⟩ / (|u|²|v|² − ⟨u,v⟩²)`.
pub fn sectional_curvature(chart: &dyn Chart, x: &Vector, u: &Vector, v: &Vector) -> Result<f64> {
    let g = metric_at(chart, x)?;
    let r = curvature(chart, x, u, v, u)?;
    let uu = u.dot(&(&g * u));
    let vv = v.dot(&(&g * v));
    let uv = u.dot(&(&g * v));
    let area = uu * vv - uv * uv;
    if area <= 0.0 {
        return Err(Error::InvalidArgument("sectional curvature needs linearly independent vectors".into()));
    }
    Ok(r.dot(&(&g * v)) / area)
}

/// Third-order expansion of `exp_y(tv)` in coordinates.
pub fn exp_taylor(chart: &dyn Chart, y: &Vector, v: &Vector, t: f64) -> Result<Vector> {
    check_len("tangent vector", v, chart.dim())?;
    let gamma = connector(chart, y)?;
    let dgamma = connector_derivative(chart, y, v)?;
    let gvv = gamma.apply(v, v);
    let cubic = gamma.apply(&gvv, v) * 2.0 - dgamma.apply(v, v);
    let z = y + v * t - gvv * (0.5 * t * t) + cubic * (t * t * t / 6.0);
    ensure_contains(chart, z.as_slice())?;
    Ok(z)
}

/// Third-order expansion of `exp_y⁻¹(z)` in coordinates.
pub fn log_taylor(chart: &dyn Chart, y: &Vector, z: &Vector) -> Result<Vector> {
    ensure_contains(chart, z.as_slice())?;
    let w = z - y;
    let gamma = connector(chart, y)?;
    let dgamma = connector_derivative(chart, y, &w)?;
    let gww = gamma.apply(&w, &w);
    Ok(&w + &gww * 0.5 + (dgamma.apply(&w, &w) + gamma.apply(&gww, &w)) / 6.0)
}

/// Reusable geodesic integrator with preallocated buffers.
pub struct GeodesicSolver<'a> {
    chart: &'a dyn Chart,
    p: usize,
    gamma: Vec<f64>,
    dgamma: Vec<f64>,
    state: Vec<f64>,
    rk_plain: Rk4,
    rk_var: Rk4,
}

/// Newton options for the numerical inverse exponential map.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogOptions {
    pub steps: usize,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for LogOptions {
    fn default() -> Self {
        Self {
            steps: 64,
            tol: 1e-12,
            max_iter: 50,
        }
    }
}

fn geodesic_rhs(chart: &dyn Chart, p: usize, gamma: &mut [f64], y: &[f64], dy: &mut [f64]) {
    let (b, v) = y.split_at(p);
    chart.christoffel_into(b, gamma);
    dy[..p].copy_from_slice(&v[..p]);
    bilinear_apply(gamma, p, p, &v[..p], &v[..p], &mut dy[p..2 * p]);
    for d in &mut dy[p..2 * p] {
        *d = -*d;
    }
}

impl<'a> GeodesicSolver<'a> {
    pub fn new(chart: &'a dyn Chart) -> Self {
        let p = chart.dim();
        assert!(p <= super::MAX_DIM, "chart dimension above {}", super::MAX_DIM);
        Self {
            chart,
            p,
            gamma: vec![0.0; p * p * p],
            dgamma: vec![0.0; p * p * p * p],
            state: vec![0.0; 2 * p + 2 * p * p],
            rk_plain: Rk4::new(2 * p),
            rk_var: Rk4::new(2 * p + 2 * p * p),
        }
    }

    pub fn chart(&self) -> &'a dyn Chart {
        self.chart
    }

    /// Integrates the geodesic equation from `(y, v)` over `[0, t]`; writes
    /// `b(t)` and `b'(t)`.
    pub fn integrate(&mut self, y: &[f64], v: &[f64], t: f64, steps: usize, b_out: &mut [f64], v_out: &mut [f64]) -> Result<()> {
        let p = self.p;
        if !self.chart.contains(y) {
            return Err(Error::Domain {
                chart: self.chart.name(),
                point: y.to_vec(),
            });
        }
        if self.chart.is_flat() {
            for i in 0..p {
                b_out[i] = y[i] + t * v[i];
            }
            v_out.copy_from_slice(v);
            return ensure_contains(self.chart, b_out);
        }
        let state = &mut self.state[..2 * p];
        state[..p].copy_from_slice(y);
        state[p..].copy_from_slice(v);
        let chart = self.chart;
        let gamma = &mut self.gamma;
        let mut f = |_t: f64, s: &[f64], ds: &mut [f64]| geodesic_rhs(chart, p, gamma, s, ds);
        let steps = steps.max(1);
        let h = t / steps as f64;
        for s in 0..steps {
            self.rk_plain.step(&mut f, s as f64 * h, state, h);
            if !chart.contains(&state[..p]) {
                return Err(Error::DomainExit {
                    chart: chart.name(),
                    step: s + 1,
                });
            }
        }
        b_out.copy_from_slice(&state[..p]);
        v_out.copy_from_slice(&state[p..]);
        Ok(())
    }

    /// `exp_y(v)` together with its differential in `v` (a `p x p` matrix),
    /// from the linearized geodesic equation.
    pub fn exp_with_jacobian(&mut self, y: &[f64], v: &[f64], steps: usize) -> Result<(Vector, Matrix)> {
        let p = self.p;
        if !self.chart.contains(y) {
            return Err(Error::Domain {
                chart: self.chart.name(),
                point: y.to_vec(),
            });
        }
        let n = 2 * p + 2 * p * p;
        let state = &mut self.state[..n];
        state.fill(0.0);
        state[..p].copy_from_slice(y);
        state[p..2 * p].copy_from_slice(v);
        // columns: Jb_c at 2p + c*p, Jv_c at 2p + p*p + c*p; Jv(0) = I
        for c in 0..p {
            state[2 * p + p * p + c * p + c] = 1.0;
        }
        let chart = self.chart;
        let gamma = &mut self.gamma;
        let dgamma = &mut self.dgamma;
        let p3 = p * p * p;
        let mut f = |_t: f64, s: &[f64], ds: &mut [f64]| {
            geodesic_rhs(chart, p, gamma, s, ds);
            chart.dchristoffel_into(&s[..p], dgamma);
            let vel = &s[p..2 * p];
            let mut dvv = [0.0; 64];
            // dvv[l*p + k] = ∂_lΓ^k(v, v)
            for l in 0..p {
                bilinear_apply(&dgamma[l * p3..(l + 1) * p3], p, p, vel, vel, &mut dvv[l * p..(l + 1) * p]);
            }
            let mut tmp = [0.0; 8];
            for c in 0..p {
                let jb = 2 * p + c * p;
                let jv = 2 * p + p * p + c * p;
                ds[jb..jb + p].copy_from_slice(&s[jv..jv + p]);
                bilinear_apply(gamma, p, p, vel, &s[jv..jv + p], &mut tmp[..p]);
                for k in 0..p {
                    let mut d = 0.0;
                    for l in 0..p {
                        d += s[jb + l] * dvv[l * p + k];
                    }
                    ds[jv + k] = -d - 2.0 * tmp[k];
                }
            }
        };
        let steps = steps.max(1);
        let h = 1.0 / steps as f64;
        for s in 0..steps {
            self.rk_var.step(&mut f, s as f64 * h, state, h);
            if !chart.contains(&state[..p]) {
                return Err(Error::DomainExit {
                    chart: chart.name(),
                    step: s + 1,
                });
            }
        }
        let end = Vector::from_column_slice(&state[..p]);
        let jac = Matrix::from_column_slice(p, p, &state[2 * p..2 * p + p * p]);
        Ok((end, jac))
    }

    /// Newton iteration for `exp_y⁻¹(z)`, seeded by [`log_taylor`].
    pub fn log(&mut self, y: &Vector, z: &Vector, opts: &LogOptions) -> Result<Vector> {
        ensure_contains(self.chart, z.as_slice())?;
        if self.chart.is_flat() {
            return Ok(z - y);
        }
        let distance = (z - y).norm();
        let mut v = log_taylor(self.chart, y, z).unwrap_or_else(|_| z - y);
        if !v.iter().all(|x| x.is_finite()) {
            v = z - y;
        }
        let scale = z.norm().max(1.0);
        let p = self.p;
        let mut residual = f64::INFINITY;
        let mut lu: Option<LU<f64, nalgebra::Dyn, nalgebra::Dyn>> = None;
        let mut end = Vector::zeros(p);
        let mut vel = Vector::zeros(p);
        // chord iterations reuse the last Jacobian while they contract fast
        for _ in 0..opts.max_iter {
            let r = match &lu {
                Some(_) => self
                    .integrate(y.as_slice(), v.as_slice(), 1.0, opts.steps, end.as_mut_slice(), vel.as_mut_slice())
                    .map(|_| &end - z),
                None => self.exp_with_jacobian(y.as_slice(), v.as_slice(), opts.steps).map(|(e, jac)| {
                    lu = Some(LU::new(jac));
                    e - z
                }),
            };
            let r = match r {
                Ok(r) => r,
                Err(_) => {
                    v *= 0.5;
                    lu = None;
                    continue;
                }
            };
            let new_residual = r.norm();
            let dv = lu
                .as_ref()
                .and_then(|f| f.solve(&r))
                .ok_or(Error::LogNotConverged { residual: new_residual, distance })?;
            v -= dv;
            if new_residual <= opts.tol * scale {
                return Ok(v);
            }
            if new_residual > 0.1 * residual {
                lu = None;
            }
            residual = new_residual;
        }
        Err(Error::LogNotConverged { residual, distance })
    }
}

/// Fixed-step RK4 solution `(b(t), b'(t))` of `b'' + Γ(b)(b' ⊗ b') = 0`.
pub fn geodesic_integrate(chart: &dyn Chart, y: &Vector, v: &Vector, t: f64, steps: usize) -> Result<(Vector, Vector)> {
    check_len("geodesic velocity", v, chart.dim())?;
    ensure_contains(chart, y.as_slice())?;
    let p = chart.dim();
    let mut b = Vector::zeros(p);
    let mut bp = Vector::zeros(p);
    GeodesicSolver::new(chart).integrate(y.as_slice(), v.as_slice(), t, steps, b.as_mut_slice(), bp.as_mut_slice())?;
    Ok((b, bp))
}

/// `exp_y(v)` by RK4 over unit time.
pub fn exp_geodesic(chart: &dyn Chart, y: &Vector, v: &Vector, steps: usize) -> Result<Vector> {
    Ok(geodesic_integrate(chart, y, v, 1.0, steps)?.0)
}

/// Numerical `exp_y⁻¹(z)`.
pub fn log_numeric(chart: &dyn Chart, y: &Vector, z: &Vector, opts: &LogOptions) -> Result<Vector> {
    ensure_contains(chart, y.as_slice())?;
    GeodesicSolver::new(chart).log(y, z, opts)
}

/// Integrates the geodesic from `(y, v)` over `[0, t]` while parallel
/// transporting `vectors`; returns `(b(t), b'(t), transported)`.
pub fn transport_along_geodesic(
    chart: &dyn Chart,
    y: &Vector,
    v: &Vector,
    t: f64,
    steps: usize,
    vectors: &[Vector],
) -> Result<(Vector, Vector, Vec<Vector>)> {
    ensure_contains(chart, y.as_slice())?;
    let p = chart.dim();
    let m = vectors.len();
    let mut state = vec![0.0; 2 * p + m * p];
    state[..p].copy_from_slice(y.as_slice());
    state[p..2 * p].copy_from_slice(v.as_slice());
    for (i, w) in vectors.iter().enumerate() {
        check_len("transported vector", w, p)?;
        state[2 * p + i * p..2 * p + (i + 1) * p].copy_from_slice(w.as_slice());
    }
    let mut gamma = vec![0.0; p * p * p];
    let rhs = |_t: f64, s: &[f64], ds: &mut [f64]| {
        geodesic_rhs(chart, p, &mut gamma, s, ds);
        let vel = &s[p..2 * p];
        for i in 0..m {
            let o = 2 * p + i * p;
            bilinear_apply(&gamma, p, p, &s[o..o + p], vel, &mut ds[o..o + p]);
            for d in &mut ds[o..o + p] {
                *d = -*d;
            }
        }
    };
    crate::ode::rk4_integrate(rhs, &mut state, 0.0, t, steps, |_, _, s| chart.contains(&s[..p])).map_err(|step| {
        Error::DomainExit {
            chart: chart.name(),
            step,
        }
    })?;
    let b = Vector::from_column_slice(&state[..p]);
    let bp = Vector::from_column_slice(&state[p..2 * p]);
    let out = (0..m)
        .map(|i| Vector::from_column_slice(&state[2 * p + i * p..2 * p + (i + 1) * p]))
        .collect();
    Ok((b, bp, out))
}

/// Parallel transport of `v` along a polygonal coordinate path (straight
/// segments between consecutive samples), `substeps` RK4 steps per segment.
pub fn parallel_transport_integrate(chart: &dyn Chart, path: &[Vector], v: &Vector, substeps: usize) -> Result<Vector> {
    let p = chart.dim();
    check_len("transported vector", v, p)?;
    if path.is_empty() {
        return Err(Error::InvalidArgument("empty path".into()));
    }
    for x in path {
        ensure_contains(chart, x.as_slice())?;
    }
    let mut w = v.as_slice().to_vec();
    let mut gamma = vec![0.0; p * p * p];
    let mut pos = vec![0.0; p];
    let mut step_count = 0;
    for seg in path.windows(2) {
        let a = seg[0].as_slice();
        let d: Vec<f64> = seg[1].iter().zip(a).map(|(b, a)| b - a).collect();
        let rhs = |s: f64, y: &[f64], dy: &mut [f64]| {
            for i in 0..p {
                pos[i] = a[i] + s * d[i];
            }
            chart.christoffel_into(&pos, &mut gamma);
            bilinear_apply(&gamma, p, p, y, &d, dy);
            for x in dy.iter_mut() {
                *x = -*x;
            }
        };
        crate::ode::rk4_integrate(rhs, &mut w, 0.0, 1.0, substeps, |_, _, _| true).map_err(|s| Error::DomainExit {
            chart: chart.name(),
            step: step_count + s,
        })?;
        step_count += substeps;
    }
    Ok(Vector::from_vec(w))
}
