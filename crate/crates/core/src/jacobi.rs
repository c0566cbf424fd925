//! Third-order Jacobi-field endpoint expansion and the derivative formulas for
//! `ζ(ε) = exp_{y(0)}⁻¹(exp_{y(ε)} V(ε))`, with integrated oracles.

use crate::error::{Error, Result};
use crate::linalg::{bilinear_apply, Vector};
use crate::manifold::{
    connector, connector_derivative, ensure_contains, Chart, CurvatureAt, GeodesicSolver, LogOptions,
};
use crate::ode::rk4_integrate;

/// Covariant `t`-jet of a vector field `W` along a geodesic at `t = 0`:
/// `W`, `Z = ∇W`, `∇²W`, `∇³W`.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldJet3 {
    pub w0: Vector,
    pub z0: Vector,
    pub n2: Vector,
    pub n3: Vector,
}

impl FieldJet3 {
    /// Jet of the Jacobi field with `J(0) = j0`, `∇J(0) = nj0` along the
    /// geodesic with initial velocity `v`, using `∇²J = −R(V,J)V` and
    /// `∇³J = −R(V,∇J)V` at `t = 0`.
    pub fn jacobi(chart: &dyn Chart, b0: &Vector, v: &Vector, j0: &Vector, nj0: &Vector) -> Result<Self> {
        let r = CurvatureAt::new(chart, b0)?;
        Ok(Self {
            w0: j0.clone(),
            z0: nj0.clone(),
            n2: -r.apply(v, j0, v),
            n3: -r.apply(v, nj0, v),
        })
    }
}

/// Covariant `ε`-jet of a vector field `V` along a curve: `V`, `∇V`, `∇²V`, `∇³V`.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationJet {
    pub v0: Vector,
    pub nv1: Vector,
    pub nv2: Vector,
    pub nv3: Vector,
}

/// Curve jet at `ε = 0`: `y`, `y'`, `∇y'`, `∇²y'`.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveJet {
    pub y: Vector,
    pub yp: Vector,
    pub nabla_yp: Vector,
    pub nabla2_yp: Vector,
}

fn check_dims(chart: &dyn Chart, vs: &[&Vector]) -> Result<()> {
    let p = chart.dim();
    for v in vs {
        if v.len() != p {
            return Err(Error::Dimension {
                what: "jet vector",
                expected: p,
                got: v.len(),
            });
        }
    }
    Ok(())
}

/// Coordinates of `W(1)` at the end of the geodesic from `b0` with velocity
/// `v`, expanded to third order from the jet at `t = 0`.
pub fn lemma22_endpoint(chart: &dyn Chart, b0: &Vector, v: &Vector, jet: &FieldJet3) -> Result<Vector> {
    check_dims(chart, &[v, &jet.w0, &jet.z0, &jet.n2, &jet.n3])?;
    let gamma = connector(chart, b0)?;
    let r = CurvatureAt::new(chart, b0)?;
    let wz = &jet.w0 + &jet.z0;
    let taylor = &wz + &jet.n2 * 0.5 + &jet.n3 / 6.0 + r.apply(v, &wz, v) * 0.5;
    let inner = &wz + &jet.n2 * 0.5;
    let gamma_block = -gamma.apply(&inner, v) + gamma.apply(&gamma.apply(v, &wz), v)
        - connector_derivative(chart, b0, &wz)?.apply(v, v) * 0.5;
    Ok(taylor + gamma_block)
}

/// Integrates `∇²J + R(b', J)b' = 0` along the geodesic from `b0` with
/// velocity `v` over unit time, in covariant form: state `(b, b', J, ∇J)`
/// with `J' = ∇J − Γ(J ⊗ b')` and `(∇J)' = −R(b',J)b' − Γ(∇J ⊗ b')`.
/// Returns `J(1)` in coordinates.
pub fn jacobi_integrate(chart: &dyn Chart, b0: &Vector, v: &Vector, j0: &Vector, nj0: &Vector, steps: usize) -> Result<Vector> {
    ensure_contains(chart, b0.as_slice())?;
    check_dims(chart, &[v, j0, nj0])?;
    let p = chart.dim();
    let mut state = vec![0.0; 4 * p];
    state[..p].copy_from_slice(b0.as_slice());
    state[p..2 * p].copy_from_slice(v.as_slice());
    state[2 * p..3 * p].copy_from_slice(j0.as_slice());
    state[3 * p..].copy_from_slice(nj0.as_slice());
    let mut gamma = vec![0.0; p * p * p];
    let mut failure = None;
    let rhs = |_t: f64, s: &[f64], ds: &mut [f64]| {
        let b = &s[..p];
        let bp = &s[p..2 * p];
        let j = &s[2 * p..3 * p];
        let k = &s[3 * p..];
        chart.christoffel_into(b, &mut gamma);
        let mut tmp = vec![0.0; p];
        ds[..p].copy_from_slice(bp);
        bilinear_apply(&gamma, p, p, bp, bp, &mut tmp);
        for i in 0..p {
            ds[p + i] = -tmp[i];
        }
        bilinear_apply(&gamma, p, p, j, bp, &mut tmp);
        for i in 0..p {
            ds[2 * p + i] = k[i] - tmp[i];
        }
        let rjb = match CurvatureAt::new(chart, &Vector::from_column_slice(b)) {
            Ok(r) => {
                let mut out = vec![0.0; p];
                r.apply_slices(bp, j, bp, &mut out);
                out
            }
            Err(e) => {
                failure.get_or_insert(e);
                vec![f64::NAN; p]
            }
        };
        bilinear_apply(&gamma, p, p, k, bp, &mut tmp);
        for i in 0..p {
            ds[3 * p + i] = -rjb[i] - tmp[i];
        }
    };
    let res = rk4_integrate(rhs, &mut state, 0.0, 1.0, steps, |_, _, s| chart.contains(&s[..p]));
    if let Some(e) = failure {
        return Err(e);
    }
    res.map_err(|step| Error::DomainExit {
        chart: chart.name(),
        step,
    })?;
    Ok(Vector::from_column_slice(&state[2 * p..3 * p]))
}

/// `(ζ'(0), ζ''(0), ζ'''(0))` from the intrinsic third-order formulas.
pub fn zeta_derivatives(chart: &dyn Chart, curve: &CurveJet, var: &VariationJet) -> Result<(Vector, Vector, Vector)> {
    check_dims(
        chart,
        &[&curve.yp, &curve.nabla_yp, &curve.nabla2_yp, &var.v0, &var.nv1, &var.nv2, &var.nv3],
    )?;
    let r = CurvatureAt::new(chart, &curve.y)?;
    let (yp, ny, n2y) = (&curve.yp, &curve.nabla_yp, &curve.nabla2_yp);
    let (v, nv, n2v, n3v) = (&var.v0, &var.nv1, &var.nv2, &var.nv3);
    let d1 = yp + nv - r.apply(v, yp, v) / 3.0;
    let d2 = ny + n2v - r.apply(v, ny, v) / 3.0 - r.apply(nv, yp, v) * (2.0 / 3.0)
        + r.apply(yp, v, &(yp + nv * 2.0)) / 3.0;
    let d3 = n2y
        + n3v
        + r.apply(yp, nv, &(yp + nv * 2.0))
        + r.apply(yp, v, &(ny + n2v * 2.0))
        + r.apply(v, n2v, yp)
        + r.apply(v, nv, ny)
        + r.apply(ny, v, nv) * 2.0
        - r.apply(v, n2y, v) / 3.0;
    Ok((d1, d2, d3))
}

/// A curve `y(ε)` and field `V(ε)` realizing prescribed covariant jets: the
/// velocity is `E(ε)(a + εb + ε²c/2)` and the field `E(ε)(v0 + εv1 + ε²v2/2 +
/// ε³v3/6)`, where `E` is a parallel frame along the curve with `E(0) = I`.
#[derive(Clone, Debug)]
pub struct JetCurve {
    pub curve: CurveJet,
    pub var: VariationJet,
    /// RK4 steps per unit `|ε|`, at least one step per evaluation.
    pub steps_per_unit: f64,
}

impl JetCurve {
    pub fn new(curve: CurveJet, var: VariationJet) -> Self {
        Self {
            curve,
            var,
            steps_per_unit: 4000.0,
        }
    }

    /// `(y(ε), V(ε))` in coordinates.
    pub fn eval(&self, chart: &dyn Chart, eps: f64) -> Result<(Vector, Vector)> {
        let p = chart.dim();
        let y0 = &self.curve.y;
        ensure_contains(chart, y0.as_slice())?;
        // state: y (p), frame columns E_c (p*p)
        let mut state = vec![0.0; p + p * p];
        state[..p].copy_from_slice(y0.as_slice());
        for c in 0..p {
            state[p + c * p + c] = 1.0;
        }
        let (a, b, cc) = (&self.curve.yp, &self.curve.nabla_yp, &self.curve.nabla2_yp);
        let mut gamma = vec![0.0; p * p * p];
        let mut coef = vec![0.0; p];
        let mut vel = vec![0.0; p];
        let rhs = |t: f64, s: &[f64], ds: &mut [f64]| {
            for i in 0..p {
                coef[i] = a[i] + t * b[i] + 0.5 * t * t * cc[i];
            }
            vel.fill(0.0);
            for col in 0..p {
                for i in 0..p {
                    vel[i] += s[p + col * p + i] * coef[col];
                }
            }
            chart.christoffel_into(&s[..p], &mut gamma);
            ds[..p].copy_from_slice(&vel);
            for col in 0..p {
                let o = p + col * p;
                bilinear_apply(&gamma, p, p, &s[o..o + p], &vel, &mut ds[o..o + p]);
                for d in &mut ds[o..o + p] {
                    *d = -*d;
                }
            }
        };
        let steps = ((eps.abs() * self.steps_per_unit).ceil() as usize).max(1);
        rk4_integrate(rhs, &mut state, 0.0, eps, steps, |_, _, s| chart.contains(&s[..p])).map_err(|step| {
            Error::DomainExit {
                chart: chart.name(),
                step,
            }
        })?;
        let var = &self.var;
        let mut vcoef = vec![0.0; p];
        for i in 0..p {
            vcoef[i] = var.v0[i] + eps * var.nv1[i] + eps * eps / 2.0 * var.nv2[i] + eps.powi(3) / 6.0 * var.nv3[i];
        }
        let y = Vector::from_column_slice(&state[..p]);
        let mut v = Vector::zeros(p);
        for col in 0..p {
            for i in 0..p {
                v[i] += state[p + col * p + i] * vcoef[col];
            }
        }
        Ok((y, v))
    }

    /// `ζ(ε) = exp_{y(0)}⁻¹(exp_{y(ε)} V(ε))` from integrated geodesics and a
    /// Newton logarithm.
    pub fn zeta(&self, chart: &dyn Chart, eps: f64, exp_steps: usize, log: &LogOptions) -> Result<Vector> {
        let (y, v) = self.eval(chart, eps)?;
        let p = chart.dim();
        let mut solver = GeodesicSolver::new(chart);
        let mut z = Vector::zeros(p);
        let mut zp = Vector::zeros(p);
        solver.integrate(y.as_slice(), v.as_slice(), 1.0, exp_steps, z.as_mut_slice(), zp.as_mut_slice())?;
        solver.log(&self.curve.y, &z, log)
    }
}

/// Finite-difference `(ζ'(0), ζ''(0), ζ'''(0))`: five-point central stencils
/// for the first two derivatives and a seven-point stencil for the third.
pub fn zeta_finite_differences(
    chart: &dyn Chart,
    jc: &JetCurve,
    eps0: f64,
    exp_steps: usize,
    log: &LogOptions,
) -> Result<(Vector, Vector, Vector)> {
    let f = |k: i32| jc.zeta(chart, k as f64 * eps0, exp_steps, log);
    let (m3, m2, m1, z0, p1, p2, p3) = (f(-3)?, f(-2)?, f(-1)?, f(0)?, f(1)?, f(2)?, f(3)?);
    let h = eps0;
    let d1 = (&m2 - &m1 * 8.0 + &p1 * 8.0 - &p2) / (12.0 * h);
    let d2 = (-&m2 + &m1 * 16.0 - &z0 * 30.0 + &p1 * 16.0 - &p2) / (12.0 * h * h);
    let d3 = (&m3 - &m2 * 8.0 + &m1 * 13.0 - &p1 * 13.0 + &p2 * 8.0 - &p3) / (8.0 * h * h * h);
    Ok((d1, d2, d3))
}
