use std::sync::Arc;

use intrinsic_filter::diffusion::*;
use intrinsic_filter::linalg::{Bilinear, Matrix, Vector};
use intrinsic_filter::manifold::{connector, Chart, ChartRef, FlatChart, LinearChart};
use intrinsic_filter::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn v(xs: &[f64]) -> Vector {
    Vector::from_column_slice(xs)
}

fn flat_linear(a: Matrix, s: Matrix, gamma: f64) -> ModelRef {
    let p = a.nrows();
    Arc::new(FlatLinear::new(a, Vector::zeros(p), s, gamma).unwrap())
}

fn builtins(gamma: f64) -> Vec<(ModelRef, Vector)> {
    ["flat-linear", "scalar-exp", "warped-2d"]
        .iter()
        .map(|n| {
            let spec = ModelSpec::default_for(n).unwrap();
            let x = if spec.dim() == 1 { v(&[0.3]) } else { v(&[0.4, -0.3]) };
            (spec.build(gamma).unwrap(), x)
        })
        .collect()
}

/// `exp(M)` for `M = [[-A, α], [0, Aᵀ]]δ` carries the linear-SDE covariance
/// integral in its blocks.
fn lyapunov(a: &Matrix, alpha: &Matrix, sigma0: &Matrix, delta: f64) -> Matrix {
    let p = a.nrows();
    let mut m = Matrix::zeros(2 * p, 2 * p);
    m.view_mut((0, 0), (p, p)).copy_from(&(-a * delta));
    m.view_mut((0, p), (p, p)).copy_from(&(alpha * delta));
    m.view_mut((p, p), (p, p)).copy_from(&(a.transpose() * delta));
    let e = m.exp();
    let f12 = e.view((0, p), (p, p)).into_owned();
    let f22 = e.view((p, p), (p, p)).into_owned();
    let ead = f22.transpose();
    &ead * sigma0 * ead.transpose() + f22.transpose() * f12
}

#[test]
fn cometric_examples() {
    let id = flat_linear(Matrix::zeros(2, 2), Matrix::identity(2, 2), 1.0);
    assert_eq!(induced_cometric(id.as_ref(), &[0.0, 0.0]), Matrix::identity(2, 2));
    let d = flat_linear(Matrix::zeros(2, 2), Matrix::from_diagonal(&v(&[1.0, 2.0])), 1.0);
    assert_eq!(induced_cometric(d.as_ref(), &[0.0, 0.0]), Matrix::from_diagonal(&v(&[1.0, 4.0])));

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for rank in 1..=3 {
        let b = Matrix::from_fn(3, rank, |_, _| rng.random_range(-1.0..1.0));
        let c = Matrix::from_fn(rank, 3, |_, _| rng.random_range(-1.0..1.0));
        let s = b * c;
        let m = flat_linear(Matrix::zeros(3, 3), s.clone(), 1.0);
        let alpha = induced_cometric(m.as_ref(), &[0.0; 3]);
        assert!((&alpha - alpha.transpose()).amax() < 1e-15);
        let eig = alpha.clone().symmetric_eigen().eigenvalues;
        assert!(eig.iter().all(|&l| l > -1e-12));
        assert_eq!(alpha.rank(1e-10), s.rank(1e-10));
        let geom = InducedGeometry::new(m);
        let res = canonical_connector(&geom, &v(&[0.0; 3]));
        if rank < 3 {
            assert!(matches!(res, Err(Error::Unsupported(_))), "{res:?}");
        } else {
            assert!(res.unwrap().max_abs() < 1e-12);
        }
    }
}

#[test]
fn canonical_connector_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let s = Matrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0)) + Matrix::identity(2, 2) * 2.0;
    let geom = InducedGeometry::new(flat_linear(Matrix::identity(2, 2), s, 0.3));
    assert!(canonical_connector(&geom, &v(&[1.0, -2.0])).unwrap().max_abs() < 1e-10);

    let geom = InducedGeometry::new(Arc::new(ScalarExp { kappa: 0.0, gamma: 1.0 }));
    for x in [-1.0, 0.0, 0.7] {
        let g = canonical_connector(&geom, &v(&[x])).unwrap();
        assert!((g.get(0, 0, 0) + 1.0).abs() < 1e-12, "{x}");
    }

    // hand-derived Christoffels of g = diag(1, (1 + x₁²)⁻²)
    let geom = InducedGeometry::new(Arc::new(Warped2d {
        kappa: 1.0,
        c: 0.5,
        gamma: 0.2,
    }));
    for x in [[0.0, 0.0], [0.5, -1.0], [-1.3, 2.0]] {
        let g = canonical_connector(&geom, &v(&x)).unwrap();
        let s = 1.0 + x[0] * x[0];
        let expected = Bilinear::from_fn(2, 2, |k, i, j| match (k, i, j) {
            (0, 1, 1) => 2.0 * x[0] / (s * s * s),
            (1, 0, 1) | (1, 1, 0) => -2.0 * x[0] / s,
            _ => 0.0,
        });
        assert!(g.sub(&expected).max_abs() < 1e-6, "{x:?}");
        let chart = connector(&geom, &v(&x)).unwrap();
        assert!(chart.sub(&expected).max_abs() < 1e-15);
    }
}

#[test]
fn generalized_inverse_identity() {
    for (m, x) in builtins(0.1) {
        let geom = InducedGeometry::new(m);
        for shift in [0.0, 0.5, -1.0] {
            let x = x.add_scalar(shift);
            let a = geom.cometric(x.as_slice());
            let g = geom.metric_checked(x.as_slice()).unwrap();
            let err = (&a * &g * &a - &a).amax() / a.amax();
            assert!(err < 1e-10, "{}: {err}", geom.name());
        }
    }
}

#[test]
fn linear_chart_change_pushes_cometric_and_connector() {
    let base: ModelRef = Arc::new(Warped2d {
        kappa: 1.0,
        c: 0.5,
        gamma: 0.1,
    });
    let t = Matrix::from_row_slice(2, 2, &[2.0, 0.5, -0.3, 1.2]);
    let c = v(&[0.1, -0.2]);
    let changed = Arc::new(LinearModelChange::new(base.clone(), t.clone(), c.clone()).unwrap());
    let pushed_chart = LinearChart::new(
        Arc::new(InducedGeometry::new(base.clone())) as ChartRef,
        t.clone(),
        c.as_slice().to_vec(),
    )
    .unwrap();
    let geom = InducedGeometry::new(changed.clone());
    for x in [[0.3, -0.4], [1.1, 0.2]] {
        let y = changed.forward(&x);
        let alpha = induced_cometric(base.as_ref(), &x);
        let pushed = induced_cometric(changed.as_ref(), y.as_slice());
        assert!((&pushed - &t * alpha * t.transpose()).amax() < 1e-10);
        let g1 = canonical_connector(&geom, &y).unwrap();
        let g2 = connector(&pushed_chart, &y).unwrap();
        assert!(g1.sub(&g2).max_abs() < 1e-6, "{}", g1.sub(&g2).max_abs());
    }
}

#[test]
fn drift_decomposition_examples() {
    let a = Matrix::from_row_slice(2, 2, &[-1.0, 0.3, 0.2, -0.5]);
    let geom = InducedGeometry::new(flat_linear(a.clone(), Matrix::identity(2, 2), 0.5));
    let x = v(&[0.4, 1.0]);
    let split = drift_decomposition(&geom, &x).unwrap();
    assert_eq!(split.xi, &a * &x);
    assert_eq!(split.zeta, Vector::zeros(2));

    let geom = InducedGeometry::new(Arc::new(ScalarExp { kappa: 0.0, gamma: 1.0 }));
    for x in [-0.5, 0.0, 0.4] {
        let split = drift_decomposition(&geom, &v(&[x])).unwrap();
        assert!((split.xi[0] + 0.5 * (2.0 * x).exp()).abs() < 1e-14);
        assert_eq!(split.b[0], 0.0);
        assert_eq!(&split.xi - &split.zeta, split.b);
    }
}

#[test]
fn generator_split_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for (m, x0) in builtins(0.3) {
        let p = m.dim();
        let geom = InducedGeometry::new(m);
        for _ in 0..20 {
            let a = Vector::from_fn(p, |_, _| rng.random_range(-1.0..1.0));
            let b = Vector::from_fn(p, |_, _| rng.random_range(-1.0..1.0));
            let c: f64 = rng.random_range(-1.0..1.0);
            let f = |x: &Vector| (a.dot(x) + c).sin() + b.dot(x).powi(2) * 0.5;
            let x = &x0 + Vector::from_fn(p, |_, _| rng.random_range(-0.5..0.5));
            let h = 1e-4;
            let e = |i: usize| {
                let mut e = Vector::zeros(p);
                e[i] = h;
                e
            };
            let grad = Vector::from_fn(p, |i, _| (f(&(&x + e(i))) - f(&(&x - e(i)))) / (2.0 * h));
            let hess = Matrix::from_fn(p, p, |i, j| {
                (f(&(&x + e(i) + e(j))) - f(&(&x + e(i) - e(j))) - f(&(&x - e(i) + e(j))) + f(&(&x - e(i) - e(j))))
                    / (4.0 * h * h)
            });
            let lhs = intrinsic_generator(&geom, &x, &grad, &hess).unwrap();
            let rhs = coordinate_generator(&geom, &x, &grad, &hess);
            assert!((lhs - rhs).abs() < 1e-8, "{}: {lhs} vs {rhs}", geom.name());
        }
    }
}

#[test]
fn zero_drift_flow_accumulates_noise_linearly() {
    let s = Matrix::from_row_slice(2, 2, &[1.0, 0.2, 0.0, 0.8]);
    let geom = InducedGeometry::new(flat_linear(Matrix::zeros(2, 2), s, 0.2));
    let x0 = v(&[0.5, -0.5]);
    let sigma0 = Matrix::from_row_slice(2, 2, &[0.02, 0.005, 0.005, 0.01]);
    let delta = 0.3;
    let b = integrate_flow(&geom, &x0, &sigma0, delta, 16).unwrap();
    assert!((b.x_delta() - &x0).amax() < 1e-15);
    assert!((b.tau0_delta() - Matrix::identity(2, 2)).amax() < 1e-15);
    let expected = &sigma0 + geom.cometric(x0.as_slice()) * delta;
    assert!((b.pi_delta() - &expected).amax() < 1e-14);
    assert!((&b.xi_delta - &expected).amax() < 1e-14);
    assert!(ailp_state(&b).amax() < 1e-15);
}

#[test]
fn linear_flow_matches_lyapunov_and_cocycle() {
    let a = Matrix::from_row_slice(3, 3, &[-1.0, 0.5, 0.0, -0.3, -0.2, 0.4, 0.1, 0.0, -0.7]);
    let s = Matrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.3, 0.9, 0.0, -0.2, 0.1, 1.1]);
    let gamma = 0.3;
    let geom = InducedGeometry::new(flat_linear(a.clone(), s, gamma));
    let x0 = v(&[1.0, -0.5, 0.25]);
    let sigma0 = Matrix::from_row_slice(3, 3, &[0.05, 0.01, 0.0, 0.01, 0.04, 0.005, 0.0, 0.005, 0.03]);
    let delta = 0.8;
    let b = integrate_flow(&geom, &x0, &sigma0, delta, DEFAULT_FLOW_STEPS).unwrap();
    let alpha = geom.cometric(x0.as_slice());
    let oracle = lyapunov(&a, &alpha, &sigma0, delta);
    let err = (&b.xi_delta - &oracle).amax();
    assert!(err < 1e-8, "{err}");
    let ead = (&a * delta).exp();
    assert!((b.tau0_delta() - &ead).amax() < 1e-10);
    assert!((b.x_delta() - &ead * &x0).amax() < 1e-10);
    for k in 0..=b.steps() {
        let lhs = &b.tau_t_delta[k] * &b.tau0t[k];
        assert!((lhs - b.tau0_delta()).amax() < 1e-8, "step {k}");
    }
    assert_eq!(b.tau0t[0], Matrix::identity(3, 3));
    assert_eq!(b.pi[0], sigma0);
    assert!(ailp_state(&b).amax() < 1e-14);
}

#[test]
fn second_variation_matches_finite_differences() {
    let geom = InducedGeometry::new(Arc::new(Warped2d {
        kappa: 0.8,
        c: 0.6,
        gamma: 0.5,
    }));
    let x0 = v(&[0.6, -0.4]);
    let sigma0 = Matrix::zeros(2, 2);
    let delta = 0.5;
    let b = integrate_flow(&geom, &x0, &sigma0, delta, 256).unwrap();
    let h = 1e-4;
    for j in 0..2 {
        let mut e = Vector::zeros(2);
        e[j] = h;
        let bp = integrate_flow(&geom, &(&x0 + &e), &sigma0, delta, 256).unwrap();
        let bm = integrate_flow(&geom, &(&x0 - &e), &sigma0, delta, 256).unwrap();
        let fd = (bp.tau0_delta() - bm.tau0_delta()) / (2.0 * h);
        for k in 0..2 {
            for a in 0..2 {
                let err = (fd[(k, a)] - b.d2phi.get(k, a, j)).abs();
                assert!(err < 1e-6, "{k}{a}{j}: {err}");
            }
        }
        // the flow's first variation as well
        let fd1 = (bp.x_delta() - bm.x_delta()) / (2.0 * h);
        assert!((fd1 - b.tau0_delta().column(j)).amax() < 1e-7);
    }
}

#[test]
fn flow_reports_domain_exit() {
    let geom = InducedGeometry::new(Arc::new(ScalarExp { kappa: -60.0, gamma: 0.1 }));
    let r = integrate_flow(&geom, &v(&[-1.0]), &Matrix::zeros(1, 1), 1.0, 64);
    assert!(matches!(r, Err(Error::DomainExit { .. })), "{r:?}");
    assert!(integrate_flow(&geom, &v(&[1.0]), &Matrix::zeros(1, 1), 1.0, 0).is_err());
}

#[test]
fn second_fundamental_form_examples() {
    let flat: ChartRef = Arc::new(FlatChart::new(2));
    let lin = ObservationMap::linear(
        Matrix::from_row_slice(2, 2, &[1.0, 2.0, -0.5, 0.3]),
        v(&[1.0, 0.0]),
        0.1,
        Matrix::identity(2, 2),
    )
    .unwrap();
    let (x, a, b) = (v(&[0.3, 0.7]), v(&[1.0, -1.0]), v(&[0.2, 0.5]));
    assert_eq!(second_fundamental_form(&lin, flat.as_ref(), &x, &a, &b).unwrap(), Vector::zeros(2));

    let geom: ChartRef = Arc::new(InducedGeometry::new(ModelSpec::default_for("warped-2d").unwrap().build(0.1).unwrap()));
    let id = ObservationMap::identity(geom.clone(), 0.1, Matrix::identity(2, 2));
    let r = second_fundamental_form(&id, geom.as_ref(), &x, &a, &b).unwrap();
    assert!(r.amax() < 1e-15);

    let mut c = Bilinear::zeros(2, 2);
    c.set(0, 0, 0, 2.0);
    let sq = ObservationMap::quadratic(
        Matrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]),
        c,
        Vector::zeros(2),
        0.1,
        Matrix::identity(2, 2),
    )
    .unwrap();
    assert_eq!(sq.psi(&[3.0, 2.0]), v(&[9.0, 2.0]));
    let e1 = v(&[1.0, 0.0]);
    assert_eq!(second_fundamental_form(&sq, flat.as_ref(), &x, &e1, &e1).unwrap(), v(&[2.0, 0.0]));
    let form = second_fundamental_form_bilinear(&sq, geom.as_ref(), &x).unwrap();
    for (u, w) in [(&a, &b), (&b, &e1)] {
        assert!((form.apply(u, w) - form.apply(w, u)).amax() < 1e-15);
    }
}

#[test]
fn observation_derivatives_match_finite_differences() {
    let spec: ObservationSpec = serde_json::from_str(
        r#"{"name": "quadratic", "h": [[1.0, 0.5]], "c": [[[0.4, -0.2], [-0.2, 1.0]]], "offset": [0.1], "beta": 2.0}"#,
    )
    .unwrap();
    let obs = spec.build(Arc::new(FlatChart::new(2)), 0.1).unwrap();
    assert_eq!(obs.q(), 1);
    assert!((obs.beta(&[0.0]) - Matrix::from_element(1, 1, 0.02)).amax() < 1e-16);
    let x = [0.3, -0.8];
    let h = 1e-5;
    for j in 0..2 {
        let mut xp = x;
        let mut xm = x;
        xp[j] += h;
        xm[j] -= h;
        let fd = (obs.psi(&xp) - obs.psi(&xm)) / (2.0 * h);
        assert!((fd[0] - obs.jacobian(&x)[(0, j)]).abs() < 1e-6);
        let fd2 = (obs.jacobian(&xp) - obs.jacobian(&xm)) / (2.0 * h);
        for i in 0..2 {
            assert!((fd2[(0, i)] - obs.hessian(&x).get(0, i, j)).abs() < 1e-6);
        }
    }
    let bad = serde_json::from_str::<ObservationSpec>(r#"{"name": "identity", "bta": 1}"#);
    assert!(bad.is_err());
}

#[test]
fn ailp_reductions() {
    let a = Matrix::from_row_slice(2, 2, &[-1.0, 0.5, 0.0, -0.5]);
    let geom = InducedGeometry::new(flat_linear(a, Matrix::identity(2, 2), 0.1));
    let sigma0 = Matrix::identity(2, 2) * 0.01;
    let b = integrate_flow(&geom, &v(&[1.0, 1.0]), &sigma0, 0.05, 64).unwrap();
    let lin = ObservationMap::linear(Matrix::from_row_slice(1, 2, &[1.0, -1.0]), v(&[0.2]), 0.1, Matrix::identity(1, 1)).unwrap();
    assert!(ailp(&b, &geom, Some(&lin)).unwrap().amax() < 1e-15);
    assert!(ailp(&b, &geom, None).unwrap().amax() < 1e-15);

    let geom = InducedGeometry::new(ModelSpec::default_for("warped-2d").unwrap().build(0.1).unwrap());
    let b = integrate_flow(&geom, &v(&[0.4, -0.3]), &(Matrix::identity(2, 2) * 0.01), 0.05, 64).unwrap();
    let id = ObservationMap::identity(Arc::new(geom.clone()), 0.1, Matrix::identity(2, 2));
    let state = ailp(&b, &geom, None).unwrap();
    assert!(state.amax() > 0.0);
    assert!((ailp(&b, &geom, Some(&id)).unwrap() - state).amax() < 1e-17);
}
