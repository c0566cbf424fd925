use std::f64::consts::PI;

use intrinsic_filter::linalg::{Matrix, Vector};
use intrinsic_filter::manifold::*;
use intrinsic_filter::mc::order_fit;
use intrinsic_filter::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn v2(a: f64, b: f64) -> Vector {
    Vector::from_vec(vec![a, b])
}

fn curved_charts() -> Vec<ChartRef> {
    let none = ChartParams::new();
    vec![
        builtin_chart("sphere-stereo", &none).unwrap(),
        builtin_chart("poincare-half-plane", &none).unwrap(),
        builtin_chart("warped-r2", &none).unwrap(),
        builtin_chart("sphere-polar", &none).unwrap(),
    ]
}

fn random_point(chart: &dyn Chart, rng: &mut ChaCha8Rng) -> Vector {
    match chart.name().as_str() {
        "poincare-half-plane" => v2(rng.random_range(-1.0..1.0), rng.random_range(0.5..2.0)),
        "sphere-polar" => v2(rng.random_range(0.5..2.5), rng.random_range(-3.0..3.0)),
        _ => v2(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
    }
}

fn random_vec(rng: &mut ChaCha8Rng) -> Vector {
    v2(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
}

#[test]
fn covariant_derivative_examples() {
    let flat = FlatChart::new(2);
    let (y, yp, v, vp) = (v2(0.3, 0.1), v2(1.0, 2.0), v2(-1.0, 0.5), v2(0.7, 0.2));
    assert_eq!(covariant_derivative(&flat, &y, &yp, &v, &vp).unwrap(), vp);

    let sphere = ConformalChart::sphere_stereo(2, 10.0);
    let gamma = connector(&sphere, &y).unwrap();
    let parallel = -gamma.apply(&v, &yp);
    assert!(covariant_derivative(&sphere, &y, &yp, &v, &parallel).unwrap().norm() < 1e-15);

    let half = ConformalChart::half_plane(2);
    let r = covariant_derivative(&half, &v2(0.0, 1.0), &v2(1.0, 0.0), &v2(1.0, 0.0), &v2(0.0, 0.0)).unwrap();
    // Γ²₁₁ = 1/x₂ is the only contribution
    assert!((r - v2(0.0, 1.0)).norm() < 1e-15);

    assert!(matches!(
        covariant_derivative(&half, &v2(0.0, -1.0), &yp, &v, &vp),
        Err(Error::Domain { .. })
    ));
}

#[test]
fn curvature_examples() {
    let flat = FlatChart::new(3);
    let x = Vector::from_vec(vec![0.1, 0.2, 0.3]);
    let u = Vector::from_vec(vec![1.0, 0.0, 2.0]);
    assert_eq!(curvature(&flat, &x, &u, &u, &x).unwrap().norm(), 0.0);

    let sphere = SpherePolarChart { margin: 1e-3 };
    let p = v2(1.0, 0.3);
    let s = p[0].sin();
    let (e1, e2) = (v2(1.0, 0.0), v2(0.0, 1.0 / s));
    let w = v2(0.4, -0.9);
    assert!(curvature(&sphere, &p, &w, &w, &e1).unwrap().norm() < 1e-15);

    // constant curvature +1 under this sign convention: R(u,v)w = ⟨u,w⟩v − ⟨v,w⟩u
    let r = curvature(&sphere, &p, &e1, &e2, &e2).unwrap();
    assert!((&r + &e1).norm() < 1e-9, "{r}");
    assert!((sectional_curvature(&sphere, &p, &e1, &e2).unwrap() - 1.0).abs() < 1e-9);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let q = random_point(&sphere, &mut rng);
        let (a, b, c) = (random_vec(&mut rng), random_vec(&mut rng), random_vec(&mut rng));
        let g = sphere.metric(q.as_slice()).unwrap();
        let closed = &b * a.dot(&(&g * &c)) - &a * b.dot(&(&g * &c));
        assert!((curvature(&sphere, &q, &a, &b, &c).unwrap() - closed).norm() < 1e-9);
    }
}

#[test]
fn curvature_is_antisymmetric_exactly_and_satisfies_bianchi() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for chart in curved_charts() {
        for _ in 0..100 {
            let x = random_point(chart.as_ref(), &mut rng);
            let (u, v, w) = (random_vec(&mut rng), random_vec(&mut rng), random_vec(&mut rng));
            let a = curvature(chart.as_ref(), &x, &u, &v, &w).unwrap();
            let b = curvature(chart.as_ref(), &x, &v, &u, &w).unwrap();
            assert_eq!(a + b, Vector::zeros(2), "{}", chart.name());
            let bianchi = curvature(chart.as_ref(), &x, &u, &v, &w).unwrap()
                + curvature(chart.as_ref(), &x, &v, &w, &u).unwrap()
                + curvature(chart.as_ref(), &x, &w, &u, &v).unwrap();
            assert!(bianchi.norm() < 1e-9, "{} {}", chart.name(), bianchi.norm());
        }
    }
}

#[test]
fn sectional_curvature_of_model_spaces() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let sphere = ConformalChart::sphere_stereo(2, 10.0);
    let half = ConformalChart::half_plane(2);
    for _ in 0..50 {
        let (u, v) = (random_vec(&mut rng), random_vec(&mut rng));
        let x = random_point(&sphere, &mut rng);
        assert!((sectional_curvature(&sphere, &x, &u, &v).unwrap() - 1.0).abs() < 1e-6);
        let y = random_point(&half, &mut rng);
        assert!((sectional_curvature(&half, &y, &u, &v).unwrap() + 1.0).abs() < 1e-6);
    }
    let warped = WarpedR2Chart;
    // K = −h''/h for g = dr² + h(r)²dθ², h = sqrt(1 + r²)
    let x = v2(0.5, 0.0);
    let k = sectional_curvature(&warped, &x, &v2(1.0, 0.0), &v2(0.0, 1.0)).unwrap();
    assert!((k + 1.0 / (1.0f64 + 0.25).powi(2)).abs() < 1e-9, "{k}");
}

#[test]
fn exp_taylor_examples() {
    let flat = FlatChart::new(2);
    let (y, v) = (v2(0.3, -0.4), v2(2.0, 1.0));
    assert_eq!(exp_taylor(&flat, &y, &v, 0.5).unwrap(), &y + &v * 0.5);
    let sphere = ConformalChart::sphere_stereo(2, 10.0);
    assert_eq!(exp_taylor(&sphere, &y, &v, 0.0).unwrap(), y);

    let half = ConformalChart::half_plane(2);
    let y = v2(0.0, 1.0);
    let v = v2(0.0, 1.0);
    let approx = exp_taylor(&half, &y, &v, 0.1).unwrap();
    let (exact, _) = geodesic_integrate(&half, &y, &v, 0.1, 10_000).unwrap();
    // vertical geodesic: x₂(t) = e^t
    assert!((exact[1] - 0.1f64.exp()).abs() < 1e-13);
    let err = (approx - exact).norm();
    assert!(err < 1e-4 && err > 1e-7, "{err}");
}

#[test]
fn exp_taylor_converges_at_fourth_order() {
    let ts = [0.2, 0.1, 0.05, 0.025];
    for (chart, y, v) in [
        (builtin_chart("sphere-stereo", &ChartParams::new()).unwrap(), v2(0.3, -0.2), v2(0.8, 0.6)),
        (builtin_chart("poincare-half-plane", &ChartParams::new()).unwrap(), v2(0.1, 1.2), v2(0.7, -0.5)),
    ] {
        let errs: Vec<f64> = ts
            .iter()
            .map(|&t| {
                let (b, _) = geodesic_integrate(chart.as_ref(), &y, &v, t, 1024).unwrap();
                (exp_taylor(chart.as_ref(), &y, &v, t).unwrap() - b).norm()
            })
            .collect();
        let fit = order_fit(&ts, &errs).unwrap();
        assert!(fit.slope >= 3.7 && fit.slope <= 4.3 && fit.r2 >= 0.99, "{}: {fit:?}", chart.name());
    }
}

#[test]
fn log_taylor_examples_and_round_trip() {
    let flat = FlatChart::new(2);
    let (y, z) = (v2(1.0, 2.0), v2(1.5, 1.0));
    assert_eq!(log_taylor(&flat, &y, &z).unwrap(), v2(0.5, -1.0));
    let sphere = ConformalChart::sphere_stereo(2, 10.0);
    assert_eq!(log_taylor(&sphere, &y, &y).unwrap(), Vector::zeros(2));

    let y = v2(0.4, 0.1);
    let dir = v2(0.6, -0.8);
    let scales = [0.1, 0.05, 0.025];
    let errs: Vec<f64> = scales
        .iter()
        .map(|&s| {
            let v = &dir * s;
            let z = exp_taylor(&sphere, &y, &v, 1.0).unwrap();
            (log_taylor(&sphere, &y, &z).unwrap() - v).norm()
        })
        .collect();
    let fit = order_fit(&scales, &errs).unwrap();
    assert!(fit.slope >= 3.7, "{fit:?}");
}

#[test]
fn geodesic_examples() {
    let flat = FlatChart::new(2);
    let (b, bp) = geodesic_integrate(&flat, &v2(1.0, 1.0), &v2(0.5, -2.0), 2.0, 7).unwrap();
    assert!((b - v2(2.0, -3.0)).norm() < 1e-15 && (bp - v2(0.5, -2.0)).norm() < 1e-15);

    let sphere = ConformalChart::sphere_stereo(2, 10.0);
    let y = v2(0.2, 0.7);
    let v = v2(0.3, -0.1);
    let v = &v / norm(&sphere, &y, &v).unwrap();
    for k in 1..=10 {
        let t = k as f64 / 10.0;
        let (b, bp) = geodesic_integrate(&sphere, &y, &v, t, (1000.0 * t) as usize).unwrap();
        assert!((norm(&sphere, &b, &bp).unwrap() - 1.0).abs() < 1e-10);
    }

    let half = ConformalChart::half_plane(2);
    let (b, _) = geodesic_integrate(&half, &v2(0.0, 1.0), &v2(1.0, 0.0), 1.0, 1024).unwrap();
    let exact = v2(1.0f64.tanh(), 1.0 / 1.0f64.cosh());
    assert!((b - exact).norm() < 1e-10);

}

#[test]
fn geodesic_domain_exit_names_the_step() {
    let sphere = ConformalChart::sphere_stereo(2, 3.0);
    let r = geodesic_integrate(&sphere, &v2(0.0, 0.0), &v2(3.0, 0.0), 1.0, 100);
    match r {
        Err(Error::DomainExit { step, .. }) => assert!(step > 1 && step <= 100),
        other => panic!("expected a domain exit, got {other:?}"),
    }
}

#[test]
fn parallel_transport_examples() {
    let flat = FlatChart::new(2);
    let path: Vec<Vector> = (0..10).map(|i| v2(i as f64, (i * i) as f64)).collect();
    let v = v2(0.3, 0.4);
    assert!((parallel_transport_integrate(&flat, &path, &v, 4).unwrap() - &v).norm() < 1e-15);

    let half = ConformalChart::half_plane(2);
    let path: Vec<Vector> = (0..=200).map(|i| {
        let s = i as f64 / 200.0;
        v2(s.sin(), 1.0 + s * s)
    }).collect();
    let w = parallel_transport_integrate(&half, &path, &v, 8).unwrap();
    let n0 = norm(&half, &path[0], &v).unwrap();
    let n1 = norm(&half, path.last().unwrap(), &w).unwrap();
    assert!((n0 - n1).abs() < 1e-10);
}

#[test]
fn holonomy_of_octant_triangle_is_its_area() {
    // south pole at the origin; equator is the unit circle; meridians are rays
    let sphere = ConformalChart::sphere_stereo(2, 10.0);
    let mut path = vec![v2(0.0, 0.0), v2(1.0, 0.0)];
    let n = 4000;
    for i in 1..=n {
        let a = PI / 2.0 * i as f64 / n as f64;
        path.push(v2(a.cos(), a.sin()));
    }
    path.push(v2(0.0, 0.0));
    let v = v2(1.0, 0.0);
    let w = parallel_transport_integrate(&sphere, &path, &v, 4).unwrap();
    let angle = w[1].atan2(w[0]);
    assert!((angle.abs() - PI / 2.0).abs() < 1e-5, "{angle}");
}

#[test]
fn numerical_log_inverts_geodesic_exp() {
    let opts = LogOptions::default();
    for chart in curved_charts() {
        let y = match chart.name().as_str() {
            "poincare-half-plane" => v2(0.2, 1.1),
            "sphere-polar" => v2(1.2, 0.3),
            _ => v2(0.2, -0.3),
        };
        let v = v2(0.31, -0.17);
        let z = exp_geodesic(chart.as_ref(), &y, &v, 64).unwrap();
        let back = log_numeric(chart.as_ref(), &y, &z, &opts).unwrap();
        assert!((back - &v).norm() < 1e-12, "{}", chart.name());
    }
}

#[test]
fn linear_chart_change_preserves_geometry() {
    let inner: ChartRef = std::sync::Arc::new(ConformalChart::sphere_stereo(2, 10.0));
    let t = Matrix::from_row_slice(2, 2, &[1.5, 0.3, -0.2, 0.8]);
    let lin = LinearChart::new(inner.clone(), t.clone(), vec![0.2, -0.1]).unwrap();
    let x = v2(0.3, 0.4);
    let v = v2(0.2, -0.1);
    let b = exp_geodesic(inner.as_ref(), &x, &v, 256).unwrap();
    let xt = Vector::from_vec(lin.forward(x.as_slice()));
    let bt = exp_geodesic(&lin, &xt, &(&t * &v), 256).unwrap();
    let back = Vector::from_vec(lin.backward(bt.as_slice()));
    assert!((back - b).norm() < 1e-12);
    let k = sectional_curvature(&lin, &xt, &v2(1.0, 0.0), &v2(0.0, 1.0)).unwrap();
    assert!((k - 1.0).abs() < 1e-9);
}
