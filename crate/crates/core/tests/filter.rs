use std::sync::Arc;

use intrinsic_filter::diffusion::*;
use intrinsic_filter::filter::*;
use intrinsic_filter::gaussian_cond::conditional_gaussian;
use intrinsic_filter::linalg::{min_eigenvalue, Bilinear, Matrix, Vector};
use intrinsic_filter::manifold::{geodesic_integrate, FlatChart, LogOptions, SpherePolarChart};
use intrinsic_filter::Error;
use proptest::prelude::*;

fn v(xs: &[f64]) -> Vector {
    Vector::from_column_slice(xs)
}

fn m2(xs: [f64; 4]) -> Matrix {
    Matrix::from_row_slice(2, 2, &xs)
}

/// Van Loan: `(e^{Aδ}, ∫e^{As}ds c, Q)` for `dx = (Ax + c)dt + dW`, `Var dW = α dt`.
fn discretize(a: &Matrix, c: &Vector, alpha: &Matrix, delta: f64) -> (Matrix, Vector, Matrix) {
    let p = a.nrows();
    let mut m = Matrix::zeros(2 * p, 2 * p);
    m.view_mut((0, 0), (p, p)).copy_from(&(-a * delta));
    m.view_mut((0, p), (p, p)).copy_from(&(alpha * delta));
    m.view_mut((p, p), (p, p)).copy_from(&(a.transpose() * delta));
    let e = m.exp();
    let f12 = e.view((0, p), (p, p)).into_owned();
    let f22 = e.view((p, p), (p, p)).into_owned();
    let ead = f22.transpose();
    let q = &ead * f12;

    let mut aug = Matrix::zeros(p + 1, p + 1);
    aug.view_mut((0, 0), (p, p)).copy_from(&(a * delta));
    aug.view_mut((0, p), (p, 1)).copy_from(&(c * delta));
    let shift = aug.exp().view((0, p), (p, 1)).column(0).into_owned();
    (ead, shift, q)
}

struct Linear {
    a: Matrix,
    c: Vector,
    alpha: Matrix,
    h: Matrix,
    d: Vector,
    r: Matrix,
    geom: InducedGeometry,
    obs: ObservationMap,
}

fn linear(gamma: f64) -> Linear {
    let a = m2([-0.8, 0.3, -0.2, -0.4]);
    let c = v(&[0.1, -0.3]);
    let s = m2([1.0, 0.0, 0.3, 0.7]);
    let h = m2([1.0, 0.5, 0.0, 1.2]);
    let d = v(&[0.2, -0.1]);
    let beta0 = m2([0.5, 0.1, 0.1, 0.4]);
    let model = FlatLinear::new(a.clone(), c.clone(), s.clone(), gamma).unwrap();
    Linear {
        alpha: &s * s.transpose() * (gamma * gamma),
        r: &beta0 * (gamma * gamma),
        obs: ObservationMap::linear(h.clone(), d.clone(), gamma, beta0).unwrap(),
        geom: InducedGeometry::new(Arc::new(model)),
        a,
        c,
        h,
        d,
    }
}

fn warped(gamma: f64) -> InducedGeometry {
    InducedGeometry::new(Arc::new(Warped2d {
        kappa: 1.0,
        c: 0.5,
        gamma,
    }))
}

fn quadratic_obs(gamma: f64) -> ObservationMap {
    let h = m2([1.0, 0.2, -0.1, 0.9]);
    let c = Bilinear::from_matrices(&[m2([0.6, 0.2, 0.2, -0.3]), m2([0.0, 0.5, 0.5, 0.4])]).unwrap();
    ObservationMap::quadratic(h, c, Vector::zeros(2), gamma, Matrix::identity(2, 2)).unwrap()
}

fn sphere_obs(gamma: f64) -> ObservationMap {
    ObservationMap::new(
        "sphere",
        2,
        Arc::new(SpherePolarChart { margin: 0.05 }),
        gamma,
        |x| v(&[1.0 + 0.3 * x[0], 0.5 + 0.4 * x[1] + 0.1 * x[0] * x[0]]),
        |x| m2([0.3, 0.0, 0.2 * x[0], 0.4]),
        |_| Bilinear::from_matrices(&[Matrix::zeros(2, 2), m2([0.2, 0.0, 0.0, 0.0])]).unwrap(),
        |_| Matrix::identity(2, 2),
    )
}

fn max_diff(a: &Matrix, b: &Matrix) -> f64 {
    (a - b).amax()
}

#[test]
fn flat_linear_prediction_is_the_gaussian_transition() {
    let case = linear(0.6);
    let sigma0 = m2([0.04, 0.01, 0.01, 0.02]);
    let belief = FilterBelief::new(v(&[0.5, -0.2]), sigma0.clone()).unwrap();
    let pred = predict(&case.geom, &case.obs, &belief, 0.7, 128).unwrap();
    let (ead, shift, q) = discretize(&case.a, &case.c, &case.alpha, 0.7);
    assert!((pred.x_delta() - (&ead * &belief.base + shift)).amax() < 1e-10);
    assert!(max_diff(pred.xi_delta(), &(&ead * &sigma0 * ead.transpose() + q)) < 1e-10);
    assert!(pred.ailp_state.amax() < 1e-14);
    assert!(pred.ailp_obs.amax() < 1e-14);
    assert!(max_diff(&pred.j, &case.h) == 0.0);
    assert!(max_diff(&pred.beta_delta, &case.r) < 1e-15);
}

#[test]
fn short_horizon_prediction_keeps_the_prior() {
    let geom = warped(0.3);
    let obs = quadratic_obs(0.3);
    let sigma0 = m2([0.02, 0.005, 0.005, 0.03]);
    let belief = FilterBelief::new(v(&[0.4, 0.3]), sigma0.clone()).unwrap();
    let pred = predict(&geom, &obs, &belief, 1e-8, 1).unwrap();
    assert!(max_diff(pred.xi_delta(), &sigma0) < 1e-6);
    assert!((pred.x_delta() - &belief.base).amax() < 1e-6);
    assert!(pred.ailp_state.amax() < 1e-6);
    // the observation AILP keeps the static ½∇dψ(Σ₀) term
    let static_term = second_fundamental_form_bilinear(&obs, &geom, &belief.base).unwrap().contract(&sigma0) * 0.5;
    assert!((&pred.ailp_obs - static_term).amax() < 1e-6);
}

#[test]
fn prediction_rejects_bad_inputs() {
    let geom = warped(0.3);
    let obs = quadratic_obs(0.3);
    let belief = FilterBelief::new(v(&[0.4, 0.3]), Matrix::identity(2, 2) * 0.01).unwrap();
    assert!(matches!(predict(&geom, &obs, &belief, 0.0, 8), Err(Error::InvalidArgument(_))));
    assert!(FilterBelief::new(v(&[0.0, 0.0]), m2([1.0, 0.0, 0.0, -1.0])).is_err());
    assert!(FilterBelief::new(v(&[0.0, 0.0]), m2([1.0, 0.5, 0.0, 1.0])).is_err());
    let scalar = ObservationMap::identity(Arc::new(FlatChart::new(1)), 0.3, Matrix::identity(1, 1));
    assert!(matches!(predict(&geom, &scalar, &belief, 0.5, 8), Err(Error::Dimension { .. })));
}

#[test]
fn innovation_examples() {
    let opts = LogOptions::default();
    let case = linear(0.4);
    let belief = FilterBelief::new(v(&[0.1, 0.2]), Matrix::identity(2, 2) * 0.01).unwrap();
    let pred = predict(&case.geom, &case.obs, &belief, 0.5, 64).unwrap();
    let y1 = v(&[0.7, -0.3]);
    let z = innovation(&pred, &case.obs, &y1, &opts).unwrap();
    assert!((&z - (&y1 - &pred.psi_xdelta - &pred.ailp_obs)).amax() < 1e-15);
    assert!((&pred.psi_xdelta - (&case.h * pred.x_delta() + &case.d)).amax() < 1e-15);

    let geom = warped(0.3);
    let obs = sphere_obs(0.3);
    let belief = FilterBelief::new(v(&[0.3, 0.2]), m2([0.03, 0.01, 0.01, 0.02])).unwrap();
    let pred = predict(&geom, &obs, &belief, 0.5, 64).unwrap();
    assert!(pred.ailp_obs.amax() > 1e-4);
    let chart = obs.chart_m().as_ref();
    let (at_ailp, _) = geodesic_integrate(chart, &pred.psi_xdelta, &pred.ailp_obs, 1.0, 256).unwrap();
    assert!(innovation(&pred, &obs, &at_ailp, &opts).unwrap().amax() < 1e-10);
    for w in [v(&[0.2, -0.1]), v(&[-0.05, 0.3]), v(&[0.0, 0.0])] {
        let (y1, _) = geodesic_integrate(chart, &pred.psi_xdelta, &w, 1.0, 256).unwrap();
        let z = innovation(&pred, &obs, &y1, &opts).unwrap();
        assert!((&z + &pred.ailp_obs - &w).amax() < 1e-10, "{z} {w}");
    }
}

#[test]
fn gain_examples() {
    let (s, r) = (0.3, 0.2);
    let g = kalman_gain(&(Matrix::identity(3, 3) * s), &Matrix::identity(3, 3), &(Matrix::identity(3, 3) * r)).unwrap();
    assert!(max_diff(&g, &(Matrix::identity(3, 3) * (s / (s + r)))) < 1e-15);

    let xi = m2([0.5, 0.1, 0.1, 0.3]);
    let j = m2([1.0, 0.4, -0.2, 0.7]);
    let g = kalman_gain(&xi, &j, &(Matrix::identity(2, 2) * 1e12)).unwrap();
    assert!(g.amax() <= 1e-10);

    let geom = warped(0.3);
    let obs = quadratic_obs(0.3);
    let belief = FilterBelief::new(v(&[0.4, -0.2]), m2([0.03, 0.01, 0.01, 0.02])).unwrap();
    let pred = predict(&geom, &obs, &belief, 0.5, 64).unwrap();
    let g = gain(&pred).unwrap();
    let xi = pred.xi_delta();
    let s_zz = &pred.j * xi * pred.j.transpose() + &pred.beta_delta;
    let zero = Vector::zeros(2);
    for k in 0..2 {
        let e = Vector::from_fn(2, |i, _| if i == k { 1.0 } else { 0.0 });
        let (m, c) = conditional_gaussian(xi, &(&pred.j * xi), &s_zz, &e, &zero).unwrap();
        assert!((g.column(k) - m).amax() < 1e-12);
        assert!(max_diff(&c, &((Matrix::identity(2, 2) - &g * &pred.j) * xi)) < 1e-12);
    }
}

fn spd(entries: &[f64], n: usize, floor: f64) -> Matrix {
    let l = Matrix::from_row_slice(n, n, entries);
    &l * l.transpose() + Matrix::identity(n, n) * floor
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn posterior_covariance_identity(
        xe in proptest::collection::vec(-1.0..1.0f64, 9),
        be in proptest::collection::vec(-1.0..1.0f64, 4),
        je in proptest::collection::vec(-2.0..2.0f64, 6),
    ) {
        let xi = spd(&xe, 3, 0.05);
        let beta = spd(&be, 2, 0.05);
        let j = Matrix::from_row_slice(2, 3, &je);
        let g = kalman_gain(&xi, &j, &beta).unwrap();
        let s = &j * &xi * j.transpose() + &beta;
        let direct = &xi - &xi * j.transpose() * s.try_inverse().unwrap() * &j * &xi;
        let post = (Matrix::identity(3, 3) - &g * &j) * &xi;
        prop_assert!(max_diff(&direct, &post) < 1e-12);
        let sym = (&post + post.transpose()) * 0.5;
        prop_assert!(min_eigenvalue(&(&xi - &sym)) > -1e-12);
    }
}

#[test]
fn update_examples() {
    let geom = warped(0.3);
    let obs = quadratic_obs(0.3);
    let belief = FilterBelief::new(v(&[0.4, -0.2]), m2([0.03, 0.01, 0.01, 0.02])).unwrap();
    let pred = predict(&geom, &obs, &belief, 0.5, 64).unwrap();
    let upd = update(&pred, &geom, &obs, &Vector::zeros(2)).unwrap();
    assert!(upd.rho_mean.amax() > 1e-5);
    assert!((&upd.mu_hat - (&pred.ailp_state - &upd.rho_mean)).amax() < 1e-15);
    assert!(max_diff(&upd.sigma_hat, &upd.sigma_hat.transpose()) == 0.0);
    assert!(min_eigenvalue(&(pred.xi_delta() - &upd.sigma_hat)) > -1e-12);

    // ρ̄ is the trace pairing of ρ with GJΞ
    let g = gain(&pred).unwrap();
    let rho = rho_form(&pred, &geom, &obs, &g).unwrap();
    let gjx = &g * &pred.j * pred.xi_delta();
    for k in 0..2 {
        let expect = (rho.component(k) * &gjx).trace();
        assert!((upd.rho_mean[k] - expect).abs() < 1e-14);
    }

    // the quadratic part acts through Gz
    let z = v(&[0.05, -0.08]);
    let upd2 = update(&pred, &geom, &obs, &z).unwrap();
    let gz = &g * &z;
    let expect = &pred.ailp_state + &gz + rho.apply(&gz, &gz) - &upd.rho_mean;
    assert!((&upd2.mu_hat - expect).amax() < 1e-15);
    assert!(matches!(update(&pred, &geom, &obs, &v(&[1.0])), Err(Error::Dimension { .. })));
}

#[test]
fn flat_linear_update_is_the_kalman_update() {
    let case = linear(0.5);
    let sigma0 = m2([0.05, 0.0, 0.0, 0.04]);
    let belief = FilterBelief::new(v(&[0.3, 0.1]), sigma0).unwrap();
    let pred = predict(&case.geom, &case.obs, &belief, 0.4, 128).unwrap();
    let g = gain(&pred).unwrap();
    let rho = rho_form(&pred, &case.geom, &case.obs, &g).unwrap();
    assert!(rho.max_abs() < 1e-14);
    let z = v(&[0.2, -0.1]);
    let upd = update(&pred, &case.geom, &case.obs, &z).unwrap();
    let p = pred.xi_delta();
    let k = p * case.h.transpose() * (&case.h * p * case.h.transpose() + &case.r).try_inverse().unwrap();
    assert!((&upd.mu_hat - &k * &z).amax() < 1e-12);
    assert!(max_diff(&upd.sigma_hat, &((Matrix::identity(2, 2) - &k * &case.h) * p)) < 1e-12);
    assert!((&upd.new_base - (pred.x_delta() + &upd.mu_hat)).amax() < 1e-15);
}

#[test]
fn recenter_examples() {
    let flat = FlatChart::new(2);
    let x = v(&[0.3, -0.4]);
    let mu = v(&[0.1, 0.05]);
    let sig = m2([0.02, 0.01, 0.01, 0.03]);
    assert!((recenter(&flat, &x, &mu, &sig).unwrap() - (&x + &mu)).amax() < 1e-15);

    let geom = warped(0.4);
    let y = recenter(&geom, &x, &Vector::zeros(2), &sig).unwrap();
    assert!((&y - &x).amax() < 1e-15);
    // on a curved chart the correction is active for nonzero μ̂
    let corrected = recenter_vector(&geom, &x, &mu, &sig).unwrap();
    assert!((&corrected - &mu).amax() > 1e-6);

    let sphere = SpherePolarChart { margin: 0.05 };
    let base = v(&[1.0, 0.2]);
    let w = recenter_vector(&sphere, &base, &mu, &sig).unwrap();
    let next = carry_belief(&sphere, &base, &w, &sig, recenter(&sphere, &base, &mu, &sig).unwrap()).unwrap();
    // parallel transport preserves the metric trace of Σ̂
    let g0 = m2([1.0, 0.0, 0.0, base[0].sin().powi(2)]);
    let (end, _) = geodesic_integrate(&sphere, &base, &w, 1.0, 256).unwrap();
    assert!((&end - &next.base).amax() < 1e-4);
    let g1 = m2([1.0, 0.0, 0.0, end[0].sin().powi(2)]);
    assert!(((&g0 * &sig).trace() - (&g1 * &next.sigma0).trace()).abs() < 1e-10);
}

#[test]
fn flat_linear_filter_equals_ekf_and_kalman_over_twenty_steps() {
    let case = linear(0.5);
    let delta = 0.3;
    let sigma0 = m2([0.06, 0.01, 0.01, 0.05]);
    let x0 = v(&[0.4, -0.3]);
    let opts = LogOptions::default();
    let observations: Vec<Vector> = (0..20)
        .map(|k| {
            let t = k as f64;
            v(&[0.3 * (0.7 * t).sin(), -0.2 + 0.25 * (0.4 * t).cos()])
        })
        .collect();
    let records = run_filter(
        &case.geom,
        &case.obs,
        &FilterBelief::new(x0.clone(), sigma0.clone()).unwrap(),
        delta,
        128,
        &observations,
        &opts,
    )
    .unwrap();

    let (ead, shift, q) = discretize(&case.a, &case.c, &case.alpha, delta);
    let mut m = x0.clone();
    let mut p = sigma0.clone();
    let mut ekf = EkfState {
        mean: x0,
        cov: sigma0,
    };
    for (rec, y) in records.iter().zip(&observations) {
        m = &ead * &m + &shift;
        p = &ead * &p * ead.transpose() + &q;
        let k = &p * case.h.transpose() * (&case.h * &p * case.h.transpose() + &case.r).try_inverse().unwrap();
        let innov = y - &case.h * &m - &case.d;
        assert!((&rec.zhat - &innov).amax() < 1e-10);
        m = &m + &k * innov;
        p = (Matrix::identity(2, 2) - &k * &case.h) * &p;

        ekf = ekf_update(&ekf_predict(&case.geom, &ekf, delta, 128).unwrap(), &case.obs, y, &opts).unwrap();
        assert!((&rec.x0_prime - &m).amax() < 1e-10);
        assert!(max_diff(&rec.next.sigma0, &p) < 1e-10);
        assert!((&ekf.mean - &m).amax() < 1e-10);
        assert!(max_diff(&ekf.cov, &p) < 1e-10);
        assert!((&rec.x0_prime - &ekf.mean).amax() < 1e-10);
    }
}

#[test]
fn ekf_differs_on_a_warped_model_with_quadratic_observation() {
    let opts = LogOptions::default();
    let mut diffs = vec![];
    for gamma in [0.2, 0.1, 0.05] {
        let geom = warped(gamma);
        let obs = quadratic_obs(gamma);
        let sigma0 = m2([0.5, 0.1, 0.1, 0.4]) * (gamma * gamma);
        let base = v(&[0.5, 0.4]);
        let belief = FilterBelief::new(base.clone(), sigma0.clone()).unwrap();
        let pred = predict(&geom, &obs, &belief, 0.5, 64).unwrap();
        let y1 = &pred.psi_xdelta + v(&[0.7, -0.4]) * gamma;
        let rec = filter_step(&geom, &obs, &belief, 0.5, 64, &y1, &opts).unwrap();
        let ekf = ekf_update(
            &ekf_predict(&geom, &EkfState { mean: base, cov: sigma0 }, 0.5, 64).unwrap(),
            &obs,
            &y1,
            &opts,
        )
        .unwrap();
        diffs.push((&rec.x0_prime - &ekf.mean).norm());
    }
    assert!(diffs.iter().all(|d| *d > 1e-8), "{diffs:?}");
    for w in diffs.windows(2) {
        let r = w[0] / w[1];
        assert!((3.0..5.5).contains(&r), "{diffs:?}");
    }
}
