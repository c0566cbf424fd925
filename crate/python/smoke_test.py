"""Smoke test for the pyintrinsic extension module.

Build and install first:

    pip install maturin
    maturin develop --release -m crates/py/Cargo.toml

then run `python python/smoke_test.py`.
"""

import json
import math

import pyintrinsic as pi


def close(a, b, tol):
    return all(abs(x - y) <= tol for x, y in zip(a, b))


def check_geometry():
    # flat chart: the Taylor map is exact
    assert close(pi.exp_taylor("flat", [0.1, 0.2], [0.3, -0.4], params={"dim": 2}), [0.4, -0.2], 1e-15)
    y, v = [0.3, -0.2], [0.8, 0.6]
    errs = []
    for t in (0.2, 0.1, 0.05):
        a = pi.exp_taylor("sphere-stereo", y, v, t)
        b = pi.exp_geodesic("sphere-stereo", y, [t * x for x in v], 1024)
        errs.append(math.hypot(a[0] - b[0], a[1] - b[1]))
    slope = math.log(errs[0] / errs[2]) / math.log(4.0)
    assert 3.7 <= slope <= 4.3, slope
    k = pi.sectional_curvature("poincare-half-plane", [0.1, 1.2], [1.0, 0.0], [0.3, 1.0])
    assert abs(k + 1.0) < 1e-9, k


def check_barycentre():
    base = [0.2, -0.1]
    z = pi.exp_barycentre("flat", base, [0.05, 0.02], [[0.01, 0.0], [0.0, 0.01]], params={"dim": 2})
    assert close(z, [0.25, -0.08], 1e-14), z
    z = pi.exp_barycentre("sphere-stereo", base, [0.0, 0.0], [[0.01, 0.0], [0.0, 0.02]])
    assert z == base


def check_conditional():
    g2 = 0.01
    m = pi.QuadraticGaussian(
        var_u=[[g2]], cov_vu=[[g2 / 2]], var_v=[[g2]], cov_vz=[[g2 / 2]], var_z=[[g2]], lam=[[[0.0]]], theta=[[[0.0]]]
    )
    # Gaussian case: the linear regression of Z on V
    assert close(m.conditional_mean([0.1]), [0.05], 1e-15)
    assert close(m.conditional_var()[0], [g2 - g2 / 4], 1e-15)


def check_filter():
    gaps = json.loads(pi.flat_reduction())
    assert gaps["filter_vs_kalman"] < 1e-10 and gaps["ekf_vs_kalman"] < 1e-10, gaps
    steps = json.loads(pi.run_filter(json.dumps({"n_steps": 4, "seed": 3})))
    assert len(steps) == 4
    assert {"x_delta", "mu_hat", "sigma_hat", "x0_prime", "zhat"} <= set(steps[0])
    assert steps == json.loads(pi.run_filter(json.dumps({"n_steps": 4, "seed": 3})))
    try:
        pi.run_filter('{"n_step": 4}')
    except ValueError as e:
        assert "n_step" in str(e)
    else:
        raise AssertionError("unknown key accepted")


if __name__ == "__main__":
    check_geometry()
    check_barycentre()
    check_conditional()
    check_filter()
    print("pyintrinsic", pi.__version__, "smoke test passed")
