"""QP solver, condensing algebra, receding-horizon controller."""

import numpy as np
import pytest

from conftest import make_linear_dataset
from ssolab import dictionary as dy, koopman as kp, mpc, plant, predictor as pr


def random_box_qp(rng, n):
    M = rng.standard_normal((n, n))
    H = M @ M.T + n * np.eye(n)
    f = rng.standard_normal(n) * 2
    lo = rng.uniform(-1.5, -0.2, n)
    hi = rng.uniform(0.2, 1.5, n)
    G = np.vstack([np.eye(n), -np.eye(n)])
    h = np.concatenate([hi, -lo])
    return mpc.QpProblem(H, f, G, h)


def test_qp_validation():
    with pytest.raises(np.linalg.LinAlgError):
        mpc.QpProblem(np.array([[0.0]]), np.zeros(1), np.zeros((0, 1)), np.zeros(0))
    with pytest.raises(ValueError):
        mpc.QpProblem(np.array([[1.0, 2.0], [0.0, 1.0]]), np.zeros(2),
                      np.zeros((0, 2)), np.zeros(0))


def test_unconstrained_matches_direct_solve():
    rng = np.random.default_rng(0)
    for _ in range(20):
        n = rng.integers(1, 7)
        M = rng.standard_normal((n, n))
        H = M @ M.T + n * np.eye(n)
        f = rng.standard_normal(n)
        qp = mpc.QpProblem(H, f, np.zeros((0, n)), np.zeros(0))
        sol = mpc.solve_qp(qp)
        assert np.max(np.abs(sol.u - np.linalg.solve(H, -f))) < 1e-9


def test_two_var_box_matches_enumeration():
    rng = np.random.default_rng(1)
    for _ in range(100):
        qp = random_box_qp(rng, 2)
        u = mpc.solve_qp(qp).u
        u_ref = mpc.brute_force_qp(qp)
        assert np.max(np.abs(u - u_ref)) < 1e-8


def test_pinned_feasible_point():
    H = np.eye(3) * 2.0
    f = np.array([1.0, -2.0, 0.5])
    G = np.vstack([np.eye(3), -np.eye(3)])
    h = np.zeros(6)               # u_min = u_max = 0
    sol = mpc.solve_qp(mpc.QpProblem(H, f, G, h))
    assert np.max(np.abs(sol.u)) < 1e-12


def test_kkt_residuals_small():
    rng = np.random.default_rng(2)
    for _ in range(50):
        n = int(rng.integers(2, 7))
        qp = random_box_qp(rng, n)
        sol = mpc.solve_qp(qp)
        stat, primal, comp, dual = mpc.kkt_residuals(qp, sol.u, sol.lam)
        assert stat < 1e-8 and primal < 1e-8 and comp < 1e-8 and dual >= -1e-10


def test_warm_start_equivalence():
    rng = np.random.default_rng(3)
    for _ in range(25):
        n = int(rng.integers(2, 6))
        qp = random_box_qp(rng, n)
        cold = mpc.solve_qp(qp).u
        warm = mpc.solve_qp(qp, u0=rng.uniform(-2, 2, n)).u
        assert np.max(np.abs(cold - warm)) < 1e-8


def test_infeasible_certificate():
    H = np.eye(2)
    f = np.zeros(2)
    G = np.array([[1.0, 0.0], [-1.0, 0.0]])
    h = np.array([-1.0, -1.0])    # x0 <= -1 and x0 >= 1
    with pytest.raises(mpc.QpInfeasibleError):
        mpc.solve_qp(mpc.QpProblem(H, f, G, h))


def _scalar_model(a):
    dic = dy.build_dictionary(("v_dc",), 1, include_constant=False)
    return kp._spectral(dic, np.array([[a]]), 0.01, 1, 1e-10, 0.0)


def test_build_qp_one_step_hand_algebra():
    # N=1, scalar everything: the stage term contains only y_0 (no u), so u
    # appears in the cost through r u^2 plus the terminal output term:
    # J(u) = q(c z0)^2 + r u^2 + q(c(a z0 + b0 u))^2
    a, b0, c, q, r = 0.9, 0.5, 1.0, 40.0, 0.01
    z0 = np.array([0.7])
    model = _scalar_model(a)
    cfg = mpc.MpcConfig(N_p=1, Q=[[q]], R=[[r]], u_min=-10, u_max=10)
    C = np.array([[c]])
    qp = mpc.build_qp(model, np.array([[b0]]), z0, cfg, C=C, y_ref=np.zeros(1))
    sol = mpc.solve_qp(qp)
    u_expected = -(q * c * b0 * (c * a * z0[0])) / (q * (c * b0) ** 2 + r)
    assert sol.u[0] == pytest.approx(u_expected, rel=1e-9)

    # explicit terminal weight variant: J = q(c z0)^2 + r u^2 + p (a z0 + b0 u)^2
    p_term = 3.0
    cfg2 = mpc.MpcConfig(N_p=1, Q=[[q]], R=[[r]], P_term=np.array([[p_term]]),
                         z_ref=np.zeros(1), u_min=-10, u_max=10)
    qp2 = mpc.build_qp(model, np.array([[b0]]), z0, cfg2, C=C, y_ref=np.zeros(1))
    sol2 = mpc.solve_qp(qp2)
    u2_expected = -(p_term * b0 * a * z0[0]) / (p_term * b0 ** 2 + r)
    assert sol2.u[0] == pytest.approx(u2_expected, rel=1e-9)


def test_build_qp_zero_state_zero_refs():
    model = _scalar_model(0.8)
    cfg = mpc.MpcConfig(N_p=5, Q=[[40.0]], R=[[0.01]])
    qp = mpc.build_qp(model, np.array([[0.3]]), np.zeros(1), cfg,
                      C=np.array([[1.0]]), y_ref=np.zeros(1))
    assert np.max(np.abs(qp.f)) == 0.0
    assert np.max(np.abs(mpc.solve_qp(qp).u)) < 1e-12
    np.linalg.cholesky(qp.H)      # strict convexity


def test_horizon_cost_monotone_with_zero_terminal():
    rng = np.random.default_rng(4)
    n = 3
    A = rng.standard_normal((n, n))
    A *= 0.85 / np.max(np.abs(np.linalg.eigvals(A)))
    dic = dy.build_dictionary(plant.STATE_NAMES[:n], 1, include_constant=False)
    model = kp._spectral(dic, A, 0.01, n, 1e-10, 0.0)
    B0 = rng.standard_normal((n, 1))
    C = np.zeros((1, n))
    C[0, 0] = 1.0
    z0 = rng.standard_normal(n)
    costs = []
    for N in (3, 6, 12, 24):
        cfg = mpc.MpcConfig(N_p=N, Q=[[5.0]], R=[[0.5]],
                            P_term=np.zeros((n, n)), z_ref=np.zeros(n))
        qp = mpc.build_qp(model, B0, z0, cfg, C=C, y_ref=np.zeros(1))
        costs.append(mpc.solve_qp(qp).cost)
    assert all(costs[i] <= costs[i + 1] + 1e-9 for i in range(len(costs) - 1))


def test_freeze_input_matrix_semantics(fitted, weak_params):
    klpv = fitted["klpv"]
    dic = klpv.model.dic
    x1 = fitted["ds_u"].X[:, 10]
    x2 = fitted["ds_u"].X[:, 5000]
    B1 = mpc.freeze_input_matrix(klpv, x1)
    B2 = mpc.freeze_input_matrix(klpv, x2)
    assert B1.shape == (klpv.model.m, 1)
    assert np.max(np.abs(B1 - B2)) > 0.0       # nonlinear dictionary: state-varying
    assert np.array_equal(B1, pr.input_matrix(dic, x1, klpv.b, klpv.model.dt_sample))

    # raw-state dictionary: constant regardless of x
    n = 3
    dic_raw = dy.build_dictionary(plant.STATE_NAMES[:n], 1, include_constant=False)
    model = kp._spectral(dic_raw, np.eye(n) * 0.5, 0.01, n, 1e-10, 0.0)
    b = np.array([[1.0], [0.0], [2.0]])
    kl = pr.KlpvPredictor(model, b)
    assert np.array_equal(mpc.freeze_input_matrix(kl, np.zeros(n)),
                          mpc.freeze_input_matrix(kl, np.ones(n)))


def test_mpc_step_zero_at_reference():
    rng = np.random.default_rng(5)
    n = 3
    A = rng.standard_normal((n, n)) * 0.3
    dic = dy.build_dictionary(plant.STATE_NAMES[:n], 1, include_constant=False)
    model = kp._spectral(dic, A, 0.01, n, 1e-10, 0.0)
    ctrl = mpc.DssoscController(pr.KltiPredictor(model, rng.standard_normal((n, 1))),
                                mpc.MpcConfig(N_p=8), plant.STATE_NAMES[0])
    res = ctrl.mpc_step(np.zeros(n), y_ref=np.zeros(1))
    assert np.max(np.abs(res.u0)) < 1e-6
    assert np.all(res.u_seq <= ctrl.cfg.u_max + 1e-12)
    assert np.all(res.u_seq >= ctrl.cfg.u_min - 1e-12)


def test_mpc_step_replay_consistency(fitted):
    klpv = fitted["klpv"]
    cfg = mpc.MpcConfig(N_p=12, Q=[[40.0]], R=[[0.5]])
    ctrl = mpc.DssoscController(klpv, cfg, "delta")
    x_k = fitted["ds_u"].X[:, 123]
    res = ctrl.mpc_step(x_k, y_ref=np.array([x_k[plant.IDX["delta"]]]))
    # replaying u* through the frozen-B model reproduces the predicted outputs
    z = dy.lift(klpv.model.dic, x_k)
    B0 = mpc.freeze_input_matrix(klpv, x_k)
    ys = [float((ctrl.C @ z)[0])]
    for uk in res.u_seq:
        z = klpv.model.A_d @ z + B0 @ uk
        ys.append(float((ctrl.C @ z)[0]))
    assert np.max(np.abs(np.array(ys) - res.y_pred)) < 1e-8
    assert max(res.kkt[:3]) < 1e-8


def test_controller_survives_infeasible_config(fitted):
    # u_min > u_max makes every QP infeasible; the controller must hold, not raise
    cfg = mpc.MpcConfig(N_p=4, u_min=0.1, u_max=-0.1)
    ctrl = mpc.DssoscController(fitted["klpv"], cfg, "delta")
    u = ctrl.step(0.0, fitted["ds_u"].X[:, 0])
    assert u == 0.0
    assert ctrl.failures == 1


def test_condensed_disturbance_term():
    # constant lifted disturbance shifts the free response like the model says
    a, b0 = 0.9, 0.4
    model = _scalar_model(a)
    cfg = mpc.MpcConfig(N_p=3, Q=[[1.0]], R=[[1e6]], u_min=-1, u_max=1)
    C = np.array([[1.0]])
    z0 = np.array([1.0])
    w = np.array([0.25])
    qp = mpc.build_qp(model, np.array([[b0]]), z0, cfg, C=C,
                      y_ref=np.zeros(1), w=w)
    # with huge R the cost constant reflects the w-shifted free outputs
    zs = [z0[0]]
    for _ in range(3):
        zs.append(a * zs[-1] + w[0])
    expected_const = sum(y * y for y in zs[:3]) + zs[3] ** 2
    assert qp.const == pytest.approx(expected_const, rel=1e-12)
