"""Phase-compensation baseline and the constant-input-matrix MPC variant."""

import cmath
import math

import numpy as np
import pytest

from ssolab import baselines as bl, dictionary as dy, koopman as kp, mpc, plant
from ssolab import predictor as pr


def cascade_response(params):
    secs = bl.csdc_discretize(params)

    def H(omega):
        return bl.discrete_response(secs, params.K_p, omega, params.dt_sample)
    return H


def test_dc_input_washes_out():
    secs = bl.csdc_discretize(bl.CsdcParams())
    out = 0.0
    for _ in range(3000):
        out = bl.csdc_step(secs, 0.20, 1.0)
    assert abs(out) < 1e-10


def test_magnitude_matches_analog_at_mode_frequency():
    params = bl.CsdcParams()
    omega = 2 * math.pi * 10.7
    Hd = cascade_response(params)(omega)
    Ha = bl.analog_response(params, omega)
    assert abs(abs(Hd) - abs(Ha)) / abs(Ha) < 0.02


def test_equal_lead_lag_constants_reduce_to_washout():
    params = bl.CsdcParams(T_1=0.05, T_2=0.05)
    omega = 2 * math.pi * 7.0
    Hd = cascade_response(params)(omega)
    wash_only = bl.CsdcParams(T_1=1.0, T_2=1.0)   # identity sections too
    Hw = cascade_response(wash_only)(omega)
    assert Hd == pytest.approx(Hw, rel=1e-12)
    # and the washout-only response matches its own analog within tustin error
    Ha = bl.analog_response(wash_only, omega)
    assert abs(Hd - Ha) / abs(Ha) < 0.02


def test_zero_input_zero_output():
    c = bl.CsdcController(bl.CsdcParams(), 0)
    for k in range(100):
        assert c.step(k * 0.002, [0.0]) == 0.0


def test_impulse_matches_convolution():
    params = bl.CsdcParams()
    secs = bl.csdc_discretize(params)
    n = 400
    h = []
    for k in range(n):
        h.append(bl.csdc_step(secs, params.K_p, 1.0 if k == 0 else 0.0))
    rng = np.random.default_rng(0)
    x = rng.standard_normal(n)
    secs2 = bl.csdc_discretize(params)
    y = np.array([bl.csdc_step(secs2, params.K_p, xi) for xi in x])
    y_conv = np.convolve(x, h)[:n]
    assert np.max(np.abs(y - y_conv)) < 1e-9


def test_sinusoid_steady_state_gain_phase():
    params = bl.CsdcParams()
    secs = bl.csdc_discretize(params)
    f = 10.7
    omega = 2 * math.pi * f
    dt = params.dt_sample
    n = 6000
    ys = []
    for k in range(n):
        ys.append(bl.csdc_step(secs, params.K_p, math.sin(omega * k * dt)))
    H_ref = cascade_response(params)(omega)
    tail = np.array(ys[-500:])
    ks = np.arange(n - 500, n)
    # least-squares fit of A sin + B cos on the steady tail
    M = np.column_stack([np.sin(omega * ks * dt), np.cos(omega * ks * dt)])
    ab = np.linalg.lstsq(M, tail, rcond=None)[0]
    H_meas = complex(ab[0], ab[1])   # y = Re{H} sin + Im{H} cos for x = sin
    assert abs(H_meas - H_ref) / abs(H_ref) < 0.01


def test_linearity_before_clamping():
    params = bl.CsdcParams()
    rng = np.random.default_rng(1)
    x1 = rng.standard_normal(200)
    x2 = rng.standard_normal(200)
    a, b = 0.7, -1.3

    def run(x):
        secs = bl.csdc_discretize(params)
        return np.array([bl.csdc_step(secs, params.K_p, xi) for xi in x])

    lhs = run(a * x1 + b * x2)
    rhs = a * run(x1) + b * run(x2)
    scale = max(1.0, np.max(np.abs(rhs)))
    assert np.max(np.abs(lhs - rhs)) / scale < 1e-12


def test_discretization_consistency_dt_halving():
    omega = 2 * math.pi * 10.7
    errs = []
    for dt in (4e-3, 2e-3, 1e-3, 5e-4):
        params = bl.CsdcParams(dt_sample=dt)
        Hd = cascade_response(params)(omega)
        Ha = bl.analog_response(params, omega)
        errs.append(abs(Hd - Ha))
    assert all(errs[i + 1] < errs[i] for i in range(len(errs) - 1))


def test_activation_gating_and_clamping():
    ctrl = bl.CsdcController(bl.CsdcParams(), 0, activation_time=0.1, u_limit=0.05)
    assert ctrl.step(0.0, [5.0]) == 0.0          # inactive
    u = ctrl.step(0.2, [5.0])
    assert abs(u) <= 0.05


def test_kltic_identical_to_klpv_on_linear_dictionary():
    # raw-state dictionary makes B_d(x) constant; with B set equal the two
    # controllers coincide
    rng = np.random.default_rng(2)
    n = 3
    A = rng.standard_normal((n, n)) * 0.4
    dic = dy.build_dictionary(plant.STATE_NAMES[:n], 1, include_constant=False)
    model = kp._spectral(dic, A, 0.01, n, 1e-10, 0.0)
    b = rng.standard_normal((n, 1))
    klpv = pr.KlpvPredictor(model, b)
    klti = pr.KltiPredictor(model, b * model.dt_sample)
    cfg = mpc.MpcConfig(N_p=10)
    c1 = mpc.DssoscController(klpv, cfg, plant.STATE_NAMES[0])
    c2 = bl.kltic_controller(klti, cfg, plant.STATE_NAMES[0])
    xs = rng.standard_normal((20, n)) * 0.3
    for k, x in enumerate(xs):
        u1 = c1.step(k * 0.01, x)
        u2 = c2.step(k * 0.01, x)
        assert u1 == pytest.approx(u2, abs=1e-12)


def test_kltic_zero_state_zero_refs():
    rng = np.random.default_rng(3)
    n = 2
    A = rng.standard_normal((n, n)) * 0.3
    dic = dy.build_dictionary(plant.STATE_NAMES[:n], 1, include_constant=False)
    model = kp._spectral(dic, A, 0.01, n, 1e-10, 0.0)
    ctrl = bl.kltic_controller(pr.KltiPredictor(model, rng.standard_normal((n, 1))),
                               mpc.MpcConfig(N_p=6), plant.STATE_NAMES[0])
    res = ctrl.mpc_step(np.zeros(n), y_ref=np.zeros(1))
    assert np.max(np.abs(res.u_seq)) < 1e-10


def test_params_validation():
    with pytest.raises(ValueError):
        bl.CsdcParams(T_w=-1.0)
    with pytest.raises(ValueError):
        bl.CsdcParams(T_2=0.0)
