"""Observable dictionary construction, evaluation and gradients."""

import math
from itertools import combinations_with_replacement

import numpy as np
import pytest

from ssolab import dictionary as dy


def test_counts_plain_states():
    d1 = dy.build_dictionary(("v_dc", "x_v"), 1, include_constant=True)
    assert d1.m == 3  # {1, x1, x2}
    d3 = dy.build_dictionary(("v_dc", "x_v"), 3, include_constant=True, mode="full")
    # enumeration oracle: all monomials of total degree <= 3 in two variables
    count = 1 + sum(1 for order in (1, 2, 3)
                    for _ in combinations_with_replacement(range(2), order))
    assert count == 10
    assert d3.m == 10


def test_trig_atoms_present_for_delta():
    d = dy.build_dictionary(("delta",), 1, include_constant=True)
    labels = d.term_labels()
    assert "sin(delta)" in labels and "cos(delta)" in labels


def test_term_ordering_and_uniqueness(default_dict):
    labels = default_dict.term_labels()
    assert labels[0] == "1"
    assert labels[1:15] == list(default_dict.state_subset)
    assert labels[15:17] == ["sin(delta)", "cos(delta)"]
    assert len(set(labels)) == len(labels)


def test_order_cap(default_dict):
    orders = default_dict.exponents.sum(axis=1)
    assert orders.max() <= default_dict.max_order


def test_curated_drops_exact_trig_dependencies(default_dict):
    # cos(delta)^2 = 1 - sin(delta)^2 would make the basis exactly dependent
    cos_col = default_dict.n_states + 1
    assert np.all(default_dict.exponents[:, cos_col] <= 1)
    full = dy.build_dictionary(default_dict.state_subset, 3, True, mode="full")
    assert np.any(full.exponents[:, cos_col] >= 2)


def test_lift_simple_values():
    d = dy.build_dictionary(("v_dc", "x_v"), 2, include_constant=True, mode="full")
    z = dy.lift(d, np.array([2.0, 3.0]))
    labels = d.term_labels()
    assert z[labels.index("1")] == 1.0
    assert z[labels.index("v_dc*x_v")] == 6.0
    assert z[labels.index("v_dc^2")] == 4.0


def test_lift_trig_values():
    d = dy.build_dictionary(("delta",), 1, include_constant=True)
    z = dy.lift(d, np.array([math.pi / 2]))
    labels = d.term_labels()
    assert z[labels.index("sin(delta)")] == pytest.approx(1.0, abs=1e-15)
    assert z[labels.index("cos(delta)")] == pytest.approx(0.0, abs=1e-15)


def test_projection_consistency(default_dict):
    rng = np.random.default_rng(0)
    for _ in range(10):
        x = rng.uniform(-2, 2, default_dict.n_states)
        z = dy.lift(default_dict, x)
        assert np.array_equal(z[default_dict.raw_rows], x)


def test_gradient_rows_constant_and_raw(default_dict):
    x = np.random.default_rng(1).uniform(-1, 1, 14)
    J = dy.lift_gradient(default_dict, x)
    assert np.all(J[0] == 0.0)
    for j, row in enumerate(default_dict.raw_rows):
        e = np.zeros(14)
        e[j] = 1.0
        assert np.array_equal(J[row], e)


def test_gradient_matches_finite_differences(default_dict):
    # acceptance-grade check: 100 random states, max relative error < 1e-6
    rng = np.random.default_rng(42)
    h = 1e-6
    worst = 0.0
    for _ in range(100):
        x = rng.uniform(-1.0, 1.0, 14)
        J = dy.lift_gradient(default_dict, x)
        for j in rng.choice(14, size=4, replace=False):
            xp = x.copy()
            xm = x.copy()
            xp[j] += h
            xm[j] -= h
            fd = (dy.lift(default_dict, xp) - dy.lift(default_dict, xm)) / (2 * h)
            scale = np.maximum(np.abs(fd), 1.0)
            worst = max(worst, np.max(np.abs(J[:, j] - fd) / scale))
    assert worst < 1e-6


def test_gradient_richardson_slope(default_dict):
    rng = np.random.default_rng(3)
    x = rng.uniform(-0.5, 0.5, 14)
    v = rng.standard_normal(14)
    v /= np.linalg.norm(v)
    J = dy.lift_gradient(default_dict, x)
    errs = []
    for eps in (1e-3, 5e-4, 2.5e-4):
        lhs = dy.lift(default_dict, x + eps * v) - dy.lift(default_dict, x)
        errs.append(np.linalg.norm(lhs - eps * (J @ v)))
    slope = math.log(errs[0] / errs[2]) / math.log(4.0)
    assert abs(slope - 2.0) < 0.25


def test_batch_matches_pointwise(default_dict):
    rng = np.random.default_rng(4)
    X = rng.uniform(-1, 1, (14, 40))
    Zb = dy.lift(default_dict, X)
    for k in (0, 17, 39):
        assert np.array_equal(Zb[:, k], dy.lift_point(default_dict, X[:, k]))


def test_build_validation():
    with pytest.raises(ValueError):
        dy.build_dictionary((), 3)
    with pytest.raises(ValueError):
        dy.build_dictionary(("v_dc",), 0)
    with pytest.raises(ValueError):
        dy.build_dictionary(("nope",), 2)
    with pytest.raises(ValueError):
        dy.build_dictionary(("v_dc", "v_dc"), 2)
    with pytest.raises(ValueError):
        dy.build_dictionary(("v_dc",), 2, mode="fancy")


def test_spec_roundtrip(default_dict):
    spec = default_dict.spec()
    d2 = dy.build_dictionary(tuple(spec["states"]), spec["max_order"],
                             spec["include_constant"], spec["mode"])
    assert np.array_equal(d2.exponents, default_dict.exponents)
