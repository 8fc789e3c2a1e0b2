"""Shared fixtures: calibrated plant artifacts and a mid-size identification run."""

import warnings

import numpy as np
import pytest

from ssolab import dictionary as dy
from ssolab import harness, koopman as kp, plant, predictor as pr


@pytest.fixture(scope="session")
def weak_params():
    return plant.PlantParams()


@pytest.fixture(scope="session")
def pre_params(weak_params):
    return weak_params.replace(L_s=plant.L_S_PRE_EVENT)


@pytest.fixture(scope="session")
def xeq_weak(weak_params):
    return plant.solve_equilibrium(weak_params)


@pytest.fixture(scope="session")
def default_dict():
    return dy.default_dictionary()


@pytest.fixture(scope="session")
def fitted(weak_params, default_dict):
    """Moderate-size identification shared by spectral/predictor/control tests."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        ds_u, ds_c = harness.generate_datasets(weak_params, seed=2024,
                                               n_traj=200, n_snap=160, ic_rel=0.03)
        model = kp.edmd_fit(ds_u, default_dict, svd_tol=1e-5)
        klti = pr.fit_lti_input(ds_c, model)
        klpv = pr.fit_klpv_input(ds_c, model)
    return {"ds_u": ds_u, "ds_c": ds_c, "model": model, "klti": klti, "klpv": klpv}


def make_linear_dataset(Lam, D, rng, dt=0.01, scale=1.0):
    """Snapshot pairs of x_{k+1} = Lam x_k from random starts (n <= 14)."""
    n = Lam.shape[0]
    X = np.empty((n, D))
    Y = np.empty((n, D))
    k = 0
    while k < D:
        x = rng.uniform(-scale, scale, n)
        for _ in range(min(20, D - k)):
            y = Lam @ x
            X[:, k] = x
            Y[:, k] = y
            x = y
            k += 1
            if k >= D:
                break
    names = plant.STATE_NAMES[:n]
    return kp.SnapshotDataset(X, Y, None, dt, state_names=names)
