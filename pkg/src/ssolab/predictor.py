"""Lifted predictors for the controlled system and their least-squares fits.

Three input models share the uncontrolled transition matrix A_d:
  - KLPV: state-varying input matrix grad(gamma)(x) b dT, b known and constant;
  - KLTI: one constant input matrix fitted to controlled data;
  - bilinear: per-input coefficient matrices acting on the lifted state, for
    the case where the actuated positions b are unknown.
"""

from dataclasses import dataclass
import math
import warnings

import numpy as np

from . import dictionary as dy
from .koopman import KoopmanModel, SnapshotDataset, _spectral


@dataclass
class KlpvPredictor:
    model: KoopmanModel
    b: np.ndarray            # (n, q) physical input map over the dictionary subset

    def __post_init__(self):
        self.b = np.atleast_2d(np.asarray(self.b, dtype=float))
        if self.b.shape[0] != self.model.dic.n_states:
            raise ValueError("b rows must match the dictionary state subset")

    @property
    def q(self):
        return self.b.shape[1]

    def frozen_input_matrix(self, x):
        """B_d(x) = grad(gamma)(x) b dT, evaluated at one state."""
        return input_matrix(self.model.dic, x, self.b, self.model.dt_sample)


@dataclass
class KltiPredictor:
    model: KoopmanModel
    B: np.ndarray            # (m, q)

    def __post_init__(self):
        self.B = np.atleast_2d(np.asarray(self.B, dtype=float))
        if self.B.shape[0] != self.model.m or not np.all(np.isfinite(self.B)):
            raise ValueError("B must be (m, q) and finite")

    @property
    def q(self):
        return self.B.shape[1]

    def frozen_input_matrix(self, x):
        return self.B


@dataclass
class BilinearPredictor:
    model: KoopmanModel
    A_d: np.ndarray          # transition matrix used by this predictor (may be refit)
    betas: list              # q matrices (m, m)

    @property
    def q(self):
        return len(self.betas)

    def frozen_input_matrix(self, x):
        z = dy.lift(self.model.dic, np.asarray(x, dtype=float))
        return np.column_stack([beta @ z for beta in self.betas])


def input_matrix(dic, x, b, dt):
    """State-varying input matrix grad(gamma)(x) b dT, shape (m, q)."""
    b = np.atleast_2d(np.asarray(b, dtype=float))
    J = dy.grad_point(dic, np.asarray(x, dtype=float))
    return (J @ b) * dt


def actuation_column(params, dic):
    """The shipped plant's b restricted to a dictionary subset (q = 1).

    The current-reference increment enters x_iq directly and v_oq through the
    proportional current-loop path and the actuation lag; states outside the
    subset contribute nothing.
    """
    from .plant import IDX, input_column
    full = input_column(params)
    return np.array([[full[IDX[name]]] for name in dic.state_subset])


def pulse_actuation_column(params, dic, dt_sample=2e-3, dt_int=5e-5, eps=1e-3):
    """Commissioning-style b: per-sample state displacement of a small test pulse.

    Runs the plant once from equilibrium with and without a small constant
    input over one sampling interval; the measured displacement per unit
    input per unit time is the effective discrete actuation column, restricted
    to the dictionary's states.
    """
    from . import plant
    xeq = plant.solve_equilibrium(params)
    n = int(round(dt_sample / dt_int))
    s1 = np.array(plant._rk4_span(tuple(xeq), eps, dt_int, n, params))
    s0 = np.array(plant._rk4_span(tuple(xeq), 0.0, dt_int, n, params))
    full = (s1 - s0) / (eps * dt_sample)
    return np.array([[full[plant.IDX[name]]] for name in dic.state_subset])


def _transition(pred):
    return pred.A_d if isinstance(pred, BilinearPredictor) else pred.model.A_d


def predict(pred, x0, u_seq):
    """Roll a predictor out over an input sequence.

    Returns (Z (m, H+1), X_hat (n, H+1)); X_hat is the raw-state row selection
    of Z.  The KLPV input matrix is re-evaluated along the predicted raw
    states, not along any reference trajectory.
    """
    u_seq = np.asarray(u_seq, dtype=float)
    if u_seq.ndim == 1:
        u_seq = u_seq[:, None]
    H = u_seq.shape[0]
    A = _transition(pred)
    dic = pred.model.dic
    raw = dic.raw_rows
    Z = np.empty((pred.model.m, H + 1))
    Z[:, 0] = dy.lift(dic, np.asarray(x0, dtype=float))
    if isinstance(pred, KlpvPredictor):
        for k in range(H):
            xh = Z[raw, k]
            Bd = pred.frozen_input_matrix(xh)
            Z[:, k + 1] = A @ Z[:, k] + Bd @ u_seq[k]
    elif isinstance(pred, KltiPredictor):
        for k in range(H):
            Z[:, k + 1] = A @ Z[:, k] + pred.B @ u_seq[k]
    elif isinstance(pred, BilinearPredictor):
        for k in range(H):
            zk = Z[:, k]
            acc = A @ zk
            for i, beta in enumerate(pred.betas):
                acc = acc + (beta @ zk) * u_seq[k, i]
            Z[:, k + 1] = acc
    else:
        raise TypeError(f"unknown predictor {type(pred).__name__}")
    return Z, Z[raw, :]


def _controlled_blocks(dataset, dic):
    rows = dataset.rows_for(dic.state_subset)
    U = dataset.U
    if U is None:
        U = np.zeros((0, dataset.n_pairs))
    U = np.atleast_2d(U)
    return rows, U


def fit_lti_input(dataset, model, chunk=20000):
    """Constant input matrix by least squares with A_d frozen.

    B = argmin sum ||z_{k+1} - A_d z_k - B u_k||^2, least-norm under
    rank-deficient excitation (so an all-zero input dataset gives B = 0).
    """
    dic = model.dic
    rows, U = _controlled_blocks(dataset, dic)
    q = U.shape[0]
    if q == 0:
        raise ValueError("dataset has no input rows")
    m = model.m
    D = dataset.n_pairs
    M1 = np.zeros((m, q))
    M2 = np.zeros((q, q))
    for k0 in range(0, D, chunk):
        k1 = min(k0 + chunk, D)
        Zx = dy.lift(dic, dataset.X[rows, k0:k1])
        Zy = dy.lift(dic, dataset.Y[rows, k0:k1])
        Uc = U[:, k0:k1]
        M1 += (Zy - model.A_d @ Zx) @ Uc.T
        M2 += Uc @ Uc.T
    rank = int(np.linalg.matrix_rank(M2)) if q > 1 else int(np.any(M2 > 0))
    if rank < q:
        warnings.warn(f"input excitation rank {rank} < q={q}; least-norm B",
                      stacklevel=2)
    B = M1 @ np.linalg.pinv(M2)
    return KltiPredictor(model, B)


def fit_klpv_input(dataset, model, max_pairs=30000):
    """Constant physical input column b estimated under the state-varying structure.

    Solves min_b sum_k || z_{k+1} - A_d z_k - grad(gamma)(x_k) b dT u_k ||^2,
    a small least-squares in the n entries of b.  This is the data-driven way
    to pin the actuated positions when the analytic affine entries miss part
    of the per-sample actuation response.
    """
    dic = model.dic
    rows, U = _controlled_blocks(dataset, dic)
    if U.shape[0] != 1:
        raise ValueError("fit_klpv_input supports a single input channel")
    D = dataset.n_pairs
    step = max(1, D // max_pairs)
    n = dic.n_states
    dt = model.dt_sample
    M = np.zeros((n, n))
    v = np.zeros(n)
    for k in range(0, D, step):
        u = U[0, k]
        if u == 0.0:
            continue
        x = dataset.X[rows, k]
        G = dy.grad_point(dic, x) * (dt * u)
        r = dy.lift(dic, dataset.Y[rows, k]) - model.A_d @ dy.lift(dic, x)
        M += G.T @ G
        v += G.T @ r
    b = np.linalg.lstsq(M, v, rcond=None)[0]
    return KlpvPredictor(model, b[:, None])


def fit_bilinear(dataset, model, freeze_A=False, svd_tol=1e-10, chunk=20000):
    """Bilinear input model: coefficient matrices for each input channel.

    Joint least squares over (A_d, beta_1..beta_q) on regressors
    [z_k; z_k u_k(1); ...], or with A_d frozen from the uncontrolled fit.
    """
    dic = model.dic
    rows, U = _controlled_blocks(dataset, dic)
    q = U.shape[0]
    m = model.m
    D = dataset.n_pairs
    if q == 0:
        return BilinearPredictor(model, model.A_d, [])

    nb = m * q if freeze_A else m * (1 + q)
    G = np.zeros((nb, nb))
    Ryx = np.zeros((m, nb))
    for k0 in range(0, D, chunk):
        k1 = min(k0 + chunk, D)
        Zx = dy.lift(dic, dataset.X[rows, k0:k1])
        Zy = dy.lift(dic, dataset.Y[rows, k0:k1])
        Uc = U[:, k0:k1]
        blocks = [] if freeze_A else [Zx]
        for i in range(q):
            blocks.append(Zx * Uc[i][None, :])
        Rg = np.vstack(blocks)
        tgt = Zy - model.A_d @ Zx if freeze_A else Zy
        G += Rg @ Rg.T
        Ryx += tgt @ Rg.T
    lam, Qe = np.linalg.eigh(G)
    lam_max = lam[-1] if len(lam) else 0.0
    cut = max(svd_tol * svd_tol, np.finfo(float).eps * nb) * lam_max
    keep = lam > cut
    rank = int(np.count_nonzero(keep))
    if rank < nb:
        warnings.warn(f"bilinear regressor rank {rank} < {nb}; least-norm fit",
                      stacklevel=2)
    Ginv = (Qe[:, keep] / lam[keep]) @ Qe[:, keep].T
    Theta = Ryx @ Ginv
    if freeze_A:
        A_fit = model.A_d
        betas = [Theta[:, i * m:(i + 1) * m] for i in range(q)]
    else:
        A_fit = Theta[:, :m]
        betas = [Theta[:, (1 + i) * m:(2 + i) * m] for i in range(q)]
    return BilinearPredictor(model, A_fit, betas)


def rmse(pred, x_traj, u_traj):
    """Open-loop prediction RMSE against a recorded trajectory.

    x_traj: (n, T) reference states over the dictionary subset;
    u_traj: inputs recorded over the first T-1 samples.  Returns an array of
    length T: entry h is the RMSE over states between the prediction started
    at column 0 and the reference at step h.
    """
    x_traj = np.asarray(x_traj, dtype=float)
    T = x_traj.shape[1]
    u_arr = np.asarray(u_traj, dtype=float)
    if u_arr.ndim == 1:
        u_arr = u_arr[:, None]
    if u_arr.shape[0] != T - 1:
        raise ValueError("u_traj must cover T-1 steps")
    _, Xh = predict(pred, x_traj[:, 0], u_arr)
    err = Xh - x_traj
    return np.sqrt(np.mean(err ** 2, axis=0))
