"""EDMD identification, Koopman spectral analysis, participation factors, signal selection."""

from dataclasses import dataclass, field
import cmath
import math
import warnings

import numpy as np

from . import dictionary as dy
from .plant import IDX, STATE_NAMES


@dataclass
class SnapshotDataset:
    """Aligned snapshot pairs: Y[:, k] is the sampled successor of X[:, k].

    Rows are raw states named by `state_names`; U (optional) carries the input
    held over each pair's sampling interval.
    """
    X: np.ndarray            # (n, D)
    Y: np.ndarray            # (n, D)
    U: np.ndarray | None     # (q, D) or None
    dt_sample: float
    state_names: tuple = STATE_NAMES
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.X.shape != self.Y.shape:
            raise ValueError("X and Y shapes differ")
        if self.X.shape[0] != len(self.state_names):
            raise ValueError("row count does not match state_names")
        if self.U is not None and self.U.shape[-1] != self.X.shape[1]:
            raise ValueError("U column count does not match X")

    @property
    def n_pairs(self):
        return self.X.shape[1]

    def rows_for(self, subset):
        pos = {n: i for i, n in enumerate(self.state_names)}
        missing = [s for s in subset if s not in pos]
        if missing:
            raise ValueError(f"dataset lacks states {missing}")
        return [pos[s] for s in subset]


@dataclass
class ModeInfo:
    eigenvalue: complex      # discrete-time mu
    lam: complex             # continuous-time ln(mu)/dt
    freq_hz: float
    zeta: float              # damping ratio, fraction
    index: int = -1

    @property
    def zeta_pct(self):
        return 100.0 * self.zeta


def mode_info(mu, dt, index=-1):
    """Continuous-time frequency/damping of a discrete eigenvalue."""
    if mu == 0:
        raise ValueError("mu = 0 has no continuous-time counterpart")
    lam = cmath.log(mu) / dt
    mag = abs(lam)
    zeta = -lam.real / mag if mag > 0.0 else 0.0
    return ModeInfo(mu, lam, abs(lam.imag) / (2.0 * math.pi), zeta, index)


@dataclass
class KoopmanModel:
    dic: dy.ObservableDictionary
    A_d: np.ndarray          # (m, m)
    eigvals: np.ndarray      # (m,) discrete-time, sorted
    left: np.ndarray         # (m, m), rows are left eigenvectors, left @ right = I
    right: np.ndarray        # (m, m), columns are right eigenvectors
    modes: np.ndarray        # (n, m) raw-state projection of the right eigenvectors
    dt_sample: float
    rank: int
    svd_tol: float
    residual: float          # ||Y_lift - A_d X_lift||_F of the fit
    defective: bool = False  # eigenbasis too ill-conditioned for modal reconstruction
    state_envelope: tuple | None = None   # (lo, hi) of the training states, subset order

    @property
    def m(self):
        return self.A_d.shape[0]

    def mode_table(self):
        """One ModeInfo per conjugate pair (f >= 0 representative), model order."""
        out = []
        seen = np.zeros(len(self.eigvals), dtype=bool)
        for i, mu in enumerate(self.eigvals):
            if seen[i] or mu == 0:
                continue
            info = mode_info(mu, self.dt_sample, index=i)
            if info.lam.imag < 0:   # keep the f >= 0 member of the pair
                continue
            if info.lam.imag > 0:
                js = [j for j, m2 in enumerate(self.eigvals)
                      if not seen[j] and j != i and abs(m2 - mu.conjugate()) < 1e-12 * max(1.0, abs(mu))]
                if js:
                    seen[js[0]] = True
            seen[i] = True
            out.append(info)
        return out


def _sort_key(mu, dt):
    if mu == 0:
        return (0.0, math.inf)
    lam = cmath.log(mu) / dt
    mag = abs(lam)
    zeta = -lam.real / mag if mag > 0.0 else 0.0
    return (-abs(lam.imag), zeta)


# Above this many lifted-matrix elements, edmd_fit switches from a direct SVD
# to accumulated Gram matrices (which square the conditioning).
DIRECT_SVD_ELEMENTS = 2.5e8


def edmd_fit(dataset, dic, svd_tol=1e-10, rank_floor=None, chunk=20000):
    """Least-squares Koopman transition matrix on the lifted snapshots.

    A_d = Y_lift pinv(X_lift); the pseudoinverse drops singular values below
    svd_tol relative to the largest.  Datasets too large to hold lifted in
    memory go through accumulated Gram matrices (same solution, but the
    resolvable tolerance floor is ~sqrt(machine eps)).
    """
    if dataset.U is not None and np.any(dataset.U != 0.0):
        raise ValueError("edmd_fit expects an uncontrolled dataset (U all zero)")
    rows = dataset.rows_for(dic.state_subset)
    D = dataset.n_pairs
    m = dic.m

    if m * D <= DIRECT_SVD_ELEMENTS:
        Xl = np.empty((m, D))
        Yl = np.empty((m, D))
        for k0 in range(0, D, chunk):
            k1 = min(k0 + chunk, D)
            Xl[:, k0:k1] = dy.lift(dic, dataset.X[rows, k0:k1])
            Yl[:, k0:k1] = dy.lift(dic, dataset.Y[rows, k0:k1])
        U_, s, Vt = np.linalg.svd(Xl, full_matrices=False)
        keep = s > svd_tol * (s[0] if len(s) else 0.0)
        rank = int(np.count_nonzero(keep))
        pinv = (Vt[keep].T / s[keep]) @ U_[:, keep].T
        A_d = Yl @ pinv
        residual = float(np.linalg.norm(Yl - A_d @ Xl))
    else:
        Gxx = np.zeros((m, m))
        Gyx = np.zeros((m, m))
        yy = 0.0
        for k0 in range(0, D, chunk):
            k1 = min(k0 + chunk, D)
            Xl = dy.lift(dic, dataset.X[rows, k0:k1])
            Yl = dy.lift(dic, dataset.Y[rows, k0:k1])
            Gxx += Xl @ Xl.T
            Gyx += Yl @ Xl.T
            yy += float(np.einsum("ij,ij->", Yl, Yl))
        lam, Q = np.linalg.eigh(Gxx)
        lam_max = lam[-1] if len(lam) else 0.0
        cut = max(svd_tol * svd_tol, np.finfo(float).eps) * lam_max
        keep = lam > cut
        rank = int(np.count_nonzero(keep))
        Ginv = (Q[:, keep] / lam[keep]) @ Q[:, keep].T
        A_d = Gyx @ Ginv
        # ||Y - A X||_F^2 = tr(Gyy) - 2 tr(A Gyx^T) + tr(A Gxx A^T)
        r2 = yy - 2.0 * float(np.einsum("ij,ij->", A_d, Gyx)) \
            + float(np.einsum("ij,ij->", A_d @ Gxx, A_d))
        residual = math.sqrt(max(r2, 0.0))

    floor = rank_floor if rank_floor is not None else min(m, D)
    if rank < floor:
        warnings.warn(f"lifted data rank {rank} below floor {floor} (m={m}, D={D})",
                      stacklevel=2)
    env = (dataset.X[rows].min(axis=1), dataset.X[rows].max(axis=1))
    return _spectral(dic, A_d, dataset.dt_sample, rank, svd_tol, residual,
                     envelope=env)


def _spectral(dic, A_d, dt, rank, svd_tol, residual, envelope=None):
    """Eigen-decompose A_d and package the model (sorted, biorthogonal)."""
    w, V = np.linalg.eig(A_d)
    order = sorted(range(len(w)), key=lambda i: _sort_key(w[i], dt))
    w = w[order]
    V = V[:, order]
    defective = False
    try:
        cond = np.linalg.cond(V)
        if not np.isfinite(cond) or cond > 1e12:
            defective = True
        Xi = np.linalg.inv(V)
    except np.linalg.LinAlgError:
        defective = True
        Xi = np.linalg.pinv(V)
    modes = V[dic.raw_rows, :]
    return KoopmanModel(dic, A_d, w, Xi, V, modes, dt, rank, svd_tol, residual,
                        defective=defective, state_envelope=envelope)


def eigenfunctions(model, x):
    """Eigenfunction values phi_i(x) = xi_i^T gamma(x); x is a subset-state vector."""
    return model.left @ dy.lift(model.dic, x)


def _canonical_real(Xi):
    """Rotate each left eigenvector so its largest-|.| entry is real positive.

    KPFs use real parts, which depend on the arbitrary complex phase; this
    fixes a deterministic phase so conjugate pairs give identical rows.
    """
    out = np.empty_like(Xi)
    for i in range(Xi.shape[0]):
        row = Xi[i]
        k = int(np.argmax(np.abs(row)))
        ph = row[k]
        out[i] = row * (abs(ph) / ph) if ph != 0 else row
    return out


def kpf(model):
    """Koopman participation factors: rows are modes, columns lifted states.

    p_ij = Re(xi_ij)^2 normalized over row i, so each valid row sums to 1.
    Returns (P, valid) where valid flags rows whose real part is not
    identically zero.
    """
    Xi = _canonical_real(model.left)
    R = Xi.real ** 2
    sums = R.sum(axis=1)
    valid = sums > 0.0
    P = np.zeros_like(R)
    P[valid] = R[valid] / sums[valid, None]
    return P, valid


def mode_amplitudes(model, dataset, max_cols=2000):
    """Mean modal amplitude |phi_i(x_k)| * ||v_i|| over (a subsample of) the data."""
    rows = dataset.rows_for(model.dic.state_subset)
    step = max(1, dataset.n_pairs // max_cols)
    Z = dy.lift(model.dic, dataset.X[rows, ::step])
    return np.mean(np.abs(model.left @ Z), axis=1) * np.linalg.norm(model.right, axis=0)


def dominant_modes(model, f_band=(5.0, 55.0), dataset=None, amp_rel_floor=0.2,
                   zeta_tol=0.005):
    """Negatively damped modes inside the band, most unstable first.

    When a dataset is given, modal amplitudes on it screen out low-energy
    spectral debris (relative floor against the strongest in-band unstable
    mode) and break near-ties in damping: a lifted product of an oscillatory
    eigenfunction shares its damping ratio, so the fundamental is the
    tied mode with the dominant amplitude.
    """
    table = model.mode_table()
    cand = [mi for mi in table if mi.zeta < 0.0 and f_band[0] <= mi.freq_hz <= f_band[1]]
    if not cand:
        return []
    if dataset is None:
        cand.sort(key=lambda mi: mi.zeta)
        return cand
    amp = mode_amplitudes(model, dataset)
    a_max = max(amp[mi.index] for mi in cand)
    if a_max > 0.0:
        cand = [mi for mi in cand if amp[mi.index] >= amp_rel_floor * a_max]
    cand.sort(key=lambda mi: mi.zeta)
    out = []
    i = 0
    while i < len(cand):
        j = i
        while j + 1 < len(cand) and cand[j + 1].zeta - cand[i].zeta < zeta_tol:
            j += 1
        group = sorted(cand[i:j + 1], key=lambda mi: -amp[mi.index])
        out.extend(group)
        i = j + 1
    return out


def reconstruct(model, x0, K):
    """Modal prediction of the lifted trajectory for k = 0..K.

    Sum of phi_i(x0) * v_i * mu_i^k; falls back to repeated multiplication by
    A_d when the eigenbasis is defective.  Returns (Z (m, K+1), modal: bool).
    """
    z0 = dy.lift(model.dic, np.asarray(x0, dtype=float))
    if model.defective:
        Z = np.empty((model.m, K + 1))
        Z[:, 0] = z0
        for k in range(K):
            Z[:, k + 1] = model.A_d @ Z[:, k]
        return Z, False
    phi0 = model.left @ z0
    powers = model.eigvals[:, None] ** np.arange(K + 1)[None, :]
    Z = (model.right @ (phi0[:, None] * powers)).real
    return Z, True


@dataclass(frozen=True)
class IoMap:
    """Which raw states a controller may measure, and which actuation channel
    regulates each actuable raw state."""
    measurable: tuple
    actuable: dict            # raw state name -> actuation channel label


@dataclass
class SignalSelection:
    input_signal: str         # measured raw state feeding the controller
    output_channel: str       # actuation channel driven by the controller
    ranking: list             # (term label, participation) descending


# The shipped deployment measures the PCC phase difference (the wide-area
# channel of the supplementary-control scheme) and actuates the q-axis
# current reference; the converter's internal integrator states are not
# telemetry.
DEFAULT_IO_MAP = IoMap(
    measurable=("delta",),
    actuable={"x_iq": "delta_i_gq_ref"},
)


def select_signals(P_row, dic, io_map=DEFAULT_IO_MAP, top_k=None):
    """Controller I/O from a dominant mode's participation row.

    The lifted states are ranked by participation; the best-ranked actuable
    raw state picks the output channel and the best-ranked measurable raw
    state (other than the actuated one) picks the input signal.  With top_k
    set, the actuable state must appear within the first top_k lifted states.
    """
    order = np.argsort(-np.asarray(P_row))
    labels = dic.term_labels()
    ranking = [(labels[i], float(P_row[i])) for i in order]
    raw_of_row = {row: name for row, name in zip(dic.raw_rows, dic.state_subset)}

    output = None
    act_state = None
    limit = len(order) if top_k is None else top_k
    for i in order[:limit]:
        name = raw_of_row.get(int(i))
        if name is not None and name in io_map.actuable:
            act_state = name
            output = io_map.actuable[name]
            break
    if output is None:
        lines = ", ".join(f"{l}={p:.3f}" for l, p in ranking[:min(limit, 10)])
        raise ValueError(f"no actuable state in the top {limit} lifted states: {lines}")
    for i in order:
        name = raw_of_row.get(int(i))
        if name is not None and name != act_state and name in io_map.measurable:
            return SignalSelection(name, output, ranking)
    raise ValueError("no measurable raw state available for the controller input")
