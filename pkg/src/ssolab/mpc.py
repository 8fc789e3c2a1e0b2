"""Receding-horizon oscillation damping: condensed QP over the input sequence.

The predictor's dynamics are condensed with the input matrix frozen over the
horizon, giving a strictly convex box/polyhedrally-constrained QP in the
stacked input sequence, solved by an internal dense primal active-set method
with exact KKT termination.

The closed-loop controller wraps the bare QP machinery with the estimators a
sampled-data deployment needs: its output reference and operating point come
from short moving averages of the measurements, and a moving-average estimate
of the one-step model residual makes the loop offset-free when the plant
drifts away from the identification operating point.
"""

from dataclasses import dataclass, field
import math

import numpy as np

from . import dictionary as dy
from . import scenario as sc


class QpInfeasibleError(RuntimeError):
    """Constraint set has no feasible point (phase-1 certificate)."""


class QpIterationError(RuntimeError):
    """Active-set iteration cap exceeded."""


@dataclass
class QpProblem:
    """min 1/2 u^T H u + f^T u  s.t.  G u <= h, with H symmetric PD."""
    H: np.ndarray
    f: np.ndarray
    G: np.ndarray
    h: np.ndarray
    const: float = 0.0            # cost offset, for diagnostics only
    row_tags: list = field(default_factory=list)   # (step, kind) per G row

    def __post_init__(self):
        if not np.allclose(self.H, self.H.T, atol=1e-12):
            raise ValueError("H must be symmetric")
        np.linalg.cholesky(self.H)   # PD check; raises LinAlgError otherwise

    @property
    def dim(self):
        return self.H.shape[0]

    def cost(self, u):
        return 0.5 * u @ self.H @ u + self.f @ u + self.const


@dataclass
class QpSolution:
    u: np.ndarray
    lam: np.ndarray               # multipliers, one per G row
    iterations: int
    active_set: list
    cost: float


def kkt_residuals(qp, u, lam):
    """Stationarity, primal feasibility and complementarity residuals (max norms)."""
    stat = float(np.max(np.abs(qp.H @ u + qp.f + qp.G.T @ lam))) if qp.G.size \
        else float(np.max(np.abs(qp.H @ u + qp.f)))
    slack = qp.G @ u - qp.h if qp.G.size else np.zeros(0)
    primal = float(np.max(slack, initial=0.0))
    comp = float(np.max(np.abs(lam * slack), initial=0.0))
    dual = float(np.min(lam, initial=0.0))
    return stat, primal, comp, dual


def solve_qp(qp, u0=None, max_iter=None, feas_tol=1e-9, dual_tol=1e-10):
    """Dense primal active-set solve of a strictly convex inequality QP.

    Deterministic given the problem; returns the exact KKT point.  A u0 that
    violates constraints triggers a phase-1 solve; certified infeasibility
    raises QpInfeasibleError.
    """
    n = qp.dim
    G, h = qp.G, qp.h
    nrow = G.shape[0] if G.size else 0
    if max_iter is None:
        max_iter = 50 * max(n, 1)

    x = np.zeros(n) if u0 is None else np.array(u0, dtype=float)
    if nrow and np.max(G @ x - h) > feas_tol:
        x = _phase1(qp, x, feas_tol)

    W = []                       # working set; blocking rows keep it independent
    it = 0
    while True:
        it += 1
        if it > max_iter:
            raise QpIterationError(
                f"active-set cap {max_iter} exceeded (|W|={len(W)}, n={n})")
        g0 = qp.H @ x + qp.f
        if W:
            Gw = G[W]
            K = np.block([[qp.H, Gw.T], [Gw, np.zeros((len(W), len(W)))]])
            rhs = np.concatenate([-g0, np.zeros(len(W))])
            try:
                sol = np.linalg.solve(K, rhs)
            except np.linalg.LinAlgError:
                sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
            p = sol[:n]
            lam_w = sol[n:]
        else:
            p = np.linalg.solve(qp.H, -g0)
            lam_w = np.zeros(0)

        if np.max(np.abs(p), initial=0.0) <= 1e-11 * max(1.0, np.max(np.abs(x), initial=0.0)):
            if len(W) == 0 or np.min(lam_w) >= -dual_tol:
                lam = np.zeros(nrow)
                for wi, li in zip(W, lam_w):
                    lam[wi] = max(li, 0.0)
                return QpSolution(x, lam, it, sorted(W), qp.cost(x))
            W.pop(int(np.argmin(lam_w)))
            continue

        alpha = 1.0
        block = -1
        if nrow:
            Gp = G @ p
            slack = h - G @ x
            for i in range(nrow):
                if i in W or Gp[i] <= 1e-13:
                    continue
                a = slack[i] / Gp[i]
                if a < alpha - 1e-14:
                    alpha = max(a, 0.0)
                    block = i
        x = x + alpha * p
        if block >= 0:
            W.append(block)


def _phase1(qp, x0, feas_tol):
    """Feasible point via the relaxed problem min ~t s.t. Gx - t <= h."""
    n = qp.dim
    G, h = qp.G, qp.h
    t0 = float(np.max(G @ x0 - h)) + 1.0
    scale = max(1.0, float(np.max(np.abs(h), initial=1.0)))
    H1 = np.eye(n + 1) * 1e-6 * scale
    f1 = np.zeros(n + 1)
    f1[-1] = scale
    G1 = np.hstack([G, -np.ones((G.shape[0], 1))])
    G1 = np.vstack([G1, np.zeros(n + 1)])
    G1[-1, -1] = -1.0            # t >= -1 keeps phase-1 bounded
    h1 = np.concatenate([h, [1.0]])
    aux = QpProblem(H1, f1, G1, h1)
    sol = solve_qp(aux, u0=np.concatenate([x0, [t0]]))
    t_star = sol.u[-1]
    if t_star > feas_tol:
        raise QpInfeasibleError(f"constraints infeasible: min slack violation {t_star:.3e}")
    return sol.u[:n]


def brute_force_qp(qp):
    """Reference solve by enumerating active subsets; exponential, tests only."""
    from itertools import combinations
    n = qp.dim
    G, h = qp.G, qp.h
    nrow = G.shape[0]
    best = None
    for k in range(0, min(nrow, n) + 1):
        for rows in combinations(range(nrow), k):
            Gw = G[list(rows)]
            if k and np.linalg.matrix_rank(Gw) < k:
                continue
            K = np.block([[qp.H, Gw.T], [Gw, np.zeros((k, k))]]) if k else qp.H
            rhs = np.concatenate([-qp.f, h[list(rows)]]) if k else -qp.f
            try:
                sol = np.linalg.solve(K, rhs)
            except np.linalg.LinAlgError:
                continue
            x = sol[:n]
            lam_w = sol[n:]
            if np.any(lam_w < -1e-9):
                continue
            if np.max(G @ x - h, initial=0.0) > 1e-9:
                continue
            c = qp.cost(x)
            if best is None or c < best[1] - 1e-15:
                best = (x, c)
    if best is None:
        raise QpInfeasibleError("no KKT point found by enumeration")
    return best[0]


@dataclass
class MpcConfig:
    """Weights, horizon and constraint description of the damping MPC."""
    N_p: int = 25
    Q: np.ndarray = field(default_factory=lambda: np.array([[40.0]]))
    R: np.ndarray = field(default_factory=lambda: np.array([[0.01]]))
    P_term: np.ndarray | None = None   # None: output-weighted terminal C^T Q C
    y_ref: np.ndarray | None = None    # None: track the online reference estimate
    z_ref: np.ndarray | None = None
    u_min: float = -0.1
    u_max: float = 0.1
    # optional stage-wise polyhedral rows: beta_min <= E_y y_i + E_u u_i <= beta_max
    E_y: np.ndarray | None = None
    E_u: np.ndarray | None = None
    beta_min: np.ndarray | None = None
    beta_max: np.ndarray | None = None
    E_y_term: np.ndarray | None = None
    beta_term_min: np.ndarray | None = None
    beta_term_max: np.ndarray | None = None

    def __post_init__(self):
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        self.R = np.atleast_2d(np.asarray(self.R, dtype=float))
        if self.N_p < 1:
            raise ValueError("N_p must be >= 1")
        np.linalg.cholesky(self.R)   # R must be PD for strict convexity


def freeze_input_matrix(pred, x_k):
    """Input matrix held constant over the horizon, evaluated at the given state."""
    return pred.frozen_input_matrix(np.asarray(x_k, dtype=float))


class CondensedBuilder:
    """Precomputed condensing data for fixed (A, C, config); B varies per solve."""

    def __init__(self, A, C, config):
        self.A = np.asarray(A, dtype=float)
        self.C = np.atleast_2d(np.asarray(C, dtype=float))
        self.cfg = config
        m = self.A.shape[0]
        p = self.C.shape[0]
        N = config.N_p
        # D[i] = C A^i for i = 0..N
        self.D = np.empty((N + 1, p, m))
        self.D[0] = self.C
        for i in range(N):
            self.D[i + 1] = self.D[i] @ self.A
        self.A_pow_N = None
        if config.P_term is not None:
            Ap = np.eye(m)
            for _ in range(N):
                Ap = self.A @ Ap
            self.A_pow_N = Ap
        self.m, self.p, self.N = m, p, N
        self.qdim = config.R.shape[0]

    def build(self, B0, z0, y_ref, z_ref=None, w=None):
        """Condensed QpProblem for the current B0, initial lifted state and
        (optionally) a constant lifted disturbance w acting every step."""
        cfg = self.cfg
        N, p, q, m = self.N, self.p, self.qdim, self.m
        B0 = np.atleast_2d(np.asarray(B0, dtype=float))
        y_ref = np.atleast_1d(np.asarray(y_ref, dtype=float))
        if B0.shape != (m, q):
            raise ValueError(f"B0 must be ({m}, {q}), got {B0.shape}")
        if y_ref.shape != (p,):
            raise ValueError(f"y_ref must have {p} entries, got {y_ref.shape}")

        # free response o_i = C A^i z0 (+ accumulated disturbance), gains g_i = C A^i B0
        o = self.D @ z0                        # (N+1, p)
        g = self.D @ B0                        # (N+1, p, q)
        if w is not None:
            dw = self.D @ w                    # (N+1, p)
            ow = np.vstack([np.zeros((1, p)), np.cumsum(dw[:-1], axis=0)])
            o = o + ow

        S = np.zeros((N * p, N * q))
        for i in range(1, N):
            for j in range(i):
                S[i * p:(i + 1) * p, j * q:(j + 1) * q] = g[i - 1 - j]
        Of = o[:N].reshape(N * p)
        Yr = np.tile(y_ref, N)
        Qb = np.kron(np.eye(N), cfg.Q)
        Rb = np.kron(np.eye(N), cfg.R)

        H = 2.0 * (S.T @ Qb @ S + Rb)
        e0 = Of - Yr
        f = 2.0 * (S.T @ (Qb @ e0))
        const = float(e0 @ Qb @ e0)

        if cfg.P_term is None:
            # output-weighted terminal ||C z_N - y_ref||_Q
            SN = np.zeros((p, N * q))
            for j in range(N):
                SN[:, j * q:(j + 1) * q] = g[N - 1 - j]
            eN = o[N] - y_ref
            H += 2.0 * (SN.T @ cfg.Q @ SN)
            f += 2.0 * (SN.T @ (cfg.Q @ eN))
            const += float(eN @ cfg.Q @ eN)
        else:
            zr = np.zeros(m) if z_ref is None else np.asarray(z_ref, dtype=float)
            T = np.zeros((m, N * q))
            blk = B0
            for j in range(N - 1, -1, -1):
                T[:, j * q:(j + 1) * q] = blk
                if j:
                    blk = self.A @ blk
            zN_free = self.A_pow_N @ z0
            if w is not None:
                acc = np.zeros(m)
                v = w.copy()
                for _ in range(N):
                    acc += v
                    v = self.A @ v
                zN_free = zN_free + acc
            eN = zN_free - zr
            P = cfg.P_term
            H += 2.0 * (T.T @ P @ T)
            f += 2.0 * (T.T @ (P @ eN))
            const += float(eN @ P @ eN)
        H = 0.5 * (H + H.T)

        rows = []
        hs = []
        tags = []
        nu = N * q
        for i in range(N):
            for k in range(q):
                r = np.zeros(nu)
                r[i * q + k] = 1.0
                rows.append(r)
                hs.append(cfg.u_max)
                tags.append((i, "u_max"))
                rows.append(-r)
                hs.append(-cfg.u_min)
                tags.append((i, "u_min"))
        if cfg.E_y is not None or cfg.E_u is not None:
            Ey = np.zeros((0, p)) if cfg.E_y is None else np.atleast_2d(cfg.E_y)
            Eu = np.zeros((Ey.shape[0], q)) if cfg.E_u is None else np.atleast_2d(cfg.E_u)
            for i in range(N):
                Yrow = np.zeros((Ey.shape[0], nu))
                if i > 0:
                    Yrow = Ey @ S[i * p:(i + 1) * p]
                Urow = np.zeros((Eu.shape[0], nu))
                Urow[:, i * q:(i + 1) * q] = Eu
                base = Ey @ o[i]
                M = Yrow + Urow
                for r_, b_ in ((M, cfg.beta_max - base), (-M, base - cfg.beta_min)):
                    rows.extend(r_)
                    hs.extend(np.atleast_1d(b_))
                    tags.extend((i, "poly") for _ in range(M.shape[0]))
        if cfg.E_y_term is not None:
            Ey = np.atleast_2d(cfg.E_y_term)
            SN = np.zeros((p, nu))
            for j in range(N):
                SN[:, j * q:(j + 1) * q] = g[N - 1 - j]
            M = Ey @ SN
            base = Ey @ o[N]
            rows.extend(M)
            hs.extend(np.atleast_1d(cfg.beta_term_max - base))
            tags.extend((self.N, "poly_term") for _ in range(M.shape[0]))
            rows.extend(-M)
            hs.extend(np.atleast_1d(base - cfg.beta_term_min))
            tags.extend((self.N, "poly_term") for _ in range(M.shape[0]))

        G = np.array(rows) if rows else np.zeros((0, nu))
        h = np.array(hs) if hs else np.zeros(0)
        return QpProblem(H, f, G, h, const=const, row_tags=tags)


def build_qp(model, B_d0, z0, config, C=None, y_ref=None, z_ref=None, w=None):
    """One-shot condensed QP (convenience wrapper over CondensedBuilder)."""
    if C is None:
        raise ValueError("output map C is required")
    builder = CondensedBuilder(model.A_d, C, config)
    yr = np.zeros(builder.p) if y_ref is None else y_ref
    return builder.build(B_d0, z0, yr, z_ref, w)


@dataclass
class ControlResult:
    u_seq: np.ndarray          # optimal sequence (N, q)
    u0: np.ndarray             # applied first element
    y_pred: np.ndarray         # predicted outputs y_0..y_N under u_seq
    iterations: int
    kkt: tuple                 # (stationarity, primal, complementarity, min dual)
    active_size: int
    cost: float


class DssoscController:
    """Sampled-data damping controller: lift, freeze the input matrix, solve the QP.

    Works with any predictor exposing frozen_input_matrix (state-varying or
    constant input matrix); the measurement vector must carry the dictionary's
    state subset at the positions given by meas_positions (None: the
    measurement is the subset).

    Three short moving averages make the loop deployable on a drifting plant:
    y_ref tracks the quiescent output, the input-matrix evaluation point is a
    one-period average of the measured state (clamped to the training
    envelope), and a lifted one-step-residual average enters the prediction
    as a constant disturbance so model bias does not produce steady-state
    fighting.  Windows are in samples.
    """

    def __init__(self, pred, config, output_state, meas_positions=None,
                 activation_time=0.0, y_ref_window=50, freeze_window=50,
                 dist_window=50, delay_samples=0, meas_avg_window=1,
                 name="dssosc"):
        self.pred = pred
        self.cfg = config
        self.dic = pred.model.dic
        if output_state not in self.dic.state_subset:
            raise ValueError(f"output state {output_state!r} not in dictionary subset")
        row = self.dic.raw_rows[self.dic.state_subset.index(output_state)]
        C = np.zeros((1, pred.model.m))
        C[0, row] = 1.0
        self.C = C
        self.output_state = output_state
        self.subset_pos = self.dic.state_subset.index(output_state)
        self.meas_positions = meas_positions
        self.activation_time = activation_time
        self.y_ref_window = y_ref_window
        self.freeze_window = freeze_window
        self.dist_window = dist_window
        self.delay_samples = delay_samples   # known telemetry latency, compensated
        # averaging window for the lifted measurement (noise suppression); its
        # group delay of (w-1)/2 samples is folded into the latency compensation
        self.meas_avg_window = max(1, meas_avg_window)
        # outputs below the deadband are zeroed: suppresses noise-driven chatter
        # once the oscillation is down (the loop re-engages as soon as the
        # optimizer asks for more than the deadband)
        self.u_deadband = 0.0
        self.name = name
        self.builder = CondensedBuilder(pred.model.A_d, C, config)
        env = getattr(pred.model, "state_envelope", None)
        self.envelope = env
        self.reset()

    def reset(self):
        self._u_prev_seq = None
        self._u_held = 0.0
        self._x_hist = []
        self._res_hist = []
        self._z_hist = []
        self._prev = None          # lifted measurement of the previous sample
        self._act_hist = []        # (B0, u) actually applied, newest last
        self.failures = 0
        self.diag_rows = []

    def _x_subset(self, y):
        if self.meas_positions is None:
            return np.asarray(y, dtype=float)
        return np.asarray(y, dtype=float)[self.meas_positions]

    def freeze_point(self):
        """Smoothed, envelope-clamped state at which B_d0 is evaluated."""
        x_bar = np.mean(self._x_hist[-self.freeze_window:], axis=0)
        if self.envelope is not None:
            x_bar = np.clip(x_bar, self.envelope[0], self.envelope[1])
        return x_bar

    def step(self, t, y):
        x = self._x_subset(y)           # plant state delay_samples ago
        z = dy.lift(self.dic, x)
        A = self.pred.model.A_d
        d = self.delay_samples
        self._x_hist.append(x)
        keep = max(self.y_ref_window, self.freeze_window)
        if len(self._x_hist) > keep:
            self._x_hist.pop(0)
        if self._prev is not None:
            # input that acted between the previous and current measured states
            idx = len(self._act_hist) - 1 - d
            if idx >= 0:
                B0p, up = self._act_hist[idx]
                self._res_hist.append(z - A @ self._prev - B0p @ [up])
            else:
                self._res_hist.append(z - A @ self._prev)
            if len(self._res_hist) > self.dist_window:
                self._res_hist.pop(0)
        w = np.mean(self._res_hist, axis=0) if self._res_hist else None
        B0 = freeze_input_matrix(self.pred, self.freeze_point())

        # noise suppression: average the raw measured states (not the lifted
        # vector, whose product terms would pick up oscillation variance),
        # lift, then roll the model over the buffered actions plus the
        # averaging group delay to compensate the known latency
        if self.meas_avg_window > 1:
            xa = np.mean(self._x_hist[-self.meas_avg_window:], axis=0)
            z0 = dy.lift(self.dic, xa)
        else:
            z0 = z
        roll = d + (self.meas_avg_window - 1) // 2
        if roll > 0:
            for B0j, uj in self._act_hist[-roll:]:
                z0 = A @ z0 + B0j @ [uj]
                if w is not None:
                    z0 = z0 + w

        u = 0.0
        if t >= self.activation_time:
            if self.cfg.y_ref is not None:
                y_ref = np.atleast_1d(self.cfg.y_ref)
            else:
                win = [xx[self.subset_pos] for xx in self._x_hist[-self.y_ref_window:]]
                y_ref = np.array([float(np.mean(win))])
            try:
                res = self._solve(z0, B0, y_ref, w)
                u = float(res.u0[0])
                if abs(u) < self.u_deadband:
                    u = 0.0
                self._u_held = u
                self.diag_rows.append((t, u, res.iterations, max(res.kkt[:3]), res.cost))
            except (QpInfeasibleError, QpIterationError, np.linalg.LinAlgError):
                self.failures += 1
                u = self._u_held
                self.diag_rows.append((t, u, -1, math.nan, math.nan))
        self._prev = z
        self._act_hist.append((B0, u))
        if len(self._act_hist) > d + (self.meas_avg_window - 1) // 2 + 2:
            self._act_hist.pop(0)
        return u

    def _solve(self, z0, B0, y_ref, w=None):
        qp = self.builder.build(B0, z0, y_ref, self.cfg.z_ref, w)
        u0_guess = None
        if self._u_prev_seq is not None:
            u0_guess = np.concatenate([self._u_prev_seq[1:], self._u_prev_seq[-1:]])
        sol = solve_qp(qp, u0=u0_guess)
        N, q = self.cfg.N_p, self.builder.qdim
        useq = sol.u.reshape(N, q)
        self._u_prev_seq = sol.u
        y_pred = self._replay(z0, B0, useq, w)
        kkt = kkt_residuals(qp, sol.u, sol.lam)
        return ControlResult(useq, useq[0], y_pred, sol.iterations, kkt,
                             len(sol.active_set), sol.cost)

    def mpc_step(self, x_k, y_ref=None):
        """One receding-horizon solve from the raw subset state x_k.

        Lifts x_k, freezes the input matrix at x_k and solves the condensed
        QP; the closed-loop path adds the smoothing/disturbance estimators on
        top of this same machinery.
        """
        x_k = np.asarray(x_k, dtype=float)
        z0 = dy.lift(self.dic, x_k)
        B0 = freeze_input_matrix(self.pred, x_k)
        if y_ref is None:
            y_ref = np.zeros(self.builder.p)
        return self._solve(z0, B0, np.atleast_1d(y_ref))

    def _replay(self, z0, B0, useq, w=None):
        z = z0.copy()
        ys = [float((self.C @ z)[0])]
        for uk in useq:
            z = self.pred.model.A_d @ z + B0 @ uk
            if w is not None:
                z = z + w
            ys.append(float((self.C @ z)[0]))
        return np.array(ys)


def closed_loop(scn, controller, seed=0):
    """Run the plant with the controller attached; returns (Trajectory, Metrics)."""
    from .metrics import compute_metrics
    traj = sc.simulate(scn, controller, seed=seed)
    act = getattr(controller, "activation_time", 0.0) if controller is not None else 0.0
    return traj, compute_metrics(traj, act)
