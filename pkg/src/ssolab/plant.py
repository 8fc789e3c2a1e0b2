"""Grid-following converter plant model of a renewable energy base behind a weak AC grid.

State vector (dq frame of the PLL, per-unit electrical quantities, time in seconds):

    x = [v_dc, x_v, x_id, x_iq, v_od, v_oq, x_w, delta,
         i_rd, i_rq, v_cd, v_cq, i_gd, i_gq]

The model chains a DC link, an outer voltage loop, an inner current loop,
a first-order actuation lag, a PLL, and an LCL filter feeding the grid
through a (possibly large) grid impedance.  The single control input ``u``
is an additive increment on the q-axis current reference.
"""

from dataclasses import dataclass, replace
import math

import numpy as np

STATE_NAMES = (
    "v_dc", "x_v", "x_id", "x_iq", "v_od", "v_oq", "x_w", "delta",
    "i_rd", "i_rq", "v_cd", "v_cq", "i_gd", "i_gq",
)
N_STATES = len(STATE_NAMES)
IDX = {name: i for i, name in enumerate(STATE_NAMES)}


class SingularStateError(RuntimeError):
    """Raised when the DC-link voltage collapses and the dynamics divide by ~0."""


@dataclass(frozen=True)
class PlantParams:
    """Circuit constants, controller gains and references (per-unit, seconds).

    The shipped values are calibrated, not measured from hardware: ``weak_grid()``
    places a single negatively damped mode in the 5-55 Hz band, ``strong_grid()``
    damps everything.  See README for the calibration procedure.
    """

    # circuit
    C_dc: float = 0.049     # DC-link capacitance
    L_r: float = 0.0012     # converter-side inductance
    R_r: float = 90.0       # converter-side series loss term
    C_r: float = 0.00022    # filter capacitance
    R_c: float = 0.24       # capacitor damping resistance
    L_g: float = 0.0006     # grid-side filter inductance
    R_g: float = 11.5       # grid-side series loss term
    L_s: float = 0.0026     # grid (line) inductance; the weak-grid knob
    R_s: float = 0.074      # grid series resistance
    # controller gains
    k_p1: float = -0.9      # voltage loop P
    k_i1: float = -15.0     # voltage loop I
    k_p2: float = 1.68      # current loop P
    k_i2: float = 19.0      # current loop I
    k_p3: float = 9.46      # PLL P
    k_i3: float = 4300.0    # PLL I
    T_d: float = 0.0188     # actuation lag
    # references and grid
    v_dc_ref: float = 1.0
    v_sm: float = 1.0
    omega_0: float = 100.0 * math.pi   # 50 Hz grid
    i_sc: float = 0.30      # DC-side source current (wind-power proxy)
    # reporting base
    s_base_mva: float = 1.5  # single-machine MVA base for kW conversion

    def __post_init__(self):
        for name in ("C_dc", "L_r", "C_r", "L_g", "L_s", "T_d"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")

    @property
    def L_sigma(self):
        return self.L_g + self.L_s

    @property
    def R_sigma(self):
        return self.R_g + self.R_s

    def replace(self, **changes):
        return replace(self, **changes)


# Pre-event (normal) grid inductance used by the shipped scenarios: the
# reactance step L_s 0.00078 -> 0.0026 is what triggers the oscillation.
L_S_PRE_EVENT = 0.00078
L_S_STRONG = 0.0005


def pcc_voltage(x, p):
    """PCC voltage (v_gd, v_gq) in the PLL dq frame.

    The grid branch gives v_g = v_s + R_s*i_g + omega*L_s*J*i_g with the grid
    source at (v_sm cos delta, -v_sm sin delta).  Because the PLL frequency
    omega itself depends on v_gq, the q component is the closed-form solution
    of that algebraic loop.  Works elementwise on floats or arrays.
    """
    delta = x[IDX["delta"]]
    x_w = x[IDX["x_w"]]
    i_gd = x[IDX["i_gd"]]
    i_gq = x[IDX["i_gq"]]
    den = 1.0 - p.k_p3 * p.L_s * i_gd
    v_gq = (-p.v_sm * np.sin(delta) + p.R_s * i_gq
            + (p.omega_0 + p.k_i3 * x_w) * p.L_s * i_gd) / den
    omega = p.omega_0 + p.k_p3 * v_gq + p.k_i3 * x_w
    v_gd = p.v_sm * np.cos(delta) + p.R_s * i_gd - omega * p.L_s * i_gq
    return v_gd, v_gq


def active_power(x, p):
    """Active power delivered at the PCC (per-unit, 3/2 dq convention)."""
    v_gd, v_gq = pcc_voltage(x, p)
    return 1.5 * (v_gd * x[IDX["i_gd"]] + v_gq * x[IDX["i_gq"]])


def derivative(x, u, p):
    """Time derivative of the state.  ``x`` is (14,) or (14, N); elementwise in N.

    ``u`` is the q-axis current-reference increment (scalar or length-N).
    Raises SingularStateError when v_dc is at or below zero.
    """
    x = np.asarray(x, dtype=float)
    v_dc = x[0]
    if np.any(v_dc <= 0.0):
        raise SingularStateError("v_dc <= 0: DC-link dynamics are singular")
    x_v, x_id, x_iq, v_od, v_oq, x_w, delta = x[1], x[2], x[3], x[4], x[5], x[6], x[7]
    i_rd, i_rq, v_cd, v_cq, i_gd, i_gq = x[8], x[9], x[10], x[11], x[12], x[13]

    den = 1.0 - p.k_p3 * p.L_s * i_gd
    v_gq = (-p.v_sm * np.sin(delta) + p.R_s * i_gq
            + (p.omega_0 + p.k_i3 * x_w) * p.L_s * i_gd) / den
    omega = p.omega_0 + p.k_p3 * v_gq + p.k_i3 * x_w

    i_gd_ref = p.k_p1 * (p.v_dc_ref - v_dc) + p.k_i1 * x_v
    i_gq_ref = u
    v_od_ref = p.k_p2 * (i_gd_ref - i_gd) + p.k_i2 * x_id
    v_oq_ref = p.k_p2 * (i_gq_ref - i_gq) + p.k_i2 * x_iq

    v_rd = v_cd + p.R_c * (i_rd - i_gd)
    v_rq = v_cq + p.R_c * (i_rq - i_gq)

    out = np.empty_like(x)
    out[0] = (p.i_sc - 1.5 * (v_od * i_rd + v_oq * i_rq) / v_dc) / p.C_dc
    out[1] = p.v_dc_ref - v_dc
    out[2] = i_gd_ref - i_gd
    out[3] = i_gq_ref - i_gq
    out[4] = (v_od_ref - v_od) / p.T_d
    out[5] = (v_oq_ref - v_oq) / p.T_d
    out[6] = v_gq
    out[7] = p.k_p3 * v_gq + p.k_i3 * x_w
    out[8] = (v_od - v_rd) / p.L_r - p.R_r * i_rd + omega * p.L_r * i_rq
    out[9] = (v_oq - v_rq) / p.L_r - omega * p.L_r * i_rd - p.R_r * i_rq
    out[10] = (i_rd - i_gd) / p.C_r + omega * p.C_r * v_cq
    out[11] = (i_rq - i_gq) / p.C_r - omega * p.C_r * v_cd
    out[12] = (v_rd - p.v_sm * np.cos(delta)) / p.L_sigma - p.R_sigma * i_gd + omega * p.L_sigma * i_gq
    out[13] = (v_rq + p.v_sm * np.sin(delta)) / p.L_sigma - omega * p.L_sigma * i_gd - p.R_sigma * i_gq
    return out


def _deriv_floats(s, u, p):
    """Plain-float derivative, same arithmetic as `derivative`.

    Used by the scalar simulation loop; tuple in, tuple out.  Kept in exact
    step-for-step correspondence with the array version.
    """
    (v_dc, x_v, x_id, x_iq, v_od, v_oq, x_w, delta,
     i_rd, i_rq, v_cd, v_cq, i_gd, i_gq) = s
    if v_dc <= 0.0:
        raise SingularStateError("v_dc <= 0: DC-link dynamics are singular")

    den = 1.0 - p.k_p3 * p.L_s * i_gd
    v_gq = (-p.v_sm * math.sin(delta) + p.R_s * i_gq
            + (p.omega_0 + p.k_i3 * x_w) * p.L_s * i_gd) / den
    omega = p.omega_0 + p.k_p3 * v_gq + p.k_i3 * x_w

    i_gd_ref = p.k_p1 * (p.v_dc_ref - v_dc) + p.k_i1 * x_v
    v_od_ref = p.k_p2 * (i_gd_ref - i_gd) + p.k_i2 * x_id
    v_oq_ref = p.k_p2 * (u - i_gq) + p.k_i2 * x_iq

    v_rd = v_cd + p.R_c * (i_rd - i_gd)
    v_rq = v_cq + p.R_c * (i_rq - i_gq)
    L_sig = p.L_g + p.L_s
    R_sig = p.R_g + p.R_s

    return (
        (p.i_sc - 1.5 * (v_od * i_rd + v_oq * i_rq) / v_dc) / p.C_dc,
        p.v_dc_ref - v_dc,
        i_gd_ref - i_gd,
        u - i_gq,
        (v_od_ref - v_od) / p.T_d,
        (v_oq_ref - v_oq) / p.T_d,
        v_gq,
        p.k_p3 * v_gq + p.k_i3 * x_w,
        (v_od - v_rd) / p.L_r - p.R_r * i_rd + omega * p.L_r * i_rq,
        (v_oq - v_rq) / p.L_r - omega * p.L_r * i_rd - p.R_r * i_rq,
        (i_rd - i_gd) / p.C_r + omega * p.C_r * v_cq,
        (i_rq - i_gq) / p.C_r - omega * p.C_r * v_cd,
        (v_rd - p.v_sm * math.cos(delta)) / L_sig - R_sig * i_gd + omega * L_sig * i_gq,
        (v_rq + p.v_sm * math.sin(delta)) / L_sig - omega * L_sig * i_gd - R_sig * i_gq,
    )


def step_rk4(x, u, dt, p):
    """One classical RK4 step with u held constant over the step."""
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=float)
    k1 = derivative(x, u, p)
    k2 = derivative(x + 0.5 * dt * k1, u, p)
    k3 = derivative(x + 0.5 * dt * k2, u, p)
    k4 = derivative(x + dt * k3, u, p)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _step_rk4_floats(s, u, dt, p):
    """Plain-float RK4 step over a state tuple."""
    k1 = _deriv_floats(s, u, p)
    s2 = tuple(si + 0.5 * dt * ki for si, ki in zip(s, k1))
    k2 = _deriv_floats(s2, u, p)
    s3 = tuple(si + 0.5 * dt * ki for si, ki in zip(s, k2))
    k3 = _deriv_floats(s3, u, p)
    s4 = tuple(si + dt * ki for si, ki in zip(s, k3))
    k4 = _deriv_floats(s4, u, p)
    c = dt / 6.0
    return tuple(si + c * (a + 2.0 * b + 2.0 * d + e)
                 for si, a, b, d, e in zip(s, k1, k2, k3, k4))


def _rk4_span(s, u, dt, nsteps, p):
    """Integrate the float path for `nsteps` RK4 steps with constant input.

    Parameters are hoisted to locals once; this is the hot loop of the
    scalar simulator.  Raises SingularStateError if v_dc collapses.
    """
    C_dc = p.C_dc; L_r = p.L_r; R_r = p.R_r; C_r = p.C_r; R_c = p.R_c
    L_sig = p.L_g + p.L_s; R_sig = p.R_g + p.R_s
    L_s = p.L_s; R_s = p.R_s
    k_p1 = p.k_p1; k_i1 = p.k_i1; k_p2 = p.k_p2; k_i2 = p.k_i2
    k_p3 = p.k_p3; k_i3 = p.k_i3
    T_d = p.T_d; v_dc_ref = p.v_dc_ref; v_sm = p.v_sm
    w0 = p.omega_0; i_sc = p.i_sc
    sin = math.sin; cos = math.cos

    def deriv(v_dc, x_v, x_id, x_iq, v_od, v_oq, x_w, delta,
              i_rd, i_rq, v_cd, v_cq, i_gd, i_gq):
        if v_dc <= 0.0:
            raise SingularStateError("v_dc <= 0: DC-link dynamics are singular")
        v_gq = (-v_sm * sin(delta) + R_s * i_gq
                + (w0 + k_i3 * x_w) * L_s * i_gd) / (1.0 - k_p3 * L_s * i_gd)
        omega = w0 + k_p3 * v_gq + k_i3 * x_w
        i_gd_ref = k_p1 * (v_dc_ref - v_dc) + k_i1 * x_v
        v_od_ref = k_p2 * (i_gd_ref - i_gd) + k_i2 * x_id
        v_oq_ref = k_p2 * (u - i_gq) + k_i2 * x_iq
        v_rd = v_cd + R_c * (i_rd - i_gd)
        v_rq = v_cq + R_c * (i_rq - i_gq)
        return (
            (i_sc - 1.5 * (v_od * i_rd + v_oq * i_rq) / v_dc) / C_dc,
            v_dc_ref - v_dc,
            i_gd_ref - i_gd,
            u - i_gq,
            (v_od_ref - v_od) / T_d,
            (v_oq_ref - v_oq) / T_d,
            v_gq,
            k_p3 * v_gq + k_i3 * x_w,
            (v_od - v_rd) / L_r - R_r * i_rd + omega * L_r * i_rq,
            (v_oq - v_rq) / L_r - omega * L_r * i_rd - R_r * i_rq,
            (i_rd - i_gd) / C_r + omega * C_r * v_cq,
            (i_rq - i_gq) / C_r - omega * C_r * v_cd,
            (v_rd - v_sm * cos(delta)) / L_sig - R_sig * i_gd + omega * L_sig * i_gq,
            (v_rq + v_sm * sin(delta)) / L_sig - omega * L_sig * i_gd - R_sig * i_gq,
        )

    h = 0.5 * dt
    c6 = dt / 6.0
    for _ in range(nsteps):
        k1 = deriv(*s)
        k2 = deriv(*[si + h * ki for si, ki in zip(s, k1)])
        k3 = deriv(*[si + h * ki for si, ki in zip(s, k2)])
        k4 = deriv(*[si + dt * ki for si, ki in zip(s, k3)])
        s = tuple(si + c6 * (a + 2.0 * b + 2.0 * d + e)
                  for si, a, b, d, e in zip(s, k1, k2, k3, k4))
    return s


def input_column(p):
    """Affine entry points of the current-reference increment: b with x_dot = f(x) + b*u.

    u adds to x_iq_dot directly and to v_oq_dot through the proportional path
    of the current loop and the actuation lag.
    """
    b = np.zeros(N_STATES)
    b[IDX["x_iq"]] = 1.0
    b[IDX["v_oq"]] = p.k_p2 / p.T_d
    return b


def equilibrium_guess(p):
    """Heuristic starting point for the equilibrium solve."""
    i_gd = p.i_sc / 1.5
    s = min(max(p.omega_0 * p.L_s * i_gd / p.v_sm, -0.95), 0.95)
    delta = math.asin(s)
    x0 = np.zeros(N_STATES)
    x0[IDX["v_dc"]] = p.v_dc_ref
    x0[IDX["x_v"]] = i_gd / p.k_i1
    x0[IDX["i_gd"]] = i_gd
    x0[IDX["i_rd"]] = i_gd
    x0[IDX["delta"]] = delta
    x0[IDX["v_cd"]] = p.v_sm * math.cos(delta)
    x0[IDX["v_od"]] = p.v_sm * math.cos(delta)
    x0[IDX["x_id"]] = x0[IDX["v_od"]] / p.k_i2
    return x0


def solve_equilibrium(p, guess=None, tol=1e-11):
    """Solve derivative(x, 0, p) = 0 by damped Newton iteration.

    Returns the equilibrium state; raises RuntimeError if the residual cannot
    be reduced below `tol` (in the max norm).
    """
    x = np.array(equilibrium_guess(p) if guess is None else guess, dtype=float)
    for _ in range(200):
        r = derivative(x, 0.0, p)
        if np.max(np.abs(r)) < tol:
            return x
        J = _fd_jacobian(x, p)
        try:
            dx = np.linalg.solve(J, -r)
        except np.linalg.LinAlgError:
            dx = np.linalg.lstsq(J, -r, rcond=None)[0]
        step = 1.0
        r0 = np.max(np.abs(r))
        for _ in range(40):
            x_new = x + step * dx
            if x_new[IDX["v_dc"]] > 1e-6:
                try:
                    r_new = derivative(x_new, 0.0, p)
                    if np.max(np.abs(r_new)) < r0:
                        x = x_new
                        break
                except SingularStateError:
                    pass
            step *= 0.5
        else:
            raise RuntimeError("equilibrium solve stalled; residual %.3e" % r0)
    raise RuntimeError("equilibrium solve did not converge")


def _fd_jacobian(x, p, u=0.0, h=1e-7):
    """Central finite-difference Jacobian of the derivative at x."""
    n = len(x)
    J = np.zeros((n, n))
    for i in range(n):
        hi = h * max(1.0, abs(x[i]))
        xp = x.copy()
        xm = x.copy()
        xp[i] += hi
        xm[i] -= hi
        J[:, i] = (derivative(xp, u, p) - derivative(xm, u, p)) / (2.0 * hi)
    return J


def linearize(x_eq, p, residual_tol=1e-8):
    """Jacobian at an equilibrium plus its eigenvalues.

    Returns (J, eigvals, table) where table rows are
    (Re, Im, frequency_hz, damping_ratio), one per eigenvalue.
    Raises ValueError if x_eq is not an equilibrium.
    """
    x_eq = np.asarray(x_eq, dtype=float)
    res = np.max(np.abs(derivative(x_eq, 0.0, p)))
    if res > residual_tol:
        raise ValueError(f"not an equilibrium: residual {res:.3e} > {residual_tol:g}")
    J = _fd_jacobian(x_eq, p)
    eigvals = np.linalg.eigvals(J)
    table = []
    for lam in eigvals:
        mag = abs(lam)
        zeta = -lam.real / mag if mag > 0.0 else 0.0
        table.append((lam.real, lam.imag, abs(lam.imag) / (2.0 * math.pi), zeta))
    return J, eigvals, table


def unstable_pairs(eigvals, f_lo=5.0, f_hi=55.0):
    """Positive-real-part eigenvalues with |Im|/2pi inside [f_lo, f_hi], one per pair."""
    out = []
    for lam in eigvals:
        if lam.imag < 0.0:
            continue
        f = lam.imag / (2.0 * math.pi)
        if lam.real > 0.0 and f_lo <= f <= f_hi:
            out.append(lam)
    return out
