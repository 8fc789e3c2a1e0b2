"""Scenario definition, closed-loop simulation and batched trajectory rollout.

A Scenario bundles plant parameters, timing, the initial-condition rule,
a list of timed events and the measurement model.  `simulate` integrates a
single trajectory at dt_int with an optional sampled-data controller in the
loop; `batch_rollout` integrates many open-loop trajectories side by side
for dataset generation.
"""

from dataclasses import dataclass, field
import math

import numpy as np

from . import plant
from .plant import IDX, N_STATES, STATE_NAMES, PlantParams, SingularStateError

# divergence guards for the integrators
V_DC_FLOOR = 0.05
DELTA_ESCAPE = 3.0      # rad away from the initial operating point
STATE_BOUND = 1e6

# sub-stream tags for seed splitting (documented rule: SeedSequence([seed, tag, index]))
STREAM_IC = 11
STREAM_MEAS = 12
STREAM_INPUT = 13


@dataclass(frozen=True)
class GridReactanceStep:
    time: float
    L_s: float
    R_s: float | None = None   # None keeps the current value


@dataclass(frozen=True)
class ControlGainSwitch:
    time: float
    gains: dict                # subset of {k_p1..k_i3} to replace


@dataclass(frozen=True)
class WindFluctuation:
    time: float                # start of the fluctuation window
    stop: float
    amplitude: float           # relative, i_sc scaled by (1 + amplitude) inside the window


@dataclass(frozen=True)
class MeasurementSpec:
    """Measurement corruption: channel subset, additive noise, transport delay.

    Noise per channel is Gaussian with std scaled so that a channel sitting at
    its initial operating value has the configured SNR; channels whose
    operating value is ~0 get no noise.  Delay is rounded to whole samples.
    """
    snr_db: float | None = None
    delay_s: float = 0.0
    measured_states: tuple = STATE_NAMES   # names, in measurement-vector order


@dataclass
class Scenario:
    params: PlantParams
    duration: float = 5.0
    dt_int: float = 5e-5
    dt_sample: float = 2e-3
    init: str = "equilibrium"          # "equilibrium" | "perturbed" | explicit array
    perturb_rel: float = 0.03
    events: tuple = ()
    measurement: MeasurementSpec = field(default_factory=MeasurementSpec)
    u_limit: float = 0.1
    name: str = "scenario"

    def __post_init__(self):
        ratio = self.dt_sample / self.dt_int
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("dt_sample must be an integer multiple of dt_int")
        for ev in self.events:
            if not 0.0 <= ev.time <= self.duration:
                raise ValueError(f"event at t={ev.time} outside [0, {self.duration}]")

    @property
    def steps_per_sample(self):
        return int(round(self.dt_sample / self.dt_int))


@dataclass
class Trajectory:
    t: np.ndarray          # (ns,)
    x: np.ndarray          # (14, ns)
    u: np.ndarray          # (ns,) input applied from each sample onward
    p_w: np.ndarray        # (ns,) PCC active power, per-unit
    v_gd: np.ndarray
    v_gq: np.ndarray
    diverged: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        ns = len(self.t)
        if not (self.x.shape == (N_STATES, ns) and len(self.u) == ns == len(self.p_w)):
            raise ValueError("inconsistent trajectory column lengths")
        if ns > 1 and np.any(np.diff(self.t) <= 0):
            raise ValueError("times must be strictly increasing")

    def p_w_kw(self):
        base = self.meta.get("s_base_mva", 1.5)
        return self.p_w * base * 1e3


def apply_event(p, ev, t):
    """Parameters in effect after `ev` fires (state is continuous across events)."""
    if isinstance(ev, GridReactanceStep):
        changes = {"L_s": ev.L_s}
        if ev.R_s is not None:
            changes["R_s"] = ev.R_s
        return p.replace(**changes)
    if isinstance(ev, ControlGainSwitch):
        return p.replace(**ev.gains)
    if isinstance(ev, WindFluctuation):
        # handled by _wind_scale; params unchanged here
        return p
    raise TypeError(f"unknown event {ev!r}")


def _wind_scale(events, t):
    scale = 1.0
    for ev in events:
        if isinstance(ev, WindFluctuation) and ev.time <= t < ev.stop:
            scale *= 1.0 + ev.amplitude
    return scale


def noise_std(scenario, x_ref):
    """Per-channel noise std for the measured subset, from the SNR spec.

    SNR is taken against the channel's pre-disturbance operating value, so
    quiescent channels (operating value ~ 0) carry no noise.
    """
    ms = scenario.measurement
    idx = [IDX[n] for n in ms.measured_states]
    if ms.snr_db is None:
        return np.zeros(len(idx))
    return np.abs(x_ref[idx]) / (10.0 ** (ms.snr_db / 20.0))


def simulate(scenario, controller=None, seed=0):
    """Integrate one trajectory; the controller (if any) runs at dt_sample.

    The controller sees the measured-state subset, delayed by whole samples
    and corrupted by the configured noise; its scalar output is zero-order
    held and clamped to +-u_limit.  The measurement stream (noise draws,
    delays) depends only on (scenario, seed), never on the controller, so
    competing controllers see identical streams.  Divergence truncates the
    trajectory and sets the flag instead of raising.
    """
    p_now = scenario.params
    if isinstance(scenario.init, str):
        x_ref = plant.solve_equilibrium(p_now)
        x0 = x_ref
        if scenario.init == "perturbed":
            rng_ic = np.random.default_rng(np.random.SeedSequence([seed, STREAM_IC]))
            x0 = x_ref + rng_ic.uniform(-scenario.perturb_rel, scenario.perturb_rel,
                                        N_STATES) * np.abs(x_ref)
        elif scenario.init != "equilibrium":
            raise ValueError(f"unknown init spec {scenario.init!r}")
    else:
        x0 = np.asarray(scenario.init, dtype=float).copy()
        x_ref = x0

    rng_meas = np.random.default_rng(np.random.SeedSequence([seed, STREAM_MEAS]))
    ms = scenario.measurement
    meas_idx = [IDX[n] for n in ms.measured_states]
    std = noise_std(scenario, x_ref)
    delay_n = int(round(ms.delay_s / scenario.dt_sample))

    n_samples = int(round(scenario.duration / scenario.dt_sample)) + 1
    spp = scenario.steps_per_sample
    dt = scenario.dt_int

    # event/wind boundaries at integration-step resolution
    wind_events = [ev for ev in scenario.events if isinstance(ev, WindFluctuation)]
    ev_q = sorted(((int(math.ceil(ev.time / dt - 1e-9)), j, ev)
                   for j, ev in enumerate(scenario.events)), key=lambda r: r[:2])
    splits = sorted({st for st, _, _ in ev_q}
                    | {int(math.ceil(ev.stop / dt - 1e-9)) for ev in wind_events})

    base_i_sc = p_now.i_sc

    def effective(p, step):
        w = _wind_scale(wind_events, step * dt)
        return p.replace(i_sc=p.i_sc * w) if w != 1.0 else p

    # events at or before t=0 are in force from the first sample
    while ev_q and ev_q[0][0] <= 0:
        _, _, ev = ev_q.pop(0)
        p_now = apply_event(p_now, ev, 0.0)
    p_eff = effective(p_now, 0)

    if controller is not None and hasattr(controller, "reset"):
        controller.reset()

    ts = np.empty(n_samples)
    xs = np.empty((N_STATES, n_samples))
    us = np.empty(n_samples)
    seg_params = [(0, p_eff)]   # (first sample using these params, params)
    meas_buf = []
    s = tuple(x0)
    u = 0.0
    diverged = False
    k_stop = n_samples
    step = 0

    for k in range(n_samples):
        t = k * scenario.dt_sample
        ts[k] = t
        xs[:, k] = s
        if not all(math.isfinite(v) for v in s) or \
                s[IDX["v_dc"]] < V_DC_FLOOR or \
                abs(s[IDX["delta"]] - x0[IDX["delta"]]) > DELTA_ESCAPE or \
                max(abs(v) for v in s) > STATE_BOUND:
            us[k] = u
            diverged = True
            k_stop = k + 1
            break

        noise = rng_meas.standard_normal(len(meas_idx))
        y_now = np.array([s[i] for i in meas_idx]) + std * noise
        meas_buf.append(y_now)
        y = meas_buf[max(0, k - delay_n)]

        if controller is not None:
            u = float(controller.step(t, y))
            u = min(max(u, -scenario.u_limit), scenario.u_limit)
        us[k] = u
        if k == n_samples - 1:
            break

        # integrate one sample window, splitting at event/wind boundaries
        target = step + spp
        changed = False
        try:
            while step < target:
                while ev_q and ev_q[0][0] <= step:
                    _, _, ev = ev_q.pop(0)
                    p_now = apply_event(p_now, ev, step * dt)
                    changed = True
                if changed or step in splits:
                    p_eff = effective(p_now, step)
                    changed = False
                nxt = min([target] + [x for x in splits if step < x < target]
                          + [st for st, _, _ in ev_q if step < st < target])
                s = plant._rk4_span(s, u, dt, nxt - step, p_eff)
                step = nxt
        except (SingularStateError, ValueError, OverflowError):
            diverged = True
            k_stop = k + 1
            break
        if seg_params[-1][1] is not p_eff:
            seg_params.append((k + 1, p_eff))

    ns = k_stop if diverged else n_samples
    ts, xs, us = ts[:ns], xs[:, :ns], us[:ns]

    # derived outputs with the parameters in effect on each segment
    p_w = np.empty(ns)
    v_gd = np.empty(ns)
    v_gq = np.empty(ns)
    seg_params.append((ns, None))
    with np.errstate(all="ignore"):
        for (k0, pseg), (k1, _) in zip(seg_params[:-1], seg_params[1:]):
            k1 = min(k1, ns)
            if k0 >= k1:
                continue
            blk = xs[:, k0:k1]
            gd, gq = plant.pcc_voltage(blk, pseg)
            v_gd[k0:k1] = gd
            v_gq[k0:k1] = gq
            p_w[k0:k1] = 1.5 * (gd * blk[IDX["i_gd"]] + gq * blk[IDX["i_gq"]])

    meta = {"seed": seed, "scenario": scenario.name,
            "s_base_mva": scenario.params.s_base_mva}
    return Trajectory(ts, xs, us, p_w, v_gd, v_gq, diverged=diverged, meta=meta)


def batch_rollout(p, x0_batch, u_batch, dt_int, steps_per_sample, n_samples):
    """Open-loop rollout of many trajectories at once.

    x0_batch: (14, M) initial states; u_batch: (M, n_samples-1) inputs held
    over each sample window.  Returns (states (14, M, n_samples),
    n_valid (M,)) where n_valid[j] is the number of leading samples of
    trajectory j before any divergence.
    """
    x0_batch = np.asarray(x0_batch, dtype=float)
    m = x0_batch.shape[1]
    out = np.full((N_STATES, m, n_samples), np.nan)
    out[:, :, 0] = x0_batch
    alive = np.ones(m, dtype=bool)
    n_valid = np.full(m, n_samples, dtype=int)
    x = x0_batch.copy()
    delta0 = x0_batch[IDX["delta"]].copy()

    with np.errstate(all="ignore"):
        for k in range(1, n_samples):
            ua = u_batch[:, k - 1] if u_batch is not None else np.zeros(m)
            xa = x[:, alive]
            for _ in range(steps_per_sample):
                xa = _rk4_batch(xa, ua[alive], dt_int, p)
            x[:, alive] = xa
            ok = (np.isfinite(x).all(axis=0)
                  & (x[IDX["v_dc"]] > V_DC_FLOOR)
                  & (np.abs(x[IDX["delta"]] - delta0) < DELTA_ESCAPE)
                  & (np.abs(x).max(axis=0) < STATE_BOUND))
            newly_dead = alive & ~ok
            n_valid[newly_dead] = k
            alive &= ok
            out[:, alive, k] = x[:, alive]
            if not alive.any():
                break
    return out, n_valid


def _rk4_batch(x, u, dt, p):
    k1 = _deriv_batch(x, u, p)
    k2 = _deriv_batch(x + 0.5 * dt * k1, u, p)
    k3 = _deriv_batch(x + 0.5 * dt * k2, u, p)
    k4 = _deriv_batch(x + dt * k3, u, p)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _deriv_batch(x, u, p):
    """Batch derivative without the singularity guard: invalid columns go nan."""
    v_dc = x[0]
    x_v, x_id, x_iq, v_od, v_oq, x_w, delta = x[1], x[2], x[3], x[4], x[5], x[6], x[7]
    i_rd, i_rq, v_cd, v_cq, i_gd, i_gq = x[8], x[9], x[10], x[11], x[12], x[13]

    den = 1.0 - p.k_p3 * p.L_s * i_gd
    v_gq = (-p.v_sm * np.sin(delta) + p.R_s * i_gq
            + (p.omega_0 + p.k_i3 * x_w) * p.L_s * i_gd) / den
    omega = p.omega_0 + p.k_p3 * v_gq + p.k_i3 * x_w
    i_gd_ref = p.k_p1 * (p.v_dc_ref - v_dc) + p.k_i1 * x_v
    v_od_ref = p.k_p2 * (i_gd_ref - i_gd) + p.k_i2 * x_id
    v_oq_ref = p.k_p2 * (u - i_gq) + p.k_i2 * x_iq
    v_rd = v_cd + p.R_c * (i_rd - i_gd)
    v_rq = v_cq + p.R_c * (i_rq - i_gq)

    out = np.empty_like(x)
    out[0] = (p.i_sc - 1.5 * (v_od * i_rd + v_oq * i_rq) / v_dc) / p.C_dc
    out[1] = p.v_dc_ref - v_dc
    out[2] = i_gd_ref - i_gd
    out[3] = u - i_gq
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
