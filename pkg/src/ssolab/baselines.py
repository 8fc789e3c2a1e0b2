"""Comparison controllers: phase-compensation CSDC and the constant-input-matrix MPC."""

from dataclasses import dataclass
import cmath
import math

import numpy as np

from .mpc import DssoscController


@dataclass(frozen=True)
class CsdcParams:
    """Washout + repeated lead-lag compensator constants."""
    K_p: float = 0.20
    T_w: float = 0.10
    T_1: float = 0.1525
    T_2: float = 0.0014
    n_stages: int = 2            # lead-lag sections (the squared block)
    dt_sample: float = 2e-3
    prewarp_hz: float | None = None

    def __post_init__(self):
        if self.T_w <= 0 or self.T_2 <= 0 or self.dt_sample <= 0:
            raise ValueError("T_w, T_2 and dt_sample must be positive")


@dataclass
class Section:
    """First-order IIR section y[k] = b0 x[k] + b1 x[k-1] - a1 y[k-1]."""
    b0: float
    b1: float
    a1: float
    x_prev: float = 0.0
    y_prev: float = 0.0

    def step(self, x):
        y = self.b0 * x + self.b1 * self.x_prev - self.a1 * self.y_prev
        self.x_prev = x
        self.y_prev = y
        return y

    def reset(self):
        self.x_prev = 0.0
        self.y_prev = 0.0

    def response(self, z):
        return (self.b0 * z + self.b1) / (z + self.a1)


def _tustin_c(params):
    if params.prewarp_hz is None:
        return 2.0 / params.dt_sample
    w = 2.0 * math.pi * params.prewarp_hz
    return w / math.tan(w * params.dt_sample / 2.0)


def csdc_discretize(params):
    """Bilinear-transform sections of the compensator, washout first.

    Returns a list of Section; the cascade output times K_p is the raw
    (unclamped) controller output.
    """
    c = _tustin_c(params)
    a = params.T_w * c
    washout = Section(a / (1.0 + a), -a / (1.0 + a), (1.0 - a) / (1.0 + a))
    secs = [washout]
    d1 = params.T_1 * c
    d2 = params.T_2 * c
    for _ in range(params.n_stages):
        secs.append(Section((1.0 + d1) / (1.0 + d2), (1.0 - d1) / (1.0 + d2),
                            (1.0 - d2) / (1.0 + d2)))
    return secs


def csdc_step(sections, gain, x):
    """One sample through the cascade; returns the unclamped output."""
    v = x
    for s in sections:
        v = s.step(v)
    return gain * v


def analog_response(params, omega):
    """|H(jw)| and phase of the continuous compensator."""
    s = 1j * omega
    H = params.K_p * (params.T_w * s) / (1.0 + params.T_w * s) \
        * ((1.0 + params.T_1 * s) / (1.0 + params.T_2 * s)) ** params.n_stages
    return H


def discrete_response(sections, gain, omega, dt):
    """Frequency response of the discretized cascade at analog frequency omega."""
    z = cmath.exp(1j * omega * dt)
    H = gain
    for s in sections:
        H *= s.response(z)
    return H


class CsdcController:
    """Sampled CSDC acting on one measured channel, gated and clamped.

    The feedback sign is a loop convention of this plant realization (the
    compensator parameters themselves are fixed); sign=-1 damps the shipped
    system.  The filter runs on measurements from t=0 so activation is smooth.
    """

    def __init__(self, params, meas_index, activation_time=0.0, u_limit=0.1,
                 sign=-1.0, name="csdc"):
        self.params = params
        self.meas_index = meas_index
        self.activation_time = activation_time
        self.u_limit = u_limit
        self.sign = sign
        self.name = name
        self.sections = csdc_discretize(params)

    def reset(self):
        for s in self.sections:
            s.reset()

    def step(self, t, y):
        v = csdc_step(self.sections, self.params.K_p, float(y[self.meas_index]))
        if t < self.activation_time:
            return 0.0
        u = self.sign * v
        return min(max(u, -self.u_limit), self.u_limit)


def kltic_controller(klti_pred, config, output_state, meas_positions=None,
                     activation_time=0.0, **controller_kwargs):
    """Constant-input-matrix MPC baseline; identical machinery to the main controller."""
    return DssoscController(klti_pred, config, output_state,
                            meas_positions=meas_positions,
                            activation_time=activation_time, name="kltic",
                            **controller_kwargs)
