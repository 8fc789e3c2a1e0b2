"""Oscillation performance metrics: amplitude, settling time, dominant frequency."""

from dataclasses import dataclass

import numpy as np


@dataclass
class Metrics:
    amplitude_pu: float          # max |P_w - P_ss| after activation
    amplitude_kw: float
    settling_time: float | None  # seconds from activation; None if unsettled
    settled: bool
    diverged: bool
    freq_hz: float               # dominant post-activation frequency of P_w
    p_ss: float
    extras: dict | None = None   # e.g. prediction-RMSE summaries

    def as_dict(self):
        d = {"amplitude_pu": self.amplitude_pu, "amplitude_kw": self.amplitude_kw,
             "settling_time_s": self.settling_time, "settled": self.settled,
             "diverged": self.diverged, "freq_hz": self.freq_hz, "p_ss": self.p_ss}
        if self.extras:
            d.update(self.extras)
        return d


def dominant_frequency(t, sig, f_min=1.0):
    """Hann-windowed FFT peak above f_min; 0.0 when the window is too short."""
    n = len(sig)
    if n < 16:
        return 0.0
    dt = float(t[1] - t[0])
    w = (sig - np.mean(sig)) * np.hanning(n)
    F = np.abs(np.fft.rfft(w))
    fr = np.fft.rfftfreq(n, dt)
    mask = fr >= f_min
    if not mask.any() or not np.any(F[mask] > 0):
        return 0.0
    return float(fr[mask][np.argmax(F[mask])])


def compute_metrics(traj, activation_time, band_pct=0.02):
    """Envelope-band oscillation metrics of the active-power channel.

    The quiescent baseline P_ss is the mean over the final 10% of the
    trajectory; the trajectory counts as settled only if that window already
    sits inside the band (band_pct of the post-activation peak deviation).
    Settling time is measured from activation to the first instant after
    which the signal never leaves the band.
    """
    t = traj.t
    if len(t) == 0 or activation_time > t[-1] + 1e-12:
        raise ValueError("trajectory does not contain the activation time")
    p = traj.p_w
    n_tail = max(1, int(round(0.10 * len(t))))
    p_ss = float(np.mean(p[-n_tail:]))
    post = t >= activation_time - 1e-12
    dev = np.abs(p - p_ss)
    amp = float(np.max(dev[post])) if post.any() else 0.0
    band = band_pct * amp

    base = traj.meta.get("s_base_mva", 1.5)
    amp_kw = amp * base * 1e3

    settled = not traj.diverged
    settle = None
    if settled and amp > 0.0:
        if float(np.max(dev[-n_tail:])) > band:
            settled = False
        else:
            post_idx = np.nonzero(post)[0]
            viol = post_idx[dev[post_idx] > band]
            if len(viol) == 0:
                settle = 0.0
            else:
                k_last = int(viol[-1])
                if k_last + 1 >= len(t):
                    settled = False
                else:
                    settle = float(t[k_last + 1] - activation_time)
    elif settled:
        settle = 0.0

    freq = dominant_frequency(t[post], p[post]) if post.sum() >= 16 else 0.0
    return Metrics(amp, amp_kw, settle if settled else None, settled,
                   traj.diverged, freq, p_ss)
