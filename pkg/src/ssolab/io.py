"""File formats: trajectory CSV, plain-text matrix containers, tables, plots, summaries.

The matrix container stores float payloads as C99 hex floats so that models
round-trip bit-exactly through text.
"""

import csv
import json
import os

import numpy as np

from .plant import N_STATES, STATE_NAMES
from .scenario import Trajectory

TRAJ_HEADER = ["t"] + list(STATE_NAMES) + ["u", "P_w", "v_gd", "v_gq"]


def write_trajectory_csv(path, traj):
    """Trajectory to CSV, one row per sample, 12 significant digits."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRAJ_HEADER)
        for k in range(len(traj.t)):
            row = [traj.t[k], *traj.x[:, k], traj.u[k], traj.p_w[k],
                   traj.v_gd[k], traj.v_gq[k]]
            w.writerow([f"{v:.12g}" for v in row])


def read_trajectory_csv(path):
    data = np.genfromtxt(path, delimiter=",", names=True)
    t = np.atleast_1d(data["t"])
    x = np.vstack([np.atleast_1d(data[name]) for name in STATE_NAMES])
    return Trajectory(t, x, np.atleast_1d(data["u"]), np.atleast_1d(data["P_w"]),
                      np.atleast_1d(data["v_gd"]), np.atleast_1d(data["v_gq"]),
                      meta={"source": str(path)})


def _hex_tokens(a):
    if np.iscomplexobj(a):
        return [f"{v.real.hex()} {v.imag.hex()}" for v in a]
    return [float(v).hex() for v in a]


def save_matrices(path, matrices):
    """Named arrays to the hex-float text container (bit-exact round-trip)."""
    with open(path, "w") as fh:
        fh.write("# ssolab matrix container v1\n")
        for name, arr in matrices.items():
            arr = np.asarray(arr)
            kind = "complex128" if np.iscomplexobj(arr) else "float64"
            fh.write(f"name {name}\n")
            fh.write("shape " + " ".join(str(s) for s in arr.shape) + "\n")
            fh.write(f"dtype {kind}\n")
            flat = arr.reshape(-1)
            fh.write(" ".join(_hex_tokens(flat)) + "\n")


def load_matrices(path):
    out = {}
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip() and not ln.startswith("#")]
    i = 0
    while i < len(lines):
        assert lines[i].startswith("name ")
        name = lines[i][5:]
        shape = tuple(int(s) for s in lines[i + 1].split()[1:])
        dtype = lines[i + 2].split()[1]
        toks = lines[i + 3].split()
        if dtype == "complex128":
            vals = [complex(float.fromhex(toks[2 * j]), float.fromhex(toks[2 * j + 1]))
                    for j in range(len(toks) // 2)]
            arr = np.array(vals, dtype=complex)
        else:
            arr = np.array([float.fromhex(t) for t in toks])
        out[name] = arr.reshape(shape) if shape else arr.reshape(())
        i += 4
    return out


def save_model(dirpath, model, extras=None):
    """Koopman model (and optional fitted input matrices) to a directory."""
    os.makedirs(dirpath, exist_ok=True)
    mats = {"A_d": model.A_d, "eigvals": model.eigvals}
    if model.state_envelope is not None:
        mats["env_lo"] = model.state_envelope[0]
        mats["env_hi"] = model.state_envelope[1]
    if extras:
        mats.update(extras)
    save_matrices(os.path.join(dirpath, "model.txt"), mats)
    meta = {"dt_sample": model.dt_sample, "rank": model.rank,
            "svd_tol": model.svd_tol, "residual": model.residual,
            "defective": model.defective, "dictionary": model.dic.spec()}
    with open(os.path.join(dirpath, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)


def load_model(dirpath):
    from . import dictionary as dy
    from .koopman import _spectral
    with open(os.path.join(dirpath, "meta.json")) as fh:
        meta = json.load(fh)
    mats = load_matrices(os.path.join(dirpath, "model.txt"))
    spec = meta["dictionary"]
    dic = dy.build_dictionary(tuple(spec["states"]), spec["max_order"],
                              spec["include_constant"], spec["mode"])
    env = None
    if "env_lo" in mats:
        env = (mats["env_lo"], mats["env_hi"])
    model = _spectral(dic, mats["A_d"], meta["dt_sample"], meta["rank"],
                      meta["svd_tol"], meta["residual"], envelope=env)
    extras = {k: v for k, v in mats.items()
              if k not in ("A_d", "eigvals", "env_lo", "env_hi")}
    return model, extras


def write_table_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([f"{v:.12g}" if isinstance(v, float) else v for v in row])


def write_mode_table(path, infos):
    rows = [(mi.index, f"{mi.eigenvalue.real:.9g}{mi.eigenvalue.imag:+.9g}j",
             float(mi.freq_hz), float(mi.zeta_pct)) for mi in infos]
    write_table_csv(path, ["mode", "eigenvalue", "f_Hz", "zeta_pct"], rows)


def write_kpf_table(path, P, labels, mode_indices=None):
    idx = range(P.shape[0]) if mode_indices is None else mode_indices
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mode"] + list(labels))
        for i in idx:
            w.writerow([i] + [f"{v:.12g}" for v in P[i]])


def write_summary_json(path, summary):
    """Deterministic JSON: sorted keys, no timestamps, repr floats."""
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, complex):
        return {"re": o.real, "im": o.imag}
    raise TypeError(f"not JSON serializable: {type(o)}")


def plot_lines(path, xs, series, xlabel="", ylabel="", title="", logy=False):
    """Line chart to SVG; series is a list of (label, y-array)."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    fig, ax = plt.subplots(figsize=(7, 4))
    for label, y in series:
        ax.plot(xs, y, label=label, linewidth=1.2)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    if logy:
        ax.set_yscale("log")
    if len(series) > 1:
        ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_bars(path, labels, values, ylabel="", title="", top_n=None):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    if top_n is not None:
        order = np.argsort(values)[::-1][:top_n]
        labels = [labels[i] for i in order]
        values = [values[i] for i in order]
    fig, ax = plt.subplots(figsize=(max(6, 0.45 * len(labels)), 4))
    ax.bar(range(len(values)), values)
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=60, ha="right", fontsize=7)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
