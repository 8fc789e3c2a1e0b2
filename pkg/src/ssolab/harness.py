"""Experiment orchestration: datasets, fits, signal selection, controller comparison.

`run_experiment` executes the full offline+online study on one configuration
and writes a report bundle (CSV tables, SVG plots, trajectories, summary.json)
whose content is a pure function of (config, seed).
"""

import os
import time

import numpy as np

from . import baselines as bl
from . import dictionary as dy
from . import io as sio
from . import koopman as kp
from . import metrics as mt
from . import mpc
from . import plant
from . import predictor as pr
from . import scenario as sc
from .config import build_dictionary_from

# dataset seed streams (rule: SeedSequence([master, stream, trajectory]))
STREAM_DS_UNCONTROLLED = 21
STREAM_DS_CONTROLLED = 22
STREAM_HELDOUT = 23


def traj_rng(master_seed, stream, index):
    """Per-trajectory RNG from the master seed: SeedSequence([master, stream, index])."""
    return np.random.default_rng(np.random.SeedSequence([master_seed, stream, index]))


class StageError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


def _excitation(rng, n_snap, amp, refresh):
    blocks = rng.uniform(-amp, amp, (n_snap + refresh - 1) // refresh)
    return np.repeat(blocks, refresh)[:n_snap]


def generate_datasets(params, seed, n_traj=300, n_snap=1000, ic_rel=0.03,
                      input_amp=0.1, input_refresh=10, dt_sample=2e-3,
                      dt_int=5e-5, state_names=plant.STATE_NAMES):
    """Uncontrolled and controlled snapshot datasets around the weak-grid equilibrium.

    Initial conditions are uniform within +-ic_rel of each state's equilibrium
    magnitude; controlled trajectories add zero-order-hold uniform excitation.
    Diverged trajectories are truncated and their tail pairs excluded.
    """
    xeq = plant.solve_equilibrium(params)
    spp = int(round(dt_sample / dt_int))
    datasets = []
    for stream, controlled in ((STREAM_DS_UNCONTROLLED, False),
                               (STREAM_DS_CONTROLLED, True)):
        X0 = np.empty((plant.N_STATES, n_traj))
        U = np.zeros((n_traj, n_snap)) if controlled else None
        for j in range(n_traj):
            rng = traj_rng(seed, stream, j)
            X0[:, j] = xeq + rng.uniform(-ic_rel, ic_rel, plant.N_STATES) * np.abs(xeq)
            if controlled:
                U[j] = _excitation(rng, n_snap, input_amp, input_refresh)
        out, n_valid = sc.batch_rollout(params, X0, U, dt_int, spp, n_snap + 1)
        Xs, Ys, Us = [], [], []
        for j in range(n_traj):
            k = n_valid[j]
            if k < 2:
                continue
            Xs.append(out[:, j, :k - 1])
            Ys.append(out[:, j, 1:k])
            if controlled:
                Us.append(U[j, :k - 1])
        X = np.concatenate(Xs, axis=1)
        Y = np.concatenate(Ys, axis=1)
        Uc = np.concatenate(Us)[None, :] if controlled else None
        meta = {"seed": seed, "stream": stream, "n_traj": n_traj, "n_snap": n_snap,
                "ic_rel": ic_rel, "retention": X.shape[1] / (n_traj * n_snap),
                "n_diverged": int(np.sum(n_valid < n_snap + 1))}
        datasets.append(kp.SnapshotDataset(X, Y, Uc, dt_sample,
                                           state_names=tuple(state_names), meta=meta))
    return tuple(datasets)


def comparison_scenario(cfg, i_sc=None, robust=False, name=None, init=None):
    """The reactance-step study scenario, optionally at a shifted operating point
    or with the measurement-corruption stack of the robustness study."""
    s = cfg.scenario
    params = cfg.plant if i_sc is None else cfg.plant.replace(i_sc=i_sc)
    pre = params.replace(L_s=s.l_s_pre)
    events = [sc.GridReactanceStep(time=s.event_time, L_s=params.L_s)]
    meas = sc.MeasurementSpec(
        snr_db=s.snr_db, delay_s=s.delay_s,
        measured_states=tuple(s.measured_states) or plant.STATE_NAMES)
    if robust:
        meas = sc.MeasurementSpec(
            snr_db=cfg.robust_snr_db, delay_s=cfg.robust_delay_s,
            measured_states=meas.measured_states)
        events.append(sc.WindFluctuation(time=cfg.robust_wind_start,
                                         stop=cfg.robust_wind_stop,
                                         amplitude=cfg.robust_wind_amp))
    return sc.Scenario(params=pre, duration=s.duration, dt_int=s.dt_int,
                       dt_sample=s.dt_sample, init=init or s.init,
                       perturb_rel=s.perturb_rel, events=tuple(events),
                       measurement=meas, u_limit=s.u_limit,
                       name=name or f"compare_isc{params.i_sc:g}")


def fit_models(cfg, ds_u, ds_c):
    """EDMD transition matrix plus the three input models."""
    dic = build_dictionary_from(cfg)
    model = kp.edmd_fit(ds_u, dic, svd_tol=cfg.dataset.svd_tol)
    klti = pr.fit_lti_input(ds_c, model)
    if cfg.mpc.b_source == "analytic":
        klpv = pr.KlpvPredictor(model, pr.actuation_column(cfg.plant, dic))
    elif cfg.mpc.b_source == "pulse":
        klpv = pr.KlpvPredictor(
            model, pr.pulse_actuation_column(cfg.plant, dic,
                                             dt_sample=cfg.scenario.dt_sample,
                                             dt_int=cfg.scenario.dt_int))
    else:
        klpv = pr.fit_klpv_input(ds_c, model)
    bil = pr.fit_bilinear(ds_c, model, freeze_A=True, svd_tol=cfg.dataset.svd_tol)
    return model, klpv, klti, bil


def build_mpc_config(cfg):
    return mpc.MpcConfig(N_p=cfg.mpc.horizon,
                         Q=np.array([[cfg.mpc.q_weight]]),
                         R=np.array([[cfg.mpc.r_weight]]),
                         u_min=cfg.mpc.u_min, u_max=cfg.mpc.u_max)


def build_controllers(cfg, klpv, klti, output_state, measured_states=None,
                      delay_s=None):
    """DSSOSC, KLTIC and CSDC wired for the configured measurement layout.

    A known telemetry delay (delay_s) is compensated by the MPC controllers;
    the phase-compensation baseline takes the stream as it comes.
    """
    measured = tuple(measured_states or plant.STATE_NAMES)
    dic = klpv.model.dic
    if tuple(dic.state_subset) == measured:
        positions = None
    else:
        pos = {n: i for i, n in enumerate(measured)}
        positions = [pos[n] for n in dic.state_subset]
    if delay_s is None:
        delay_s = cfg.scenario.delay_s
    delay_n = int(round(delay_s / cfg.scenario.dt_sample))
    mcfg = build_mpc_config(cfg)
    m = cfg.mpc
    dssosc = mpc.DssoscController(
        klpv, mcfg, output_state, meas_positions=positions,
        activation_time=m.activation_time, y_ref_window=m.y_ref_window,
        freeze_window=m.freeze_window, dist_window=m.dist_window,
        delay_samples=delay_n, name="dssosc")
    kltic = bl.kltic_controller(
        klti, mcfg, output_state, meas_positions=positions,
        activation_time=m.activation_time, y_ref_window=m.y_ref_window,
        freeze_window=m.freeze_window, dist_window=m.dist_window,
        delay_samples=delay_n)
    c = cfg.csdc
    csdc = bl.CsdcController(
        bl.CsdcParams(K_p=c.k_p, T_w=c.t_w, T_1=c.t_1, T_2=c.t_2,
                      dt_sample=cfg.scenario.dt_sample),
        meas_index=measured.index(output_state),
        activation_time=m.activation_time, u_limit=cfg.scenario.u_limit,
        sign=c.sign)
    return {"dssosc": dssosc, "kltic": kltic, "csdc": csdc}


def heldout_rmse(cfg, params, predictors, seed):
    """Median open-loop prediction RMSE curves on fresh controlled trajectories."""
    ps = cfg.predict
    dt_sample = cfg.scenario.dt_sample
    H = int(round(ps.horizon_s / dt_sample))
    xeq = plant.solve_equilibrium(params)
    n = ps.n_heldout
    X0 = np.empty((plant.N_STATES, n))
    U = np.zeros((n, H))
    for j in range(n):
        rng = traj_rng(seed, STREAM_HELDOUT, j)
        X0[:, j] = xeq + rng.uniform(-cfg.dataset.ic_rel, cfg.dataset.ic_rel,
                                     plant.N_STATES) * np.abs(xeq)
        U[j] = _excitation(rng, H, cfg.dataset.input_amp, cfg.dataset.input_refresh)
    spp = int(round(dt_sample / cfg.scenario.dt_int))
    out, n_valid = sc.batch_rollout(params, X0, U, cfg.scenario.dt_int, spp, H + 1)
    rows = {name: [] for name in predictors}
    subset_rows = [plant.IDX[s] for s in next(iter(predictors.values())).model.dic.state_subset]
    kept = 0
    with np.errstate(all="ignore"):
        for j in range(n):
            if n_valid[j] <= H:
                continue
            kept += 1
            for name, pred in predictors.items():
                rows[name].append(pr.rmse(pred, out[subset_rows, j, :], U[j]))
    curves = {name: np.median(np.array(r), axis=0) if r else np.full(H + 1, np.nan)
              for name, r in rows.items()}
    return curves, kept


def compute_metrics(traj, activation_time, band_pct=0.02):
    return mt.compute_metrics(traj, activation_time, band_pct)


def run_experiment(cfg, quiet=False):
    """Full pipeline: datasets -> fits -> analysis -> prediction -> comparison.

    Writes the report bundle into cfg.out_dir and returns the summary dict.
    """
    t_start = time.time()
    out = cfg.out_dir
    os.makedirs(out, exist_ok=True)
    log_lines = []

    def log(msg):
        log_lines.append(msg)
        if not quiet:
            print(msg, flush=True)

    summary = {"seed": cfg.seed, "config": cfg.as_dict()}
    stage = "plant"
    try:
        params = cfg.plant
        xeq = plant.solve_equilibrium(params)
        _, eig, _ = plant.linearize(xeq, params)
        un = plant.unstable_pairs(eig)
        summary["plant"] = {
            "delta_eq": float(xeq[plant.IDX["delta"]]),
            "open_loop_unstable": [{"re": l.real, "im": l.imag,
                                    "f_hz": l.imag / (2 * np.pi)} for l in un]}
        log(f"[plant] weak-grid equilibrium delta={xeq[plant.IDX['delta']]:.3f}, "
            f"{len(un)} unstable pair(s)")

        stage = "datasets"
        ds = cfg.dataset
        ds_u, ds_c = generate_datasets(
            params, cfg.seed, n_traj=ds.n_trajectories, n_snap=ds.n_snapshots,
            ic_rel=ds.ic_rel, input_amp=ds.input_amp,
            input_refresh=ds.input_refresh, dt_sample=cfg.scenario.dt_sample,
            dt_int=cfg.scenario.dt_int)
        summary["datasets"] = {"uncontrolled": ds_u.meta, "controlled": ds_c.meta}
        log(f"[datasets] {ds_u.n_pairs} + {ds_c.n_pairs} pairs "
            f"(retention {ds_u.meta['retention']:.1%}/{ds_c.meta['retention']:.1%})")

        stage = "fit"
        model, klpv, klti, bil = fit_models(cfg, ds_u, ds_c)
        sio.save_model(os.path.join(out, "model"), model,
                       extras={"B_klti": klti.B, "b_klpv": klpv.b})
        summary["fit"] = {"m": model.m, "rank": model.rank,
                          "residual": model.residual, "svd_tol": model.svd_tol}
        log(f"[fit] m={model.m} rank={model.rank} residual={model.residual:.3e}")

        stage = "analyze"
        table = model.mode_table()
        sio.write_mode_table(os.path.join(out, "modes.csv"), table)
        dom = kp.dominant_modes(model, dataset=ds_u)
        if not dom:
            raise RuntimeError("no dominant in-band unstable mode identified")
        P, valid = kp.kpf(model)
        labels = model.dic.term_labels()
        sio.write_kpf_table(os.path.join(out, "kpf.csv"), P, labels,
                            mode_indices=[mi.index for mi in dom])
        sio.plot_bars(os.path.join(out, "kpf_dominant.svg"), labels,
                      P[dom[0].index], ylabel="participation",
                      title=f"dominant mode {dom[0].freq_hz:.2f} Hz", top_n=12)
        io_map = kp.IoMap(measurable=tuple(cfg.selection.measurable),
                          actuable=dict(cfg.selection.actuable))
        top_k = cfg.selection.top_k or None
        selection = kp.select_signals(P[dom[0].index], model.dic, io_map, top_k=top_k)
        output_state = cfg.selection.input_signal or selection.input_signal
        summary["analyze"] = {
            "dominant_mode": {"f_hz": dom[0].freq_hz, "zeta_pct": dom[0].zeta_pct,
                              "eigenvalue": dom[0].eigenvalue},
            "selection": {"input_signal": selection.input_signal,
                          "output_channel": selection.output_channel,
                          "regulated_output": output_state,
                          "top_ranking": selection.ranking[:10]}}
        log(f"[analyze] dominant {dom[0].freq_hz:.2f} Hz zeta={dom[0].zeta_pct:.2f}% ;"
            f" I/O: measure {selection.input_signal} -> drive {selection.output_channel}")

        stage = "predict"
        curves, kept = heldout_rmse(
            cfg, params, {"klpv": klpv, "klti": klti, "bilinear": bil}, cfg.seed)
        hgrid = np.arange(len(curves["klpv"])) * cfg.scenario.dt_sample
        sio.write_table_csv(
            os.path.join(out, "rmse.csv"),
            ["horizon_s", "rmse_klpv", "rmse_klti", "rmse_bilinear"],
            [(float(hgrid[i]), float(curves["klpv"][i]), float(curves["klti"][i]),
              float(curves["bilinear"][i])) for i in range(len(hgrid))])
        sio.plot_lines(os.path.join(out, "rmse.svg"), hgrid,
                       [(k, np.clip(v, 1e-12, None)) for k, v in curves.items()],
                       xlabel="prediction time (s)", ylabel="RMSE (pu)", logy=True)
        end = {k: float(v[-1]) for k, v in curves.items()}
        summary["predict"] = {"n_heldout_used": kept, "rmse_end": end,
                              "klti_over_klpv": end["klti"] / end["klpv"]
                              if end["klpv"] > 0 else float("nan")}
        log(f"[predict] end-of-horizon RMSE: " +
            " ".join(f"{k}={v:.4g}" for k, v in end.items()))

        stage = "control"
        scn = comparison_scenario(cfg)
        controllers = build_controllers(cfg, klpv, klti, output_state,
                                        scn.measurement.measured_states)
        results = {}
        order = ["wo", "csdc", "kltic", "dssosc"]
        for name in order:
            ctrl = None if name == "wo" else controllers[name]
            traj, met = mpc.closed_loop(scn, ctrl, seed=cfg.seed)
            sio.write_trajectory_csv(os.path.join(out, f"traj_{name}.csv"), traj)
            if ctrl is not None and getattr(ctrl, "diag_rows", None):
                sio.write_table_csv(os.path.join(out, f"diag_{name}.csv"),
                                    ["t", "u", "iterations", "kkt_residual", "cost"],
                                    ctrl.diag_rows)
            results[name] = met
            log(f"[control] {name:6s} diverged={met.diverged} "
                f"amp={met.amplitude_pu:.4f} pu settle={met.settling_time}")
        summary["control"] = {k: v.as_dict() for k, v in results.items()}

        stage = "report"
        rows = [(name.upper(), float(results[name].amplitude_kw),
                 results[name].settling_time if results[name].settling_time is not None
                 else "unsettled")
                for name in order]
        sio.write_table_csv(os.path.join(out, "comparison.csv"),
                            ["controller", "max_amplitude_kW", "settling_time_s"], rows)
        _plot_comparison(out, order)
        manifest = sorted(f for f in os.listdir(out)
                          if os.path.isfile(os.path.join(out, f)))
        summary["files"] = manifest
        sio.write_summary_json(os.path.join(out, "summary.json"), summary)
        with open(os.path.join(out, "run.log"), "w") as fh:
            fh.write("\n".join(log_lines) + f"\nwall_s {time.time() - t_start:.1f}\n")
        log(f"[done] {time.time() - t_start:.1f} s -> {out}/summary.json")
        return summary
    except Exception as e:
        raise StageError(stage, e) from e


def _plot_comparison(out, order):
    import numpy as np
    series = []
    ts = None
    for name in order:
        path = os.path.join(out, f"traj_{name}.csv")
        if not os.path.exists(path):
            continue
        data = np.genfromtxt(path, delimiter=",", names=True)
        t = np.atleast_1d(data["t"])
        series.append((name.upper(), np.atleast_1d(data["P_w"])))
        if ts is None or len(t) > len(ts):
            ts = t
    padded = []
    for name, y in series:
        if len(y) < len(ts):
            y = np.concatenate([y, np.full(len(ts) - len(y), np.nan)])
        padded.append((name, y))
    sio.plot_lines(os.path.join(out, "comparison.svg"), ts, padded,
                   xlabel="time (s)", ylabel="P_w (pu)",
                   title="oscillation suppression comparison")
