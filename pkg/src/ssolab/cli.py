"""Command-line interface: simulate, dataset, fit, analyze, control, compare, plot."""

import argparse
import os
import sys

import numpy as np

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_UNSETTLED = 3


def _parser():
    p = argparse.ArgumentParser(prog="ssolab",
                                description="Subsynchronous-oscillation suppression workbench")
    p.add_argument("--config", metavar="PATH", help="TOML experiment configuration")
    p.add_argument("--seed", type=int, help="override the configured master seed")
    p.add_argument("--out", metavar="DIR", help="output directory")
    p.add_argument("--quiet", action="store_true", help="suppress progress output")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("simulate", help="integrate the study scenario without control")
    sub.add_parser("dataset", help="generate the identification datasets")
    sub.add_parser("fit", help="identify the transition matrix and input models")
    sub.add_parser("analyze", help="mode table, participation factors, signal selection")
    pc = sub.add_parser("control", help="one closed loop with a chosen controller")
    pc.add_argument("--controller", choices=["dssosc", "kltic", "csdc", "none"],
                    default="dssosc")
    pc.add_argument("--require-settled", action="store_true",
                    help="exit 3 if the loop does not settle")
    sub.add_parser("compare", help="full four-way controller comparison")
    pp = sub.add_parser("plot", help="line chart from a CSV table")
    pp.add_argument("csv", help="input CSV with a header row")
    pp.add_argument("--x", default=None, help="x column (default: first)")
    pp.add_argument("--y", nargs="+", default=None, help="y columns (default: the rest)")
    pp.add_argument("--logy", action="store_true")
    pp.add_argument("--svg", required=True, help="output SVG path")
    return p


def main(argv=None):
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK

    try:
        from .config import load_config
        cfg = load_config(args.config, seed_override=args.seed)
    except (OSError, KeyError, ValueError) as e:
        print(f"error: bad configuration: {e}", file=sys.stderr)
        return EXIT_USAGE
    if args.out:
        cfg.out_dir = args.out
    os.makedirs(cfg.out_dir, exist_ok=True)

    try:
        return _dispatch(args, cfg)
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


def _dispatch(args, cfg):
    from . import harness, io as sio, mpc
    out = cfg.out_dir

    if args.command == "simulate":
        scn = harness.comparison_scenario(cfg)
        from .scenario import simulate
        traj = simulate(scn, None, seed=cfg.seed)
        path = os.path.join(out, "trajectory.csv")
        sio.write_trajectory_csv(path, traj)
        if not args.quiet:
            print(f"{path} ({len(traj.t)} samples, diverged={traj.diverged})")
        return EXIT_OK

    if args.command == "dataset":
        ds = cfg.dataset
        ds_u, ds_c = harness.generate_datasets(
            cfg.plant, cfg.seed, n_traj=ds.n_trajectories, n_snap=ds.n_snapshots,
            ic_rel=ds.ic_rel, input_amp=ds.input_amp, input_refresh=ds.input_refresh,
            dt_sample=cfg.scenario.dt_sample, dt_int=cfg.scenario.dt_int)
        for tag, d in (("uncontrolled", ds_u), ("controlled", ds_c)):
            base = os.path.join(out, f"dataset_{tag}")
            np.save(base + "_X.npy", d.X)
            np.save(base + "_Y.npy", d.Y)
            if d.U is not None:
                np.save(base + "_U.npy", d.U)
            if not args.quiet:
                print(f"{base}_*.npy ({d.n_pairs} pairs, "
                      f"retention {d.meta['retention']:.1%})")
        return EXIT_OK

    if args.command == "fit":
        ds = cfg.dataset
        ds_u, ds_c = harness.generate_datasets(
            cfg.plant, cfg.seed, n_traj=ds.n_trajectories, n_snap=ds.n_snapshots,
            ic_rel=ds.ic_rel, input_amp=ds.input_amp, input_refresh=ds.input_refresh,
            dt_sample=cfg.scenario.dt_sample, dt_int=cfg.scenario.dt_int)
        model, klpv, klti, bil = harness.fit_models(cfg, ds_u, ds_c)
        sio.save_model(os.path.join(out, "model"), model,
                       extras={"B_klti": klti.B, "b_klpv": klpv.b})
        if not args.quiet:
            print(f"{out}/model (m={model.m}, rank={model.rank}, "
                  f"residual={model.residual:.3e})")
        return EXIT_OK

    if args.command == "analyze":
        from . import koopman as kp
        ds = cfg.dataset
        ds_u, ds_c = harness.generate_datasets(
            cfg.plant, cfg.seed, n_traj=ds.n_trajectories, n_snap=ds.n_snapshots,
            ic_rel=ds.ic_rel, input_amp=ds.input_amp, input_refresh=ds.input_refresh,
            dt_sample=cfg.scenario.dt_sample, dt_int=cfg.scenario.dt_int)
        model, klpv, klti, bil = harness.fit_models(cfg, ds_u, ds_c)
        sio.write_mode_table(os.path.join(out, "modes.csv"), model.mode_table())
        dom = kp.dominant_modes(model, dataset=ds_u)
        P, _ = kp.kpf(model)
        sio.write_kpf_table(os.path.join(out, "kpf.csv"), P, model.dic.term_labels(),
                            mode_indices=[mi.index for mi in dom] or None)
        if not args.quiet:
            for mi in dom:
                print(f"dominant mode: {mi.freq_hz:.2f} Hz, zeta {mi.zeta_pct:.2f}%")
            print(f"{out}/modes.csv, {out}/kpf.csv")
        return EXIT_OK

    if args.command == "control":
        ds = cfg.dataset
        ds_u, ds_c = harness.generate_datasets(
            cfg.plant, cfg.seed, n_traj=ds.n_trajectories, n_snap=ds.n_snapshots,
            ic_rel=ds.ic_rel, input_amp=ds.input_amp, input_refresh=ds.input_refresh,
            dt_sample=cfg.scenario.dt_sample, dt_int=cfg.scenario.dt_int)
        model, klpv, klti, bil = harness.fit_models(cfg, ds_u, ds_c)
        scn = harness.comparison_scenario(cfg)
        output_state = cfg.selection.input_signal or "delta"
        controllers = harness.build_controllers(cfg, klpv, klti, output_state,
                                                scn.measurement.measured_states)
        ctrl = None if args.controller == "none" else controllers[args.controller]
        traj, met = mpc.closed_loop(scn, ctrl, seed=cfg.seed)
        sio.write_trajectory_csv(os.path.join(out, f"traj_{args.controller}.csv"), traj)
        if not args.quiet:
            print(f"amp={met.amplitude_pu:.4f} pu ({met.amplitude_kw:.1f} kW) "
                  f"settle={met.settling_time} diverged={met.diverged}")
        if args.require_settled and (not met.settled or met.diverged):
            return EXIT_UNSETTLED
        return EXIT_OK

    if args.command == "compare":
        harness.run_experiment(cfg, quiet=args.quiet)
        return EXIT_OK

    if args.command == "plot":
        data = np.genfromtxt(args.csv, delimiter=",", names=True)
        names = list(data.dtype.names)
        xcol = args.x or names[0]
        ycols = args.y or [n for n in names if n != xcol]
        sio.plot_lines(args.svg, np.atleast_1d(data[xcol]),
                       [(c, np.atleast_1d(data[c])) for c in ycols],
                       xlabel=xcol, logy=args.logy)
        if not args.quiet:
            print(args.svg)
        return EXIT_OK

    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
