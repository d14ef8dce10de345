"""Command line interface: ``music-som <command> ...``.

Configuration comes from an optional JSON file (``--config``); explicit flags
override it. The MNIST directory is taken from ``--data-dir`` or the
``MUSIC_SOM_DATA`` environment variable.
"""

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from ._validation import ContractError
from .data import DATA_DIR_ENV, IsotropicScaler, find_mnist, gmm_sample, load_mnist_idx, triangle_gmm_spec
from .inversion import build_anchored_system, noise_diagnostics, solve_inversion
from .metrics import aggregate_metrics, compute_metrics
from .music import MusicConfig, Trajectory, TrajectoryError, run_trajectory
from .som import PrototypeSet, SomTrainConfig, train_som

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2


def _load_json(path):
    if path is None:
        return {}
    with open(path) as fh:
        return json.load(fh)


def _read_matrix(path):
    X = np.loadtxt(path, delimiter=",", ndmin=2)
    return X


def _parse_floats(text):
    return np.array([float(v) for v in text.replace(",", " ").split()])


def _parse_ints(text):
    return [int(v) for v in text.replace(",", " ").split()]


# -- config flags --------------------------------------------------------------


def _add_dataclass_flags(parser, cls, skip=()):
    """One ``--field`` flag per dataclass field, defaulting to ``None`` (unset)."""
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        flag = "--" + f.name.replace("_", "-")
        default = f.default
        if isinstance(default, bool):
            parser.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        elif isinstance(default, int):
            parser.add_argument(flag, dest=f.name, type=int, default=None)
        elif isinstance(default, float) or default is None:
            parser.add_argument(flag, dest=f.name, type=float, default=None)
        else:
            parser.add_argument(flag, dest=f.name, default=None)


def _config(cls, args, file_key=None, base=None):
    """Build ``cls`` from ``base``, then ``--config`` JSON (optionally a sub-object), then flags."""
    loaded = _load_json(getattr(args, "config", None))
    if file_key is not None and file_key in loaded:
        loaded = loaded[file_key]
    elif file_key is not None:
        loaded = {k: v for k, v in loaded.items() if k in cls.__dataclass_fields__}
    d = dataclasses.asdict(base) if base is not None else {}
    d.update(loaded)
    for f in dataclasses.fields(cls):
        v = getattr(args, f.name, None)
        if v is not None:
            d[f.name] = v
    if "seed" in d and isinstance(d["seed"], float):
        d["seed"] = int(d["seed"])
    unknown = set(d) - set(cls.__dataclass_fields__)
    if unknown:
        raise ContractError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**d)


# -- commands ------------------------------------------------------------------


def cmd_train_som(args):
    cfg = _config(SomTrainConfig, args, file_key="som")
    if args.data:
        X = _read_matrix(args.data)
    else:
        X, _ = gmm_sample(triangle_gmm_spec(args.gmm_dim), args.gmm_samples, cfg.seed)
        X = IsotropicScaler().fit_transform(X)
    W = train_som(X, (args.rows, args.cols, args.topology), cfg)
    W.save(args.out)
    print(f"wrote {W.rows}x{W.cols} {W.topology} map (D={W.dim}) to {args.out}")
    return EXIT_OK


def cmd_invert(args):
    W = PrototypeSet.load(args.map)
    A = _read_matrix(args.activations)
    subset = _parse_ints(args.subset) if args.subset else None
    out = open(args.out, "w") if args.out else sys.stdout
    try:
        for i, a in enumerate(A):
            pool = np.arange(a.shape[0]) if subset is None else np.asarray(subset)
            anchor = args.anchor if args.anchor is not None else int(pool[np.argmin(a[pool])])
            system = build_anchored_system(W, a, anchor, subset=subset, center=args.center)
            z_hat, diag = solve_inversion(system)
            if args.sigma is not None:
                diag = noise_diagnostics(system, args.sigma)
            rec = {
                "row": i,
                "anchor": anchor,
                "z_hat": z_hat.tolist(),
                "rank": diag.rank,
                "rank_deficient": diag.rank_deficient,
                "sigma_min": diag.sigma_min,
                "sigma_max": diag.sigma_max,
                "trace_inv": diag.trace_inv,
                "lipschitz_bound": diag.lipschitz_bound,
            }
            out.write(json.dumps(rec) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def _z0(args, D):
    if args.z0 is not None:
        z0 = _parse_floats(args.z0)
    elif args.z0_csv is not None:
        z0 = _read_matrix(args.z0_csv)[args.z0_row]
    else:
        raise ContractError("give --z0 or --z0-csv")
    if z0.shape != (D,):
        raise ContractError(f"z0 has {z0.size} coordinates, map has D={D}")
    return z0


def cmd_trajectory(args):
    W = PrototypeSet.load(args.map)
    cfg = _config(MusicConfig, args, file_key="music")
    z0 = _z0(args, W.dim)
    target = None
    if args.mode in ("informed", "cluster"):
        if not args.target:
            raise ContractError(f"mode {args.mode} needs --target")
        ids = _parse_ints(args.target)
        if min(ids) < 0 or max(ids) >= W.n_units:
            raise ContractError(f"--target indices must lie in [0, {W.n_units})")
        target = ids[0] if args.mode == "informed" else ids
    try:
        traj = run_trajectory(z0, W, args.mode, cfg, args.steps, target=target)
    except TrajectoryError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK_FAILED
    traj.to_csv(args.out)
    manifest_path = args.manifest or str(Path(args.out).with_suffix(".manifest.json"))
    from .experiments import manifest, write_json

    write_json(manifest_path, manifest("trajectory", traj.config, cfg.seed, map=str(args.map),
                                       z0=z0.tolist(), steps=args.steps))
    print(f"wrote {traj.n_steps} steps to {args.out} (manifest {manifest_path})")
    return EXIT_OK


def cmd_metrics(args):
    trajs = [Trajectory.from_csv(p) for p in args.trajectories]
    metrics = [compute_metrics(t) for t in trajs]
    from .experiments import write_json

    if len(metrics) == 1 and not args.batch:
        payload = metrics[0].to_dict()
    else:
        payload = {"n_trajectories": len(metrics), "aggregate": aggregate_metrics(metrics),
                   "per_trajectory": [m.summary() for m in metrics]}
    if args.out:
        write_json(args.out, payload)
    else:
        from .experiments import _jsonable

        print(json.dumps(_jsonable(payload), indent=2))
    return EXIT_OK


def _report(name, ok, detail):
    print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    return ok


def cmd_experiment(args):
    from . import experiments as ex

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    name = args.name
    ok = True

    if name == "inversion-vs-n":
        setup = ex.gmm_setup(seed=args.seed)
        D = setup.params["D"]
        Ns = list(range(1, 3 * D + 1))
        rows = ex.experiment_inversion_vs_N(setup.prototypes, setup.X_test[: args.points], Ns)
        ex.write_csv(out_dir / "inversion_vs_n.csv", rows)
        hi = [r for r in rows if r["N"] >= D]
        lo = [r for r in rows if r["N"] <= D - 2]
        ok &= _report(name, all(r["median"] < 1e-9 for r in hi) and all(r["median"] > 1e-2 for r in lo),
                      f"max median(N>=D)={max(r['median'] for r in hi):.3g}, "
                      f"min median(N<=D-2)={min(r['median'] for r in lo):.3g}")
        ex.write_json(out_dir / "inversion_vs_n.manifest.json",
                      ex.manifest(name, setup.params, args.seed, points=args.points))

    elif name == "noise-scaling":
        scatter, summary = ex.experiment_noise_vs_conditioning(trials=args.trials, sigma=args.sigma, seed=args.seed)
        ex.write_csv(out_dir / "noise_scaling.csv", scatter)
        ex.write_json(out_dir / "noise_scaling.json", summary)
        ok &= _report(name, -1.3 <= summary["slope"] <= -0.7 and summary["max_clean_error"] < 1e-9,
                      f"slope={summary['slope']:.3f}, max clean error={summary['max_clean_error']:.2e}")

    elif name == "gmm-trajectories":
        cfg = _config(MusicConfig, args, file_key="music", base=ex.GMM_TRAJECTORY_CONFIG)
        cfg = dataclasses.replace(cfg, seed=args.seed)
        setup = ex.gmm_setup()
        res = {r: ex.experiment_gmm_trajectories(r, args.n_traj, cfg, args.steps, setup) for r in ex.REGIMES}
        cmp_ = ex.paired_regime_comparison(res["informed-convergence"], res["cluster-exploration"])
        table = {r: res[r]["aggregate"] for r in ex.REGIMES}
        ex.write_json(out_dir / "gmm_table.json", {"table": table, "paired": cmp_,
                                                   "manifest": res["informed-convergence"]["manifest"]})
        for key, c in cmp_.items():
            ok &= _report(f"{name}:{key}", c["win_rate"] >= 0.9,
                          f"informed {c['informed_median']:.3g} vs cluster {c['cluster_median']:.3g}, "
                          f"win rate {c['win_rate']:.2f}")

    elif name == "baseline-compare":
        setup = ex.gmm_setup()
        rows, summary = ex.experiment_baseline_comparison(setup.X_test[args.point], setup.prototypes,
                                                          steps=args.steps, step_len=args.step_len,
                                                          seeds=range(args.seed, args.seed + args.n_seeds))
        ex.write_csv(out_dir / "baseline_drift.csv", rows)
        ex.write_json(out_dir / "baseline_drift.json", summary)
        ok &= _report(name, summary["win_rate"] >= 0.8 and summary["max_step_norm_gap"] < 1e-10,
                      f"MUSIC drift lower in {summary['win_rate']:.0%} of seeds")

    elif name == "mnist-transition":
        train = find_mnist("train", args.data_dir)
        test = find_mnist("test", args.data_dir)
        if train is None or test is None:
            print(f"MNIST IDX files not found; set --data-dir or ${DATA_DIR_ENV}", file=sys.stderr)
            return EXIT_USAGE
        Xtr, ytr = load_mnist_idx(*train)
        Xte, yte = load_mnist_idx(*test)
        white, W = ex.mnist_map(Xtr, ytr, epochs=args.epochs, seed=args.seed, n_train=args.n_train)
        source = Xte[np.flatnonzero(yte == 0)[args.point]]
        res = ex.experiment_mnist_transition(W, white, source, target_label=1, max_steps=args.steps)
        ex.write_csv(out_dir / "mnist_continuity.csv", [
            {"step": t, "step_continuity": c, "global_continuity": g}
            for t, (c, g) in enumerate(zip(res["step_continuity"], res["global_continuity"][1:]))
        ])
        np.savetxt(out_dir / "mnist_trajectory.csv", res["states"], delimiter=",")
        local = float(np.median(res["step_continuity"])) if res["step_continuity"].size else float("nan")
        final_global = float(res["global_continuity"][-1]) if res["global_continuity"].size else float("nan")
        ok &= _report(name, res["reached"] and local > final_global,
                      f"reached={res['reached']} in {res['n_steps']} steps, "
                      f"local continuity {local:.3f} vs final global {final_global:.3f}")
    else:  # pragma: no cover - argparse restricts choices
        raise ContractError(f"unknown experiment {name!r}")

    if args.check:
        return EXIT_OK if ok else EXIT_CHECK_FAILED
    return EXIT_OK


EXPERIMENTS = ("inversion-vs-n", "noise-scaling", "gmm-trajectories", "mnist-transition", "baseline-compare")


def build_parser():
    p = argparse.ArgumentParser(prog="music-som", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train-som", help="train a map on CSV data or on the triangle mixture")
    t.add_argument("--data", help="CSV of samples (one per row); default: sample the triangle mixture")
    t.add_argument("--gmm-dim", type=int, default=10)
    t.add_argument("--gmm-samples", type=int, default=25000)
    t.add_argument("--rows", type=int, default=20)
    t.add_argument("--cols", type=int, default=20)
    t.add_argument("--topology", choices=("rectangular", "toroidal"), default="rectangular")
    t.add_argument("--config", help="JSON with SOM settings (top level or under 'som')")
    t.add_argument("--out", required=True)
    _add_dataclass_flags(t, SomTrainConfig)
    t.set_defaults(func=cmd_train_som)

    v = sub.add_parser("invert", help="reconstruct inputs from activation vectors")
    v.add_argument("--map", required=True)
    v.add_argument("--activations", required=True, help="CSV with one activation vector per row")
    v.add_argument("--anchor", type=int)
    v.add_argument("--subset", help="comma separated unit indices")
    v.add_argument("--center", action="store_true")
    v.add_argument("--sigma", type=float, help="noise level for the stability diagnostics")
    v.add_argument("--out", help="JSON lines output (default stdout)")
    v.set_defaults(func=cmd_invert)

    r = sub.add_parser("trajectory", help="run one MUSIC trajectory")
    r.add_argument("--map", required=True)
    r.add_argument("--z0", help="start point, comma separated")
    r.add_argument("--z0-csv")
    r.add_argument("--z0-row", type=int, default=0)
    r.add_argument("--mode", choices=("free", "informed", "cluster"), default="informed")
    r.add_argument("--target", help="unit index (informed) or comma separated units (cluster)")
    r.add_argument("--steps", type=int, default=100)
    r.add_argument("--config", help="JSON with MUSIC settings (top level or under 'music')")
    r.add_argument("--out", required=True)
    r.add_argument("--manifest")
    _add_dataclass_flags(r, MusicConfig)
    r.set_defaults(func=cmd_trajectory)

    m = sub.add_parser("metrics", help="trajectory statistics from CSV files")
    m.add_argument("trajectories", nargs="+")
    m.add_argument("--batch", action="store_true", help="aggregate even a single file")
    m.add_argument("--out")
    m.set_defaults(func=cmd_metrics)

    e = sub.add_parser("experiment", help="run a desk-scale experiment")
    e.add_argument("name", choices=EXPERIMENTS)
    e.add_argument("--out-dir", default="results")
    e.add_argument("--check", action="store_true", help="exit 1 unless the acceptance thresholds pass")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--points", type=int, default=1500, help="test points (inversion-vs-n)")
    e.add_argument("--trials", type=int, default=20000, help="random geometries (noise-scaling)")
    e.add_argument("--sigma", type=float, default=1e-3, help="activation noise (noise-scaling)")
    e.add_argument("--n-traj", type=int, default=30)
    e.add_argument("--steps", type=int, default=None)
    e.add_argument("--step-len", type=float, default=0.01)
    e.add_argument("--n-seeds", type=int, default=50)
    e.add_argument("--point", type=int, default=0, help="index of the start point")
    e.add_argument("--epochs", type=int, default=1, help="SOM epochs (mnist-transition)")
    e.add_argument("--n-train", type=int, default=None, help="training subset size (mnist-transition)")
    e.add_argument("--data-dir", help=f"MNIST directory (default ${DATA_DIR_ENV})")
    e.add_argument("--config", help="JSON with MUSIC settings for gmm-trajectories")
    _add_dataclass_flags(e, MusicConfig, skip=("seed",))
    e.set_defaults(func=cmd_experiment)
    return p


_DEFAULT_STEPS = {"gmm-trajectories": 300, "baseline-compare": 50, "mnist-transition": 500}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "command", None) == "experiment" and args.steps is None:
        args.steps = _DEFAULT_STEPS.get(args.name, 100)
    try:
        return args.func(args)
    except (ContractError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
