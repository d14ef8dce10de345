"""Desk-scale experiments on the synthetic triangle mixture and on MNIST.

Every experiment is a pure function of its arguments and seeds. Results are
plain Python structures (lists of dict rows for CSV output, nested dicts for
JSON) plus a manifest recording the configuration and package version.
"""

import csv
import json
import math
import time
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from . import __version__
from ._validation import ContractError, check_rng
from .data import IsotropicScaler, gmm_sample, pca_whiten_fit, pca_whiten_apply, triangle_gmm_spec
from .geometry import activation, activations
from .inversion import build_anchored_system, noise_diagnostics, solve_inversion
from .metrics import aggregate_metrics, compute_metrics, global_continuity, step_continuity
from .music import MusicConfig, identity_drift, run_trajectory
from .som import UNMATCHED, PrototypeSet, SelfOrganizingMap, bmu, label_prototypes

__all__ = [
    "GMM_TRAJECTORY_CONFIG",
    "GmmSetup",
    "gmm_setup",
    "manifest",
    "write_csv",
    "write_json",
    "experiment_inversion_vs_N",
    "experiment_noise_vs_conditioning",
    "experiment_gmm_trajectories",
    "paired_regime_comparison",
    "informed_convergence",
    "experiment_mnist_transition",
    "experiment_baseline_comparison",
]

# One configuration drives both GMM regimes so that only the target set differs.
GMM_TRAJECTORY_CONFIG = MusicConfig(
    gamma=0.85,
    lam=0.1,
    eta=0.2,
    trust="absolute",
    trust_radius=0.5,
    subsample="single-random",
)


def manifest(experiment, config, seed=None, **extra):
    out = {
        "experiment": experiment,
        "version": __version__,
        "seed": seed,
        "config": config,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    out.update(extra)
    return out


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_csv(path, rows):
    rows = list(rows)
    if not rows:
        raise ContractError("nothing to write")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: _jsonable(v) for k, v in r.items()})


# -- triangle mixture ---------------------------------------------------------


@dataclass(frozen=True)
class GmmSetup:
    """Standardized train/test draws, the trained map and the cluster map.

    ``unit_component[j]`` is the mixture component whose (standardized) mean
    is nearest to prototype ``j``.
    """

    X_train: np.ndarray
    X_test: np.ndarray
    c_train: np.ndarray
    c_test: np.ndarray
    prototypes: PrototypeSet
    means: np.ndarray
    unit_component: np.ndarray
    quantization_errors: tuple
    params: dict

    def cluster_units(self, k):
        return np.flatnonzero(self.unit_component == k)

    def component_unit(self, k):
        """Prototype nearest to the mean of component ``k``."""
        return bmu(self.means[k], self.prototypes.weights)


@lru_cache(maxsize=4)
def gmm_setup(D=10, n_train=25000, n_test=8000, rows=20, cols=20, epochs=5, seed=0):
    """Sample the triangle mixture, standardize it and train a rectangular map."""
    spec = triangle_gmm_spec(D)
    X_train, c_train = gmm_sample(spec, n_train, seed)
    X_test, c_test = gmm_sample(spec, n_test, seed + 1)
    scaler = IsotropicScaler().fit(X_train)
    X_train, X_test = scaler.transform(X_train), scaler.transform(X_test)
    som = SelfOrganizingMap(rows, cols, epochs=epochs, random_state=seed).fit(X_train)
    means = scaler.transform(spec.means)
    unit_component = np.argmin(activations(som.weights_, means), axis=1)
    params = dict(D=D, n_train=n_train, n_test=n_test, rows=rows, cols=cols, epochs=epochs, seed=seed)
    for arr in (X_train, X_test, c_train, c_test, means, unit_component):
        arr.setflags(write=False)
    return GmmSetup(
        X_train=X_train,
        X_test=X_test,
        c_train=c_train,
        c_test=c_test,
        prototypes=som.prototypes_,
        means=means,
        unit_component=unit_component,
        quantization_errors=tuple(som.quantization_errors_),
        params=params,
    )


# -- inversion ----------------------------------------------------------------


def experiment_inversion_vs_N(W, Z, N_values):
    """Reconstruction error against the number of anchored equations ``N``.

    For each point the system uses its BMU as anchor and the ``N`` next
    nearest prototypes, giving ``N`` rows. Returns one row per ``N`` with the
    median, quartiles and maximum of ``||z - z_hat||``.
    """
    weights = np.asarray(getattr(W, "weights", W), dtype=np.float64)
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    A = activations(Z, weights)
    order = np.argsort(A, axis=1, kind="stable")
    rows = []
    for N in N_values:
        if not 1 <= N < weights.shape[0]:
            raise ContractError(f"N={N} needs 1 <= N < {weights.shape[0]}")
        errs = np.empty(Z.shape[0])
        for i, (z, a) in enumerate(zip(Z, A)):
            sub = order[i, : N + 1]
            z_hat, _ = solve_inversion(build_anchored_system(weights, a, sub[0], sub))
            errs[i] = np.linalg.norm(z_hat - z)
        q1, med, q3 = np.quantile(errs, [0.25, 0.5, 0.75])
        rows.append({"N": int(N), "median": med, "q1": q1, "q3": q3, "max": errs.max()})
    return rows


def _random_geometry(rng, D, K, log10_range):
    """``K`` Gaussian prototypes with one axis squashed by ``10**u``."""
    W = rng.standard_normal((K, D))
    axis = rng.integers(D)
    W[:, axis] *= 10.0 ** rng.uniform(*log10_range)
    # random rotation so the thin direction is not axis aligned
    Q, _ = np.linalg.qr(rng.standard_normal((D, D)))
    return W @ Q.T


def experiment_noise_vs_conditioning(D=10, trials=20000, sigma=1e-3, K=None, n_bins=12,
                                     log10_range=(-3.0, 0.0), seed=0):
    """Reconstruction error under activation noise against ``sigma_min(B)``.

    Each trial draws a prototype geometry whose smallest singular value is
    spread over several decades, a Gaussian point, and i.i.d. ``N(0, sigma^2)``
    noise on every activation. The slope of ``log10(binned median error)``
    against ``log10(sigma_min)`` is fitted by least squares.

    Returns ``(scatter_rows, summary)``; the summary holds the bins, the slope
    and the largest clean (noise-free) error.
    """
    K = 2 * D if K is None else K
    rng = check_rng(seed)
    smin = np.empty(trials)
    err = np.empty(trials)
    clean = np.empty(trials)
    for i in range(trials):
        W = _random_geometry(rng, D, K, log10_range)
        z = rng.standard_normal(D)
        a = activation(z, W)
        noise = rng.normal(0.0, sigma, size=K)
        system = build_anchored_system(W, a + noise, 0)
        z_hat, diag = solve_inversion(system)
        z_clean, _ = solve_inversion(build_anchored_system(W, a, 0))
        smin[i] = diag.sigma_min
        err[i] = np.linalg.norm(z_hat - z)
        clean[i] = np.linalg.norm(z_clean - z)
    edges = np.quantile(np.log10(smin), np.linspace(0, 1, n_bins + 1))
    which = np.clip(np.searchsorted(edges, np.log10(smin), side="right") - 1, 0, n_bins - 1)
    bins = []
    for b in range(n_bins):
        sel = which == b
        bins.append({
            "log10_sigma_min": float(np.median(np.log10(smin[sel]))),
            "median_error": float(np.median(err[sel])),
            "mean_error": float(np.mean(err[sel])),
            "count": int(sel.sum()),
        })
    x = np.array([b["log10_sigma_min"] for b in bins])
    y = np.log10([b["median_error"] for b in bins])
    slope, intercept = np.polyfit(x, y, 1)
    scatter = [{"sigma_min": s, "error": e, "clean_error": c} for s, e, c in zip(smin, err, clean)]
    summary = {
        "slope": float(slope),
        "intercept": float(intercept),
        "bins": bins,
        "max_clean_error": float(clean.max()),
        "sigma": sigma,
        "trials": trials,
        "D": D,
        "K": K,
    }
    return scatter, summary


def lipschitz_check(W, a, sigma):
    """Convenience: Lipschitz bound of the full anchored system at ``a``."""
    return noise_diagnostics(build_anchored_system(W, a, int(np.argmin(a))), sigma)


# -- GMM trajectories ---------------------------------------------------------


REGIMES = ("informed-convergence", "cluster-exploration")


def _gmm_run(setup, regime, i, cfg, steps):
    """Trajectory ``i``: starts at test point ``i`` and heads to component ``i % 3``."""
    z0 = setup.X_test[i]
    k = i % setup.means.shape[0]
    run_cfg = replace(cfg, seed=(cfg.seed or 0) + i)
    if regime == "informed-convergence":
        return run_trajectory(z0, setup.prototypes, "informed", run_cfg, steps, target=setup.component_unit(k))
    if regime == "cluster-exploration":
        return run_trajectory(z0, setup.prototypes, "cluster", run_cfg, steps, target=setup.cluster_units(k))
    raise ContractError(f"unknown regime {regime!r}; expected one of {REGIMES}")


def experiment_gmm_trajectories(regime, n_traj=30, cfg=GMM_TRAJECTORY_CONFIG, steps=300, setup=None):
    """Run ``n_traj`` trajectories of one regime and aggregate their metrics.

    Returns a dict with the per-trajectory summaries, the
    aggregate (median, IQR and count per metric) and a manifest.
    """
    setup = gmm_setup() if setup is None else setup
    per = []
    for i in range(n_traj):
        per.append(compute_metrics(_gmm_run(setup, regime, i, cfg, steps)).summary())
    return {
        "regime": regime,
        "per_trajectory": per,
        "aggregate": aggregate_metrics(per),
        "manifest": manifest("gmm-trajectories", cfg.to_dict(), cfg.seed, regime=regime,
                             n_traj=n_traj, steps=steps, setup=setup.params),
    }


_ORDERING = {
    "transition_rate": "less",
    "dwell_median": "greater",
    "geodesic_efficiency": "greater",
}


def paired_regime_comparison(informed, cluster):
    """Paired win rates of the informed regime on the three ordering metrics.

    A pair is a win when the informed value is strictly on the expected side
    of the cluster value (lower transition rate, longer dwell, higher
    efficiency).
    """
    out = {}
    for key, side in _ORDERING.items():
        a = np.array([r[key] for r in informed["per_trajectory"]], dtype=float)
        b = np.array([r[key] for r in cluster["per_trajectory"]], dtype=float)
        wins = a < b if side == "less" else a > b
        out[key] = {
            "informed_median": float(np.nanmedian(a)),
            "cluster_median": float(np.nanmedian(b)),
            "win_rate": float(np.mean(wins)),
        }
    return out


def informed_convergence(n_runs=100, steps=100, cfg=GMM_TRAJECTORY_CONFIG, setup=None):
    """Distance-to-target curves of noise-free informed runs.

    Run ``i`` starts at test point ``i`` and targets a unit drawn uniformly
    with seed ``i``. Returns ``(monotone_fraction, rows)`` where each row
    records whether that run's distance strictly decreased at every step.
    """
    setup = gmm_setup() if setup is None else setup
    W = setup.prototypes
    cfg = replace(cfg, sigma_z=0.0, sigma_b=0.0, jitter=0.0)
    rows = []
    for i in range(n_runs):
        t = int(check_rng(i).integers(W.n_units))
        traj = run_trajectory(setup.X_test[i], W, "informed", replace(cfg, seed=i), steps, target=t)
        d = np.linalg.norm(traj.states - W.weights[t], axis=1)
        rows.append({
            "run": i,
            "target": t,
            "d_start": d[0],
            "d_end": d[-1],
            "monotone": bool(np.all(np.diff(d) < 0)),
        })
    return float(np.mean([r["monotone"] for r in rows])), rows


# -- free evolution vs radial baseline -------------------------------------------


def experiment_baseline_comparison(z0, W, steps=50, step_len=0.01, seeds=range(50), cfg=None, n_anchors=4):
    """Paired free evolutions: MUSIC perturbation steps vs radial steps.

    Each seed draws a schedule of ``(unit, delta)`` requests; unit ``j`` is
    uniform among the non-anchor prototypes and ``delta`` is ``+-1``. Both
    evolutions take steps of exactly ``step_len``. Drift is
    ``sum_j |a_j(z_t) - a_j(z_0)|`` over the ``n_anchors`` prototypes nearest
    to ``z0``; MUSIC holds exactly these anchors fixed.

    Returns ``(rows, summary)``; rows hold ``seed, step, music, baseline``.
    """
    cfg = MusicConfig() if cfg is None else cfg
    weights = np.asarray(getattr(W, "weights", W), dtype=np.float64)
    z0 = np.asarray(z0, dtype=np.float64)
    anchors = np.argsort(activation(z0, weights), kind="stable")[:n_anchors]
    candidates = np.setdiff1d(np.arange(weights.shape[0]), anchors)
    rows = []
    wins = 0
    max_norm_gap = 0.0
    seeds = list(seeds)
    for seed in seeds:
        rng = check_rng(seed)
        units = rng.choice(candidates, size=steps)
        signs = rng.choice([-1.0, 1.0], size=steps)
        schedule = list(zip(units.tolist(), signs.tolist()))
        m = run_trajectory(z0, W, "perturb", cfg, steps, step_len=step_len, schedule=schedule, preserve=anchors)
        b = run_trajectory(z0, W, "baseline", cfg, steps, step_len=step_len, schedule=schedule)
        gap = np.abs(np.linalg.norm(m.deltas, axis=1) - np.linalg.norm(b.deltas, axis=1)).max()
        max_norm_gap = max(max_norm_gap, float(gap))
        dm = identity_drift(m.states, weights, anchors)
        db = identity_drift(b.states, weights, anchors)
        wins += dm[-1] < db[-1]
        rows.extend({"seed": seed, "step": t, "music": x, "baseline": y} for t, (x, y) in enumerate(zip(dm, db)))
    summary = {
        "anchors": anchors.tolist(),
        "win_rate": wins / len(seeds),
        "max_step_norm_gap": max_norm_gap,
        "steps": steps,
        "step_len": step_len,
        "n_seeds": len(seeds),
    }
    return rows, summary


# -- MNIST ----------------------------------------------------------------------


def mnist_map(X_train, y_train, rows=32, cols=32, epochs=1, eps=1e-8, seed=0, n_train=None):
    """Whiten the training images, train a toroidal map and label its units."""
    rng = check_rng(seed)
    if n_train is not None and n_train < X_train.shape[0]:
        keep = np.sort(rng.choice(X_train.shape[0], size=n_train, replace=False))
        X_train, y_train = X_train[keep], y_train[keep]
    white = pca_whiten_fit(X_train, eps)
    Xw = pca_whiten_apply(white, X_train)
    som = SelfOrganizingMap(rows, cols, topology="toroidal", epochs=epochs, random_state=seed).fit(Xw)
    labels = label_prototypes(som.prototypes_, Xw, y_train)
    return white, som.prototypes_.with_labels(labels)


def experiment_mnist_transition(W, white, source, target_label=1, cfg=None, max_steps=500):
    """Informed trajectory from a (pixel-space) ``source`` image to a unit labeled ``target_label``.

    The target is the unit with that label nearest to the whitened source.
    The run stops once the state enters the target's Voronoi cell. Returns a
    dict with the trajectory, the two continuity series, the decoded
    endpoint image and the convergence flag.
    """
    if W.labels is None:
        raise ContractError("prototypes carry no labels")
    cfg = MusicConfig() if cfg is None else cfg
    candidates = np.flatnonzero(np.asarray(W.labels) == target_label)
    if candidates.size == 0:
        raise ContractError(f"no prototype is labeled {target_label}")
    z = pca_whiten_apply(white, np.asarray(source, dtype=np.float64))
    target = int(candidates[np.argmin(activation(z, W.weights)[candidates])])

    from .music import informed_step

    rng = check_rng(cfg.seed)
    states, bmus_, steps = [z.copy()], [bmu(z, W.weights)], []
    while bmus_[-1] != target and len(steps) < max_steps:
        r = informed_step(z, W, target, cfg, rng)
        z = z + r.dz
        states.append(z.copy())
        bmus_.append(bmu(z, W.weights))
        steps.append(r)
    states = np.asarray(states)
    pair = (states, np.asarray(bmus_))
    return {
        "target": target,
        "reached": bool(bmus_[-1] == target),
        "n_steps": len(steps),
        "states": states,
        "bmus": np.asarray(bmus_),
        "step_continuity": step_continuity(pair),
        "global_continuity": global_continuity(pair),
        "decoded_end": pca_whiten_apply(white, states[-1], "inverse"),
        "unmatched_units": int(np.sum(np.asarray(W.labels) == UNMATCHED)),
    }
