"""MUSIC updates: Tikhonov-regularized steering of an input through SOM activations.

One step linearizes the activations at the current point, then solves

    min  (1 - gamma) ||W_S A_S dz||^2 + gamma ||W_T (B_T dz - b)||^2 + lam ||dz||^2

where ``A_S`` stacks the (normalized) Jacobian rows of preserved units and
``B_T`` those of target units. ``b`` asks for a fractional decrease of the
target activations. The step is then perturbed by optional noise and clipped
to a trust radius before the next relinearization.
"""

import csv
import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import scipy.linalg

from ._validation import ContractError, as_index_set, as_vector, as_weights, check_rng
from .geometry import JacobianBlock, activation, activation_jacobian
from .som import bmu, lattice_neighborhood

__all__ = [
    "MusicConfig",
    "StepResult",
    "Trajectory",
    "TrajectoryError",
    "music_solve",
    "music_solve_svd",
    "stack_system",
    "lambda_scan",
    "resolve_trust",
    "gaussian_weights",
    "free_step",
    "informed_step",
    "cluster_step",
    "perturbation_step",
    "radial_baseline_step",
    "run_trajectory",
    "identity_drift",
    "MusicController",
]

SUBSAMPLE_RULES = ("all", "fixed-k", "bernoulli", "single-random")
BERNOULLI_REDRAWS = 8


@dataclass(frozen=True)
class MusicConfig:
    """Hyperparameters of a MUSIC run.

    ``trust`` is ``"bmu-relative"`` (radius ``trust_radius * ||z - w_BMU||``)
    or ``"absolute"`` (radius ``trust_radius``). ``preserve_scope="ring"``
    restricts preservation to the ``ring_radius`` lattice ring around the
    current BMU, which needs a :class:`~music_som.som.PrototypeSet`.
    """

    gamma: float = 0.85
    lam: float = 1e-4
    eta: float = 0.04
    trust: str = "bmu-relative"
    trust_radius: float = 0.02
    sigma_z: float = 0.0
    sigma_b: float = 0.0
    jitter: float = 0.0
    passes: int = 1
    subsample: str = "single-random"
    subsample_k: int = 1
    subsample_p: float = 0.5
    weight_scheme: str = "uniform"
    bandwidth: float | None = None
    preserve_scope: str = "all"
    ring_radius: int = 1
    normalize: bool = True
    b_mode: str = "squared"
    seed: int | None = 0

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ContractError("gamma must lie in [0, 1]")
        if not self.lam > 0:
            raise ContractError("lam must be > 0")
        if not 0.0 < self.eta <= 1.0:
            raise ContractError("eta must lie in (0, 1]")
        if self.trust not in ("bmu-relative", "absolute"):
            raise ContractError(f"unknown trust mode {self.trust!r}")
        if not self.trust_radius > 0:
            raise ContractError("trust_radius must be > 0")
        if min(self.sigma_z, self.sigma_b, self.jitter) < 0:
            raise ContractError("noise scales must be >= 0")
        if self.passes < 1:
            raise ContractError("passes must be >= 1")
        if self.subsample not in SUBSAMPLE_RULES:
            raise ContractError(f"unknown subsample rule {self.subsample!r}")
        if self.subsample_k < 1:
            raise ContractError("subsample_k must be >= 1")
        if not 0.0 < self.subsample_p <= 1.0:
            raise ContractError("subsample_p must lie in (0, 1]")
        if self.weight_scheme not in ("uniform", "gaussian"):
            raise ContractError(f"unknown weight scheme {self.weight_scheme!r}")
        if self.bandwidth is not None and not self.bandwidth > 0:
            raise ContractError("bandwidth must be > 0")
        if self.preserve_scope not in ("all", "ring"):
            raise ContractError(f"unknown preserve scope {self.preserve_scope!r}")
        if self.b_mode not in ("squared", "distance"):
            raise ContractError(f"unknown b mode {self.b_mode!r}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = cls.__dataclass_fields__
        unknown = set(d) - set(known)
        if unknown:
            raise ContractError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class StepResult:
    """One accepted update.

    ``dz_deterministic`` is the noise-free step after trust clipping, so it
    equals ``dz`` whenever every noise scale is zero.
    """

    dz: np.ndarray
    dz_deterministic: np.ndarray
    selected_targets: tuple = ()
    H_sigma_min: float = float("nan")
    clipped: bool = False


class TrajectoryError(RuntimeError):
    def __init__(self, step, cause):
        self.step = step
        self.cause = cause
        super().__init__(f"step {step} failed: {cause}")


@dataclass
class Trajectory:
    states: np.ndarray
    steps: list
    bmu_per_state: np.ndarray
    mode: str = "informed"
    config: dict = field(default_factory=dict)

    @property
    def n_steps(self):
        return self.states.shape[0] - 1

    @property
    def deltas(self):
        return np.diff(self.states, axis=0)

    def to_csv(self, path):
        """One row per state: step, coordinates, BMU, norm and targets of the
        step leaving that state (empty on the final state)."""
        D = self.states.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", *[f"z{i}" for i in range(D)], "bmu", "step_norm", "targets"])
            for t, z in enumerate(self.states):
                if t < len(self.steps):
                    s = self.steps[t]
                    tail = [repr(float(np.linalg.norm(s.dz))), " ".join(map(str, s.selected_targets))]
                else:
                    tail = ["", ""]
                w.writerow([t, *map(repr, z.tolist()), int(self.bmu_per_state[t]), *tail])

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        coord_cols = [i for i, h in enumerate(header) if h.startswith("z") and h[1:].isdigit()]
        bmu_col = header.index("bmu")
        tgt_col = header.index("targets") if "targets" in header else None
        states = np.array([[float(r[i]) for i in coord_cols] for r in body])
        bmus_ = np.array([int(r[bmu_col]) for r in body])
        steps = []
        for t in range(len(body) - 1):
            dz = states[t + 1] - states[t]
            tg = tuple(int(v) for v in body[t][tgt_col].split()) if tgt_col is not None else ()
            steps.append(StepResult(dz=dz, dz_deterministic=dz, selected_targets=tg))
        return cls(states=states, steps=steps, bmu_per_state=bmus_, mode="loaded")


def _rows(block):
    return block.rows if isinstance(block, JacobianBlock) else np.atleast_2d(np.asarray(block, dtype=np.float64))


def _weighted(rows, w):
    if w is None:
        return rows
    return rows * np.asarray(w, dtype=np.float64)[:, None]


def music_solve(A_S, B_T, b, gamma, lam, w_S=None, w_T=None, *, return_sigma_min=False):
    """Minimizer of the MUSIC energy through its normal equations.

    ``w_S`` and ``w_T`` are the diagonals of the row weights (default ones).
    ``H = (1-gamma) A^T A + gamma B^T B + lam I`` is SPD for ``lam > 0``, so a
    Cholesky solve is used.
    """
    if not lam > 0:
        raise ContractError("lam must be > 0")
    A = _weighted(_rows(A_S), w_S)
    B = _weighted(_rows(B_T), w_T)
    bw = np.asarray(b, dtype=np.float64) * (1.0 if w_T is None else np.asarray(w_T, dtype=np.float64))
    D = max(A.shape[1] if A.size else 0, B.shape[1] if B.size else 0)
    H = lam * np.eye(D)
    if A.size:
        H += (1.0 - gamma) * (A.T @ A)
    if B.size:
        H += gamma * (B.T @ B)
    rhs = gamma * (B.T @ bw) if B.size else np.zeros(D)
    dz = scipy.linalg.cho_solve(scipy.linalg.cho_factor(H, lower=True), rhs)
    if return_sigma_min:
        smin = float(scipy.linalg.eigvalsh(H, subset_by_index=[0, 0])[0])
        return dz, smin
    return dz


def stack_system(A_S, B_T, b, gamma, w_S=None, w_T=None):
    """Stacked operator ``M`` and data ``y`` with ``E = ||M dz - y||^2 + lam ||dz||^2``."""
    A = _weighted(_rows(A_S), w_S)
    B = _weighted(_rows(B_T), w_T)
    bw = np.asarray(b, dtype=np.float64) * (1.0 if w_T is None else np.asarray(w_T, dtype=np.float64))
    M = np.vstack([np.sqrt(1.0 - gamma) * A, np.sqrt(gamma) * B])
    y = np.concatenate([np.zeros(A.shape[0]), np.sqrt(gamma) * bw])
    return M, y


def music_solve_svd(M, y, lam):
    """Tikhonov solution as a spectral filter: ``sum_k s_k/(s_k^2+lam) <y,u_k> v_k``."""
    if not lam > 0:
        raise ContractError("lam must be > 0")
    M = np.atleast_2d(np.asarray(M, dtype=np.float64))
    u, s, vt = np.linalg.svd(M, full_matrices=False)
    filt = s / (s * s + lam)
    return vt.T @ (filt * (u.T @ np.asarray(y, dtype=np.float64)))


def lambda_scan(A_S, B_T, b, gamma, lams, w_S=None, w_T=None):
    """Raw L-curve data: ``(lam, ||dz||, ||M dz - y||)`` for each ``lam``."""
    M, y = stack_system(A_S, B_T, b, gamma, w_S, w_T)
    out = []
    for lam in lams:
        dz = music_solve_svd(M, y, lam)
        out.append((float(lam), float(np.linalg.norm(dz)), float(np.linalg.norm(M @ dz - y))))
    return out


def resolve_trust(z, W, cfg):
    if cfg.trust == "absolute":
        return cfg.trust_radius
    a = activation(z, W)
    return cfg.trust_radius * float(np.sqrt(a.min()))


def gaussian_weights(a, idx, bandwidth=None):
    """Row weights ``exp(-d_j^2 / (2 h^2))`` from current squared distances.

    ``h`` defaults to the median current distance over all units.
    """
    h = bandwidth if bandwidth is not None else float(np.median(np.sqrt(a)))
    if h <= 0:
        return np.ones(len(idx))
    return np.exp(-a[idx] / (2.0 * h * h))


def _clip(v, tau):
    n = np.linalg.norm(v)
    if n > tau:
        return v * (tau / n), True
    return v, False


def _row_weights(a, idx, cfg):
    if cfg.weight_scheme == "uniform":
        return None
    return gaussian_weights(a, idx, cfg.bandwidth)


def _preserve_set(z, W, exclude, cfg):
    weights = as_weights(W)
    n = weights.shape[0]
    if cfg.preserve_scope == "ring":
        if not hasattr(W, "rows"):
            raise ContractError("ring preservation needs lattice information (a PrototypeSet)")
        base = lattice_neighborhood(bmu(z, weights), cfg.ring_radius, W)
    else:
        base = np.arange(n)
    return base[~np.isin(base, exclude)]


def _jitter(rows, scale, rng):
    if scale <= 0 or rows.size == 0:
        return rows
    g = rng.standard_normal(rows.shape)
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    return rows + scale * g


def _targeted_step(z, W, targets, preserve, cfg, rng, tau):
    weights = as_weights(W)
    a = activation(z, weights)
    A = activation_jacobian(z, weights, preserve, normalize=cfg.normalize) if preserve.size else None
    B = activation_jacobian(z, weights, targets, normalize=cfg.normalize)
    if cfg.b_mode == "squared":
        b = -cfg.eta * a[targets]
    else:
        b = -cfg.eta * np.sqrt(a[targets])
    if cfg.sigma_b > 0:
        b = b + rng.normal(0.0, cfg.sigma_b, size=b.shape)
    A_rows = _jitter(A.rows, cfg.jitter, rng) if A is not None else np.zeros((0, z.shape[0]))
    B_rows = _jitter(B.rows, cfg.jitter, rng)
    w_S = _row_weights(a, preserve, cfg) if preserve.size else None
    w_T = _row_weights(a, targets, cfg)
    raw, smin = music_solve(A_rows, B_rows, b, cfg.gamma, cfg.lam, w_S, w_T, return_sigma_min=True)
    det, clipped_det = _clip(raw, tau)
    dz = raw
    if cfg.sigma_z > 0:
        dz = raw + rng.normal(0.0, cfg.sigma_z, size=raw.shape)
    dz, clipped = _clip(dz, tau)
    return StepResult(
        dz=dz,
        dz_deterministic=det,
        selected_targets=tuple(int(t) for t in targets),
        H_sigma_min=smin,
        clipped=clipped if cfg.sigma_z > 0 else clipped_det,
    )


def _sign_fix(q):
    nz = np.flatnonzero(np.abs(q) > 1e-12 * np.abs(q).max())
    return -q if q[nz[0]] < 0 else q


def free_step(z, W, cfg, rng=None):
    """Move along the least disruptive direction of the preservation metric.

    The deterministic part is ``tau * q_min`` with ``q_min`` the unit
    eigenvector of ``C = (W_S A_S)^T (W_S A_S) + lam I`` with smallest
    eigenvalue, signed so its first nonzero coordinate is positive. Step noise
    is clipped to ``tau``, added, and the sum clipped again.
    """
    rng = check_rng(cfg.seed if rng is None else rng)
    weights = as_weights(W)
    z = as_vector(z, weights.shape[1])
    tau = resolve_trust(z, W, cfg)
    preserve = _preserve_set(z, W, np.array([], dtype=np.intp), cfg)
    a = activation(z, weights)
    A = activation_jacobian(z, weights, preserve, normalize=cfg.normalize)
    rows = _jitter(A.rows, cfg.jitter, rng)
    Aw = _weighted(rows, _row_weights(a, preserve, cfg))
    C = Aw.T @ Aw + cfg.lam * np.eye(z.shape[0])
    evals, evecs = np.linalg.eigh(C)
    q = _sign_fix(evecs[:, 0])
    det = tau * q
    dz = det
    clipped = False
    if cfg.sigma_z > 0:
        xi, _ = _clip(rng.normal(0.0, cfg.sigma_z, size=det.shape), tau)
        dz, clipped = _clip(det + xi, tau)
    return StepResult(dz=dz, dz_deterministic=det, selected_targets=(), H_sigma_min=float(evals[0]), clipped=clipped)


def informed_step(z, W, t, cfg, rng=None):
    """Pull ``z`` toward prototype ``t`` while preserving the other activations.

    Requests ``b = -eta * a_t(z)``. If ``z`` already equals ``w_t`` the step
    is zero.
    """
    rng = check_rng(cfg.seed if rng is None else rng)
    weights = as_weights(W)
    z = as_vector(z, weights.shape[1])
    t = int(as_index_set(t, weights.shape[0], name="t")[0])
    if np.array_equal(z, weights[t]):
        zero = np.zeros_like(z)
        return StepResult(dz=zero, dz_deterministic=zero, selected_targets=(t,), H_sigma_min=cfg.lam)
    tau = resolve_trust(z, W, cfg)
    targets = np.array([t])
    preserve = _preserve_set(z, W, targets, cfg)
    return _targeted_step(z, W, targets, preserve, cfg, rng, tau)


def _draw_targets(T, cfg, rng):
    if T.size == 1 or cfg.subsample == "all":
        return T
    if cfg.subsample == "single-random":
        return T[[rng.integers(T.size)]]
    if cfg.subsample == "fixed-k":
        if cfg.subsample_k > T.size:
            raise ContractError(f"subsample_k={cfg.subsample_k} exceeds |T|={T.size}")
        return np.sort(rng.choice(T, size=cfg.subsample_k, replace=False))
    for _ in range(BERNOULLI_REDRAWS):
        keep = rng.random(T.size) < cfg.subsample_p
        if keep.any():
            return T[keep]
    return T


def cluster_step(z, W, T, cfg, rng=None):
    """One relinearization pass toward a random subset of the cluster ``T``.

    Multi-target draws preserve the complement of the whole cluster; a
    single random target preserves every other unit, exactly like
    :func:`informed_step`. With ``|T| = 1`` no subsampling randomness is
    consumed, so the result matches :func:`informed_step` for the same seed.
    """
    rng = check_rng(cfg.seed if rng is None else rng)
    weights = as_weights(W)
    z = as_vector(z, weights.shape[1])
    T = np.unique(as_index_set(T, weights.shape[0], name="T"))
    if T.size == 0:
        raise ContractError("target set must be non-empty")
    chosen = _draw_targets(T, cfg, rng)
    if chosen.size == 1:
        return informed_step(z, W, int(chosen[0]), cfg, rng)
    tau = resolve_trust(z, W, cfg)
    preserve = _preserve_set(z, W, T, cfg)
    return _targeted_step(z, W, chosen, preserve, cfg, rng, tau)


def perturbation_step(z, W, j, delta, cfg, step_len, n_preserve=4, preserve=None):
    """Unit-norm MUSIC response to a requested change ``delta`` of activation ``j``.

    The target row of ``j`` asks for ``delta`` while the units in ``preserve``
    (default: the ``n_preserve`` nearest others) are held fixed; the solution
    direction is rescaled to length ``step_len``.
    """
    weights = as_weights(W)
    z = as_vector(z, weights.shape[1])
    if preserve is None:
        order = np.argsort(activation(z, weights), kind="stable")
        preserve = order[order != j][:n_preserve]
    else:
        preserve = as_index_set(preserve, weights.shape[0], name="preserve")
        preserve = preserve[preserve != j]
    A = activation_jacobian(z, weights, preserve, normalize=cfg.normalize)
    B = activation_jacobian(z, weights, [j], normalize=cfg.normalize)
    d = music_solve(A, B, [delta], cfg.gamma, cfg.lam)
    n = np.linalg.norm(d)
    dz = np.zeros_like(z) if n == 0 else step_len * d / n
    return StepResult(dz=dz, dz_deterministic=dz, selected_targets=(int(j),))


def radial_baseline_step(z, W, j, step_len):
    """Unconstrained step along ``(z - w_j)/||z - w_j||``; negative lengths move toward ``w_j``."""
    weights = as_weights(W)
    z = as_vector(z, weights.shape[1])
    x = z - weights[int(j)]
    n = np.linalg.norm(x)
    if n == 0.0:
        raise ContractError(f"input coincides with prototype {int(j)}; radial direction undefined")
    return step_len * x / n


def _combine(results):
    if len(results) == 1:
        return results[0]
    targets = []
    for r in results:
        targets.extend(t for t in r.selected_targets if t not in targets)
    return StepResult(
        dz=np.sum([r.dz for r in results], axis=0),
        dz_deterministic=np.sum([r.dz_deterministic for r in results], axis=0),
        selected_targets=tuple(targets),
        H_sigma_min=min(r.H_sigma_min for r in results),
        clipped=any(r.clipped for r in results),
    )


def run_trajectory(z0, W, mode, cfg, steps, target=None, step_len=None, schedule=None, preserve=None):
    """Iterate MUSIC steps from ``z0`` and record every state.

    ``mode`` is one of

    - ``"free"``: least-disruptive steps;
    - ``"informed"``: toward unit ``target``;
    - ``"cluster"``: toward the unit set ``target``;
    - ``"perturb"``: random single-activation requests from ``schedule``, a
      sequence of ``(j, delta)`` pairs, with steps of length ``step_len``,
      holding ``preserve`` fixed (default: the 4 nearest units of each state);
    - ``"baseline"``: radial steps away from units ``schedule[t][0]`` (toward
      them when ``delta`` is negative) of length ``step_len``.

    Each outer step applies ``cfg.passes`` relinearized passes; the recorded
    step is their sum. All randomness comes from one generator seeded with
    ``cfg.seed``.
    """
    if steps < 0:
        raise ContractError("steps must be >= 0")
    weights = as_weights(W)
    z = as_vector(z0, weights.shape[1]).copy()
    rng = check_rng(cfg.seed)
    if mode in ("perturb", "baseline"):
        if schedule is None or len(schedule) < steps:
            raise ContractError(f"mode {mode!r} needs a schedule of at least {steps} (unit, delta) pairs")
        if step_len is None:
            raise ContractError(f"mode {mode!r} needs step_len")
    elif mode in ("informed", "cluster"):
        if target is None:
            raise ContractError(f"mode {mode!r} needs a target")
    elif mode != "free":
        raise ContractError(f"unknown mode {mode!r}")

    states = [z.copy()]
    bmus_ = [bmu(z, weights)]
    results = []
    for t in range(steps):
        try:
            if mode == "baseline":
                j, delta = schedule[t]
                dz = radial_baseline_step(z, weights, j, np.sign(delta) * step_len if delta else step_len)
                res = StepResult(dz=dz, dz_deterministic=dz, selected_targets=(int(j),))
            elif mode == "perturb":
                j, delta = schedule[t]
                res = perturbation_step(z, weights, int(j), float(delta), cfg, step_len, preserve=preserve)
            else:
                passes = []
                zi = z
                for _ in range(cfg.passes):
                    if mode == "free":
                        r = free_step(zi, W, cfg, rng)
                    elif mode == "informed":
                        r = informed_step(zi, W, target, cfg, rng)
                    else:
                        r = cluster_step(zi, W, target, cfg, rng)
                    passes.append(r)
                    zi = zi + r.dz
                res = _combine(passes)
        except ContractError as exc:
            raise TrajectoryError(t, exc) from exc
        z = z + res.dz
        states.append(z.copy())
        bmus_.append(bmu(z, weights))
        results.append(res)

    snapshot = cfg.to_dict()
    snapshot.update(mode=mode, steps=steps)
    if target is not None:
        snapshot["target"] = np.atleast_1d(target).tolist()
    if step_len is not None:
        snapshot["step_len"] = step_len
    if preserve is not None:
        snapshot["preserve"] = np.atleast_1d(preserve).tolist()
    return Trajectory(
        states=np.asarray(states),
        steps=results,
        bmu_per_state=np.asarray(bmus_),
        mode=mode,
        config=snapshot,
    )


def identity_drift(states, W, anchors):
    """``sum_j |a_j(z_t) - a_j(z_0)|`` over anchor units, for every state."""
    weights = as_weights(W)
    states = np.atleast_2d(states)
    anchors = np.atleast_1d(anchors)
    diff = states[:, None, :] - weights[anchors][None, :, :]
    a = np.einsum("tjd,tjd->tj", diff, diff)
    return np.abs(a - a[0]).sum(axis=1)


class MusicController:
    """Scikit-learn style wrapper: ``fit`` stores prototypes, ``transform``
    steers each input row for ``n_steps`` and returns the final states.
    """

    _config_params = tuple(MusicConfig.__dataclass_fields__)

    def __init__(self, mode="informed", target=None, n_steps=100, **config):
        self.mode = mode
        self.target = target
        self.n_steps = n_steps
        cfg = MusicConfig(**config)
        for name in self._config_params:
            setattr(self, name, getattr(cfg, name))

    def get_params(self, deep=True):
        params = {"mode": self.mode, "target": self.target, "n_steps": self.n_steps}
        params.update({name: getattr(self, name) for name in self._config_params})
        return params

    def set_params(self, **params):
        for k, v in params.items():
            if k not in self.get_params():
                raise ValueError(f"invalid parameter {k!r}")
            setattr(self, k, v)
        return self

    def __repr__(self):
        return f"MusicController(mode={self.mode!r}, target={self.target!r}, n_steps={self.n_steps})"

    @property
    def config(self):
        return MusicConfig(**{name: getattr(self, name) for name in self._config_params})

    def fit(self, X, y=None):
        """``X`` is a PrototypeSet, a fitted map, or a raw ``(N, D)`` codebook."""
        self.prototypes_ = X if hasattr(X, "rows") else as_weights(X)
        self.n_features_in_ = as_weights(X).shape[1]
        return self

    def trajectory(self, z0, seed=None):
        if not hasattr(self, "prototypes_"):
            raise ContractError("call fit before steering inputs")
        cfg = self.config if seed is None else replace(self.config, seed=seed)
        return run_trajectory(z0, self.prototypes_, self.mode, cfg, self.n_steps, target=self.target)

    def transform(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        base = self.seed
        out = []
        for i, z in enumerate(X):
            seed = None if base is None else base + i
            out.append(self.trajectory(z, seed=seed).states[-1])
        return np.asarray(out)


def config_from_json(path, **overrides):
    with open(path) as fh:
        d = json.load(fh)
    d.update({k: v for k, v in overrides.items() if v is not None})
    return MusicConfig.from_dict(d)
