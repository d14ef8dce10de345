"""Self-Organizing Maps on rectangular or toroidal lattices."""

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, validate_data

from ._validation import ContractError, as_vector, as_weights, check_rng
from .geometry import activations

__all__ = [
    "PrototypeSet",
    "SomTrainConfig",
    "SelfOrganizingMap",
    "train_som",
    "bmu",
    "bmus",
    "lattice_distance",
    "lattice_neighborhood",
    "label_prototypes",
    "quantization_error",
    "UNMATCHED",
]

TOPOLOGIES = ("rectangular", "toroidal")

#: label given to units that are no sample's BMU
UNMATCHED = -1


@dataclass(frozen=True)
class PrototypeSet:
    """SOM codebook plus the lattice it lives on.

    Unit ``i`` sits at lattice coordinate ``(i // cols, i % cols)``.
    """

    weights: np.ndarray
    rows: int
    cols: int
    topology: str = "rectangular"
    labels: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] < 1:
            raise ContractError(f"weights must be (N, D) with N >= 1, got {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ContractError("weights have non-finite entries")
        if self.rows < 1 or self.cols < 1 or self.rows * self.cols != w.shape[0]:
            raise ContractError(
                f"lattice {self.rows}x{self.cols} does not hold {w.shape[0]} units"
            )
        if self.topology not in TOPOLOGIES:
            raise ContractError(f"unknown topology {self.topology!r}")
        object.__setattr__(self, "weights", w)
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int64)
            if labels.shape != (w.shape[0],):
                raise ContractError("one label per unit required")
            object.__setattr__(self, "labels", labels)

    @property
    def n_units(self):
        return self.weights.shape[0]

    @property
    def dim(self):
        return self.weights.shape[1]

    @property
    def unit_coords(self):
        idx = np.arange(self.n_units)
        return np.column_stack([idx // self.cols, idx % self.cols])

    def unit_index(self, row, col):
        return int(row) * self.cols + int(col)

    def with_labels(self, labels):
        return replace(self, labels=labels)

    def to_dict(self):
        out = {
            "rows": self.rows,
            "cols": self.cols,
            "topology": self.topology,
            "D": self.dim,
            # float repr is the shortest string that round-trips binary64 exactly
            "weights": self.weights.ravel().tolist(),
        }
        if self.labels is not None:
            out["labels"] = self.labels.tolist()
        return out

    @classmethod
    def from_dict(cls, d):
        n = int(d["rows"]) * int(d["cols"])
        weights = np.asarray(d["weights"], dtype=np.float64)
        if weights.size != n * int(d["D"]):
            raise ContractError("weights length does not match rows * cols * D")
        return cls(
            weights=weights.reshape(n, int(d["D"])),
            rows=int(d["rows"]),
            cols=int(d["cols"]),
            topology=d.get("topology", "rectangular"),
            labels=d.get("labels"),
        )

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class SomTrainConfig:
    epochs: int = 10
    learning_rate: float = 0.5
    final_learning_rate: float = 0.01
    radius: float | None = None  # None: half the larger lattice side
    final_radius: float = 0.5
    decay: str = "exponential"
    seed: int | None = 0
    init: str = "random-sample"

    def __post_init__(self):
        if self.epochs < 1:
            raise ContractError("epochs must be >= 1")
        if not (self.learning_rate > 0 and self.final_learning_rate > 0):
            raise ContractError("learning rates must be > 0")
        if self.final_learning_rate > self.learning_rate:
            raise ContractError("learning rate must be non-increasing")
        if self.final_radius < 0 or (self.radius is not None and self.radius < 0):
            raise ContractError("radius must be >= 0")
        if self.decay not in ("exponential", "linear"):
            raise ContractError(f"unknown decay schedule {self.decay!r}")
        if self.init not in ("random-sample", "pca-plane"):
            raise ContractError(f"unknown init scheme {self.init!r}")


def _axis_offsets(a, b, size, toroidal):
    d = np.abs(np.subtract.outer(a, b))
    if toroidal:
        d = np.minimum(d, size - d)
    return d


def _lattice_offsets(rows, cols, topology, centers=None):
    idx = np.arange(rows * cols)
    centers = idx if centers is None else np.atleast_1d(centers)
    tor = topology == "toroidal"
    dr = _axis_offsets(centers // cols, idx // cols, rows, tor)
    dc = _axis_offsets(centers % cols, idx % cols, cols, tor)
    return dr, dc


def lattice_distance(i, j, W, metric="chebyshev"):
    """Lattice distance between units ``i`` and ``j`` (wrapping on a torus)."""
    dr, dc = _lattice_offsets(W.rows, W.cols, W.topology, centers=i)
    dr, dc = dr[..., j], dc[..., j]
    if metric == "chebyshev":
        return np.maximum(dr, dc)
    if metric == "euclidean":
        return np.hypot(dr, dc)
    raise ContractError(f"unknown lattice metric {metric!r}")


def lattice_neighborhood(center, r, W):
    """Units within Chebyshev lattice distance ``r`` of ``center``, sorted."""
    if r < 0:
        raise ContractError("ring radius must be >= 0")
    dr, dc = _lattice_offsets(W.rows, W.cols, W.topology, centers=int(center))
    return np.flatnonzero(np.maximum(dr, dc)[0] <= r)


def bmu(z, W):
    """Index of the nearest prototype; ties go to the lowest index."""
    weights = as_weights(W)
    z = as_vector(z, weights.shape[1])
    diff = weights - z
    return int(np.argmin(np.einsum("ij,ij->i", diff, diff)))


def bmus(Z, W):
    return np.argmin(activations(Z, W), axis=1)


def quantization_error(data, W):
    """Mean distance from each sample to its BMU prototype."""
    return float(np.mean(np.sqrt(np.min(activations(data, W), axis=1))))


def label_prototypes(W, data, labels):
    """Majority label of the samples each unit wins.

    Units that win no sample get :data:`UNMATCHED`; ties between labels go to
    the smallest label value.
    """
    labels = np.asarray(labels)
    data = check_array(data, dtype=np.float64)
    if labels.shape[0] != data.shape[0]:
        raise ContractError("labels must align with data rows")
    weights = as_weights(W)
    winners = bmus(data, weights)
    classes, coded = np.unique(labels, return_inverse=True)
    counts = np.zeros((weights.shape[0], classes.size), dtype=np.int64)
    np.add.at(counts, (winners, coded), 1)
    out = classes[np.argmax(counts, axis=1)].astype(np.int64)
    out[counts.sum(axis=1) == 0] = UNMATCHED
    return out


def _schedule(start, end, frac, kind):
    if kind == "linear":
        return start + (end - start) * frac
    if end <= 0:
        # exponential decay to zero is undefined; shrink to a tiny floor instead
        end = 1e-3 * max(start, 1e-3)
    return start * (end / start) ** frac


class SelfOrganizingMap(TransformerMixin, BaseEstimator):
    """Online Kohonen map.

    Each sample pulls every prototype toward itself with strength
    ``lr_t * exp(-dist^2 / (2 sigma_t^2))``, where ``dist`` is the Euclidean
    lattice distance to the sample's BMU. Learning rate and radius decay per
    sample from their initial to their final values.

    ``transform`` returns squared-distance activations, ``predict`` the BMU.
    """

    def __init__(
        self,
        rows=10,
        cols=10,
        topology="rectangular",
        epochs=10,
        learning_rate=0.5,
        final_learning_rate=0.01,
        radius=None,
        final_radius=0.5,
        decay="exponential",
        init="random-sample",
        random_state=0,
    ):
        self.rows = rows
        self.cols = cols
        self.topology = topology
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.final_learning_rate = final_learning_rate
        self.radius = radius
        self.final_radius = final_radius
        self.decay = decay
        self.init = init
        self.random_state = random_state

    def _config(self):
        return SomTrainConfig(
            epochs=self.epochs,
            learning_rate=self.learning_rate,
            final_learning_rate=self.final_learning_rate,
            radius=self.radius,
            final_radius=self.final_radius,
            decay=self.decay,
            seed=self.random_state,
            init=self.init,
        )

    def _init_weights(self, X, n, rng):
        if self.init == "random-sample":
            rows = rng.choice(X.shape[0], size=n, replace=X.shape[0] < n)
            return X[rows].copy()
        # pca-plane: spread the grid over the two leading principal axes
        mean = X.mean(axis=0)
        _, s, vt = np.linalg.svd(X - mean, full_matrices=False)
        scale = s / np.sqrt(max(X.shape[0] - 1, 1))
        axes = [vt[i] * scale[i] if i < vt.shape[0] else np.zeros(X.shape[1]) for i in (0, 1)]
        r = np.linspace(-1.0, 1.0, self.rows) if self.rows > 1 else np.zeros(1)
        c = np.linspace(-1.0, 1.0, self.cols) if self.cols > 1 else np.zeros(1)
        rr, cc = np.meshgrid(r, c, indexing="ij")
        return mean + np.outer(rr.ravel(), axes[0]) + np.outer(cc.ravel(), axes[1])

    def fit(self, X, y=None):
        cfg = self._config()
        if self.topology not in TOPOLOGIES:
            raise ContractError(f"unknown topology {self.topology!r}")
        X = validate_data(self, X, dtype=np.float64, ensure_all_finite=True)
        n = self.rows * self.cols
        rng = check_rng(cfg.seed)
        W = self._init_weights(X, n, rng)

        dr, dc = _lattice_offsets(self.rows, self.cols, self.topology)
        lat_sq = (dr**2 + dc**2).astype(np.float64)
        radius0 = cfg.radius if cfg.radius is not None else max(self.rows, self.cols) / 2.0
        radius0 = max(radius0, cfg.final_radius)

        m = X.shape[0]
        total = cfg.epochs * m
        qe = []
        step = 0
        for _ in range(cfg.epochs):
            order = rng.permutation(m)
            for i in order:
                x = X[i]
                frac = step / max(total - 1, 1)
                lr = _schedule(cfg.learning_rate, cfg.final_learning_rate, frac, cfg.decay)
                sigma = _schedule(radius0, cfg.final_radius, frac, cfg.decay)
                diff = x - W
                win = np.argmin(np.einsum("ij,ij->i", diff, diff))
                if sigma > 0:
                    h = np.exp(-lat_sq[win] / (2.0 * sigma * sigma))
                else:
                    h = (lat_sq[win] == 0.0).astype(np.float64)
                W += (lr * h)[:, None] * diff
                step += 1
            qe.append(quantization_error(X, W))

        self.weights_ = W
        self.quantization_errors_ = np.asarray(qe)
        self.prototypes_ = PrototypeSet(W.copy(), self.rows, self.cols, self.topology)
        return self

    def transform(self, X):
        check_is_fitted(self)
        X = validate_data(self, X, dtype=np.float64, reset=False)
        return activations(X, self.weights_)

    def predict(self, X):
        check_is_fitted(self)
        X = validate_data(self, X, dtype=np.float64, reset=False)
        return bmus(X, self.weights_)

    def inverse_transform(self, A):
        """Recover inputs from activation rows by exact least-squares inversion."""
        from .inversion import invert

        check_is_fitted(self)
        A = check_array(A, dtype=np.float64)
        if A.shape[1] != self.weights_.shape[0]:
            raise ContractError(f"expected {self.weights_.shape[0]} activations per row")
        return np.vstack([invert(self.weights_, a)[0] for a in A])

    def score(self, X, y=None):
        """Negative quantization error, so larger is better."""
        check_is_fitted(self)
        X = validate_data(self, X, dtype=np.float64, reset=False)
        return -quantization_error(X, self.weights_)


def train_som(data, lattice, cfg=None):
    """Train a map on ``data`` and return its :class:`PrototypeSet`.

    ``lattice`` is ``(rows, cols, topology)``.
    """
    cfg = cfg or SomTrainConfig()
    data = check_array(data, dtype=np.float64, ensure_all_finite=True)
    rows, cols, topology = lattice
    est = SelfOrganizingMap(
        rows=rows,
        cols=cols,
        topology=topology,
        epochs=cfg.epochs,
        learning_rate=cfg.learning_rate,
        final_learning_rate=cfg.final_learning_rate,
        radius=cfg.radius,
        final_radius=cfg.final_radius,
        decay=cfg.decay,
        init=cfg.init,
        random_state=cfg.seed,
    ).fit(data)
    return est.prototypes_
