"""Synthetic mixtures, MNIST IDX files and PCA whitening."""

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, validate_data

from ._validation import ContractError, check_rng

__all__ = [
    "GmmSpec",
    "gmm_sample",
    "triangle_gmm_spec",
    "IsotropicScaler",
    "IdxFormatError",
    "load_idx",
    "write_idx",
    "load_mnist_idx",
    "find_mnist",
    "DATA_DIR_ENV",
    "WhiteningTransform",
    "PCAWhitener",
    "pca_whiten_fit",
    "pca_whiten_apply",
]

DATA_DIR_ENV = "MUSIC_SOM_DATA"


@dataclass(frozen=True)
class GmmSpec:
    means: np.ndarray
    covariances: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        covs = np.asarray(self.covariances, dtype=np.float64)
        w = np.asarray(self.weights, dtype=np.float64)
        K, D = means.shape
        if covs.shape != (K, D, D):
            raise ContractError(f"covariances must be {(K, D, D)}, got {covs.shape}")
        if w.shape != (K,) or np.any(w < 0) or not np.isclose(w.sum(), 1.0):
            raise ContractError("weights must be non-negative and sum to 1")
        for k in range(K):
            if not np.allclose(covs[k], covs[k].T):
                raise ContractError(f"covariance {k} is not symmetric")
            if np.linalg.eigvalsh(covs[k]).min() <= 0:
                raise ContractError(f"covariance {k} is not positive definite")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "covariances", covs)
        object.__setattr__(self, "weights", w)

    @property
    def n_components(self):
        return self.means.shape[0]

    @property
    def dim(self):
        return self.means.shape[1]


def gmm_sample(spec, n, seed=None):
    """``n`` i.i.d. draws and the index of the component each came from."""
    if n < 1:
        raise ContractError("n must be >= 1")
    rng = check_rng(seed)
    comp = rng.choice(spec.n_components, size=n, p=spec.weights)
    noise = rng.standard_normal((n, spec.dim))
    chol = np.linalg.cholesky(spec.covariances)
    data = spec.means[comp] + np.einsum("nij,nj->ni", chol[comp], noise)
    return data, comp


def triangle_gmm_spec(D=10, side=6.0, in_plane_var=1.0, off_plane_var=0.05):
    """Three equal-weight components on an equilateral triangle in coords 0-1.

    Every coordinate beyond the first two has mean zero and the small
    variance ``off_plane_var``.
    """
    if D < 2:
        raise ContractError("D must be >= 2")
    R = side / np.sqrt(3.0)
    ang = np.deg2rad([90.0, 210.0, 330.0])
    means = np.zeros((3, D))
    means[:, 0] = R * np.cos(ang)
    means[:, 1] = R * np.sin(ang)
    var = np.full(D, off_plane_var)
    var[:2] = in_plane_var
    covs = np.repeat(np.diag(var)[None], 3, axis=0)
    return GmmSpec(means, covs, np.full(3, 1.0 / 3.0))


class IsotropicScaler(TransformerMixin, BaseEstimator):
    """Center each feature and divide by one global scale.

    Unlike per-feature standardization this keeps the relative spread of the
    coordinates, so low-variance directions stay low-variance.
    """

    def fit(self, X, y=None):
        X = validate_data(self, X, dtype=np.float64)
        self.mean_ = X.mean(axis=0)
        self.scale_ = float(np.sqrt(np.mean(np.sum((X - self.mean_) ** 2, axis=1)) / X.shape[1]))
        if self.scale_ == 0:
            raise ContractError("data has zero variance")
        return self

    def transform(self, X):
        check_is_fitted(self)
        X = validate_data(self, X, dtype=np.float64, reset=False)
        return (X - self.mean_) / self.scale_

    def inverse_transform(self, X):
        check_is_fitted(self)
        return np.asarray(X, dtype=np.float64) * self.scale_ + self.mean_


class IdxFormatError(ValueError):
    pass


_IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


def _read_bytes(path):
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def load_idx(path, expect_ndim=None):
    """Parse an IDX file (optionally gzipped) into an array."""
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: too short for an IDX header")
    zero, code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or code not in _IDX_DTYPES:
        raise IdxFormatError(f"{path}: bad magic number 0x{raw[:4].hex()}")
    if expect_ndim is not None and ndim != expect_ndim:
        raise IdxFormatError(f"{path}: expected {expect_ndim} dims, header says {ndim}")
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise IdxFormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    dtype = _IDX_DTYPES[code]
    need = int(np.prod(dims)) * dtype.itemsize
    if len(raw) - head < need:
        raise IdxFormatError(f"{path}: truncated payload ({len(raw) - head} of {need} bytes)")
    return np.frombuffer(raw, dtype=dtype, count=int(np.prod(dims)), offset=head).reshape(dims)


def write_idx(path, array):
    """Write an unsigned-byte IDX file; mostly for fixtures."""
    array = np.asarray(array, dtype=np.uint8)
    header = struct.pack(">HBB", 0, 0x08, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.tobytes())


def load_mnist_idx(images_path, labels_path):
    """Images flattened row-major and scaled to ``[0, 1]``, plus integer labels."""
    images = load_idx(images_path, expect_ndim=3)
    labels = load_idx(labels_path, expect_ndim=1)
    if images.dtype != np.dtype(">u1") or labels.dtype != np.dtype(">u1"):
        raise IdxFormatError("MNIST files must hold unsigned bytes")
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    data = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return data, labels.astype(np.int64)


_MNIST_NAMES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def find_mnist(split="train", data_dir=None):
    """Paths of the MNIST image/label files for ``split``, or ``None``.

    Looks in ``data_dir``, then ``$MUSIC_SOM_DATA`` and its ``mnist/``
    subdirectory, accepting plain or ``.gz`` files.
    """
    roots = []
    base = data_dir or os.environ.get(DATA_DIR_ENV)
    if base:
        roots += [Path(base), Path(base) / "mnist", Path(base) / "MNIST" / "raw"]
    for root in roots:
        found = []
        for stem in _MNIST_NAMES[split]:
            hits = [root / f"{stem}{ext}" for ext in ("", ".gz")]
            hits += [root / f"{stem.replace('-idx', '.idx')}{ext}" for ext in ("", ".gz")]
            hit = next((h for h in hits if h.is_file()), None)
            if hit is None:
                break
            found.append(hit)
        if len(found) == 2:
            return tuple(found)
    return None


@dataclass(frozen=True)
class WhiteningTransform:
    mean: np.ndarray
    forward: np.ndarray
    inverse: np.ndarray
    eps: float
    eigenvalues: np.ndarray

    @property
    def floored(self):
        return self.eigenvalues < self.eps


def pca_whiten_fit(data, eps=1e-8):
    """Full-dimensional PCA whitening of ``data`` (rows are samples).

    ``forward`` maps centered data onto the principal axes scaled to unit
    variance (sample covariance with ``ddof=1``). Eigenvalues below ``eps``
    are raised to ``eps`` so flat directions stay invertible.
    """
    data = check_array(data, dtype=np.float64)
    if eps < 0:
        raise ContractError("eps must be >= 0")
    mean = data.mean(axis=0)
    X = data - mean
    cov = X.T @ X / max(data.shape[0] - 1, 1)
    evals, evecs = np.linalg.eigh(cov)
    evals, evecs = evals[::-1], evecs[:, ::-1]
    evals = np.maximum(evals, 0.0)
    if eps == 0 and np.any(evals == 0):
        raise ContractError("zero-variance directions need eps > 0")
    scale = np.sqrt(np.maximum(evals, eps))
    forward = evecs.T / scale[:, None]
    inverse = evecs * scale[None, :]
    return WhiteningTransform(mean=mean, forward=forward, inverse=inverse, eps=eps, eigenvalues=evals)


def pca_whiten_apply(transform, x, direction="forward"):
    x = np.asarray(x, dtype=np.float64)
    if direction == "forward":
        return (x - transform.mean) @ transform.forward.T
    if direction == "inverse":
        return x @ transform.inverse.T + transform.mean
    raise ContractError(f"direction must be 'forward' or 'inverse', got {direction!r}")


class PCAWhitener(TransformerMixin, BaseEstimator):
    """Estimator wrapper around :func:`pca_whiten_fit`."""

    def __init__(self, eps=1e-8):
        self.eps = eps

    def fit(self, X, y=None):
        X = validate_data(self, X, dtype=np.float64)
        self.transform_ = pca_whiten_fit(X, self.eps)
        return self

    def transform(self, X):
        check_is_fitted(self)
        X = validate_data(self, X, dtype=np.float64, reset=False)
        return pca_whiten_apply(self.transform_, X, "forward")

    def inverse_transform(self, X):
        check_is_fitted(self)
        return pca_whiten_apply(self.transform_, X, "inverse")
