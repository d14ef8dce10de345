"""Input checking shared across modules."""

import numpy as np
from sklearn.utils.validation import check_array


class ContractError(ValueError):
    """An argument violates a documented precondition."""


class DegenerateRowError(ContractError):
    """A Jacobian row vanishes because the input sits on a prototype."""

    def __init__(self, index):
        self.index = int(index)
        super().__init__(
            f"input coincides with prototype {self.index}; its normalized "
            "Jacobian row is undefined"
        )


def as_weights(W):
    """Return the (N, D) prototype matrix of ``W``.

    Accepts a :class:`~music_som.som.PrototypeSet`, a fitted
    :class:`~music_som.som.SelfOrganizingMap`, or anything array-like.
    """
    weights = getattr(W, "weights", None)
    if weights is None:
        weights = getattr(W, "weights_", None)
    if weights is None:
        weights = W
    return check_array(weights, dtype=np.float64, ensure_all_finite=True)


def as_vector(z, dim=None, name="z"):
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1:
        raise ContractError(f"{name} must be a 1-D vector, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise ContractError(f"{name} has non-finite entries")
    if dim is not None and z.shape[0] != dim:
        raise ContractError(
            f"dimension mismatch: {name} has {z.shape[0]} coords, prototypes have {dim}"
        )
    return z


def as_index_set(subset, n, name="subset"):
    idx = np.atleast_1d(np.asarray(subset, dtype=np.intp))
    if idx.ndim != 1:
        raise ContractError(f"{name} must be a flat list of indices")
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise ContractError(f"{name} has indices outside [0, {n})")
    return idx % n if idx.size else idx


def check_rng(seed):
    """Turn ``seed`` into a :class:`numpy.random.Generator`."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
