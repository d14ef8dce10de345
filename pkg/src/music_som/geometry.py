"""Squared-distance activations, their Jacobians and single-cell perturbations.

Everything here is a pure function of its arguments. Prototype sets may be
passed as a :class:`~music_som.som.PrototypeSet`, a fitted
:class:`~music_som.som.SelfOrganizingMap` or a plain ``(N, D)`` array.
"""

from dataclasses import dataclass

import numpy as np

from ._validation import (
    ContractError,
    DegenerateRowError,
    as_index_set,
    as_vector,
    as_weights,
    check_rng,
)

__all__ = [
    "JacobianBlock",
    "activation",
    "activations",
    "activation_jacobian",
    "radial_tangential_step",
    "sample_tangent_directions",
    "tangential_max_bound",
]


@dataclass(frozen=True)
class JacobianBlock:
    """Stacked activation-Jacobian rows for a subset of prototypes.

    ``rows`` holds either the raw gradients ``2 (z - w_j)`` or their unit
    normalizations; ``row_norms`` always keeps the raw norms.
    """

    rows: np.ndarray
    row_indices: np.ndarray
    normalized: bool
    row_norms: np.ndarray

    @property
    def shape(self):
        return self.rows.shape

    def __len__(self):
        return self.rows.shape[0]


def activation(z, W):
    """Squared Euclidean distances from ``z`` to every prototype.

    >>> activation([0.5, 0.25], [[0, 0], [1, 0], [0, 1]])
    array([0.3125, 0.3125, 0.8125])
    """
    weights = as_weights(W)
    z = as_vector(z, weights.shape[1])
    diff = z[None, :] - weights
    return np.einsum("ij,ij->i", diff, diff)


def activations(Z, W):
    """Row-wise :func:`activation` for a batch ``Z`` of shape ``(M, D)``."""
    weights = as_weights(W)
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    if Z.shape[1] != weights.shape[1]:
        raise ContractError(
            f"dimension mismatch: inputs have {Z.shape[1]} coords, "
            f"prototypes have {weights.shape[1]}"
        )
    # direct differences rather than the ||z||^2 - 2 z.w + ||w||^2 expansion,
    # which loses the exact zero at z == w_j
    diff = Z[:, None, :] - weights[None, :, :]
    return np.einsum("mnd,mnd->mn", diff, diff)


def activation_jacobian(z, W, subset=None, normalize=False):
    """Jacobian rows ``2 (z - w_j)`` for ``j`` in ``subset``.

    With ``normalize=True`` each row is scaled to unit length; a row that
    vanishes (``z == w_j``) raises :class:`DegenerateRowError` naming ``j``.
    """
    weights = as_weights(W)
    z = as_vector(z, weights.shape[1])
    n = weights.shape[0]
    idx = np.arange(n) if subset is None else as_index_set(subset, n)
    if idx.size == 0:
        raise ContractError("subset must be non-empty")
    raw = 2.0 * (z[None, :] - weights[idx])
    norms = np.linalg.norm(raw, axis=1)
    if normalize:
        zero = np.flatnonzero(norms == 0.0)
        if zero.size:
            raise DegenerateRowError(idx[zero[0]])
        rows = raw / norms[:, None]
    else:
        rows = raw
    return JacobianBlock(rows=rows, row_indices=idx, normalized=bool(normalize), row_norms=norms)


def sample_tangent_directions(x, n_samples, seed=None):
    """Unit vectors drawn uniformly from the sphere orthogonal to ``x``.

    A standard Gaussian draw with its ``x`` component removed is isotropic in
    the orthogonal complement, so normalizing it gives the uniform law.
    Returns an array of shape ``(n_samples, D)``.
    """
    x = as_vector(x, name="x")
    nx = np.linalg.norm(x)
    if nx == 0.0:
        raise ContractError("radial direction is zero")
    if x.shape[0] < 2:
        raise ContractError("tangential subspace is empty for D = 1")
    rng = check_rng(seed)
    xhat = x / nx
    g = rng.standard_normal((int(n_samples), x.shape[0]))
    g -= np.outer(g @ xhat, xhat)
    norms = np.linalg.norm(g, axis=1)
    # a draw landing exactly on the x axis has probability zero; redraw anyway
    while np.any(norms == 0.0):
        bad = norms == 0.0
        g[bad] = rng.standard_normal((int(bad.sum()), x.shape[0]))
        g[bad] -= np.outer(g[bad] @ xhat, xhat)
        norms = np.linalg.norm(g, axis=1)
    return g / norms[:, None]


def radial_tangential_step(z, W, k, delta_d, r_scale=1.0, tangent_seed=None, *, squared=False):
    """Perturbation changing the distance to prototype ``k`` by ``delta_d``.

    The step is split into a radial part along ``x = z - w_k`` that meets the
    first-order constraint ``x . dz = (d'^2 - d^2) / 2`` and a tangential part
    orthogonal to ``x`` whose length brings the total norm to
    ``r_scale * ||dz_parallel||``. The tangential direction is drawn
    uniformly with ``tangent_seed``.

    ``delta_d`` is the increment of the distance ``||z - w_k||``; pass
    ``squared=True`` to give the increment of the squared distance instead.
    """
    weights = as_weights(W)
    z = as_vector(z, weights.shape[1])
    k = int(as_index_set(k, weights.shape[0], name="k")[0])
    if r_scale < 1.0:
        raise ContractError(f"r_scale must be >= 1, got {r_scale}")
    x = z - weights[k]
    d2 = float(x @ x)
    if d2 == 0.0:
        raise ContractError(f"input coincides with prototype {k}; radial direction undefined")

    if squared:
        delta_sq = float(delta_d)
    else:
        d = np.sqrt(d2)
        delta_sq = (d + delta_d) ** 2 - d2
    c = 0.5 * delta_sq
    dz_par = (c / d2) * x
    par_norm = np.linalg.norm(dz_par)
    if r_scale == 1.0 or par_norm == 0.0:
        return dz_par
    if z.shape[0] == 1:
        raise ContractError("no tangential subspace in D = 1; r_scale must be 1")

    perp_norm = np.sqrt((r_scale * par_norm) ** 2 - par_norm**2)
    u = sample_tangent_directions(x, 1, tangent_seed)[0]
    return dz_par + perp_norm * u


def tangential_max_bound(n_prototypes, dim, delta):
    """High-probability bound on ``max_j |v_j . u|`` for unit ``v_j`` and
    ``u`` uniform on the tangential sphere, valid with probability ``1 - delta``.
    """
    if dim <= 2:
        raise ContractError("bound needs D > 2")
    return float(np.sqrt(2.0 * np.log(2.0 * n_prototypes / delta) / (dim - 2)))
