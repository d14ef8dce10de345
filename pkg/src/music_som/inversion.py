"""Exact recovery of an input from its squared-distance activations.

Subtracting the activation of an anchor unit ``r`` from every other
activation cancels ``||z||^2`` and leaves the affine system ``B z = c`` with
rows ``2 (w_r - w_j)`` and entries ``a_j - a_r + ||w_r||^2 - ||w_j||^2``.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from ._validation import ContractError, as_index_set, as_weights

__all__ = [
    "AnchoredSystem",
    "InversionDiagnostics",
    "RANK_RTOL",
    "build_anchored_system",
    "solve_inversion",
    "solve_inversion_weighted",
    "noise_diagnostics",
    "expected_mse",
    "invert",
]

#: singular values below this fraction of the largest count as zero
RANK_RTOL = 1e-12


@dataclass(frozen=True)
class AnchoredSystem:
    """``B z = c`` built against anchor unit ``anchor``.

    ``offset`` is the point subtracted from every prototype before building
    the system (zero unless centering was requested); solutions are shifted
    back by it.
    """

    B: np.ndarray
    c: np.ndarray
    anchor: int
    used_units: np.ndarray
    offset: np.ndarray

    @property
    def dim(self):
        return self.B.shape[1]

    @property
    def n_rows(self):
        return self.B.shape[0]


@dataclass(frozen=True)
class InversionDiagnostics:
    rank: int
    sigma_min: float
    sigma_max: float
    trace_inv: float | None = None
    lipschitz_bound: float | None = None

    @property
    def rank_deficient(self):
        return self.trace_inv is None

    @property
    def condition_number(self):
        return np.inf if self.sigma_min == 0 else self.sigma_max / self.sigma_min


def build_anchored_system(W, a, anchor, subset=None, center=False):
    """Assemble ``B`` and ``c`` from activations ``a`` of the units in ``subset``.

    ``subset`` defaults to every unit and must contain ``anchor``; rows follow
    the order of ``subset`` with the anchor skipped. With ``center=True`` the
    prototypes are shifted by their mean first, which can help conditioning
    and leaves the recovered point unchanged.
    """
    weights = as_weights(W)
    n = weights.shape[0]
    a = np.asarray(a, dtype=np.float64)
    if a.shape != (n,):
        raise ContractError(f"activation vector must have {n} entries, got {a.shape}")
    used = np.arange(n) if subset is None else as_index_set(subset, n)
    anchor = int(anchor) % n
    if anchor not in used:
        raise ContractError(f"anchor {anchor} is not in the subset")
    if used.size < 2:
        raise ContractError("need at least two units")

    offset = weights[used].mean(axis=0) if center else np.zeros(weights.shape[1])
    w = weights - offset
    others = used[used != anchor]
    wr = w[anchor]
    sq = np.einsum("ij,ij->i", w, w)
    B = 2.0 * (wr[None, :] - w[others])
    c = a[others] - a[anchor] + sq[anchor] - sq[others]
    return AnchoredSystem(B=B, c=c, anchor=anchor, used_units=used, offset=offset)


def _singular_values(B):
    if B.size == 0:
        return np.zeros(0)
    return np.linalg.svd(B, compute_uv=False)


def _diagnostics(B, s, sigma=None):
    D = B.shape[1]
    smax = float(s[0]) if s.size else 0.0
    rank = int(np.sum(s > RANK_RTOL * smax)) if smax > 0 else 0
    smin = float(s[D - 1]) if s.size >= D else 0.0
    trace_inv = float(np.sum(1.0 / s[:D] ** 2)) if rank == D else None
    lip = None
    if sigma is not None:
        if sigma == 0:
            lip = 0.0
        else:
            lip = np.inf if smin == 0 else float(sigma * np.sqrt(B.shape[0]) / smin)
    return InversionDiagnostics(rank, smin, smax, trace_inv, lip)


def solve_inversion(system):
    """Least-squares solution of ``B z = c`` and conditioning diagnostics.

    Full-rank, reasonably conditioned systems go through a QR factorization.
    Otherwise the minimum-norm solution is returned and the rank deficiency
    shows up in the diagnostics.
    """
    B, c = system.B, system.c
    D = B.shape[1]
    s = _singular_values(B)
    diag = _diagnostics(B, s)
    if diag.rank == D and B.shape[0] >= D and diag.sigma_min >= RANK_RTOL * diag.sigma_max:
        q, r = np.linalg.qr(B, mode="reduced")
        z = scipy.linalg.solve_triangular(r, q.T @ c)
    else:
        z = np.linalg.lstsq(B, c, rcond=RANK_RTOL)[0] if B.size else np.zeros(D)
    return z + system.offset, diag


def solve_inversion_weighted(system, Sigma):
    """Generalized least squares with activation-noise covariance ``Sigma``.

    Minimizes ``(Bz - c)^T Sigma^{-1} (Bz - c)`` by whitening both sides with
    the Cholesky factor of ``Sigma``.
    """
    Sigma = np.asarray(Sigma, dtype=np.float64)
    k = system.n_rows
    if Sigma.shape != (k, k):
        raise ContractError(f"Sigma must be {k}x{k}, got {Sigma.shape}")
    if not np.allclose(Sigma, Sigma.T, rtol=1e-12, atol=0.0):
        raise ContractError("Sigma must be symmetric")
    try:
        L = np.linalg.cholesky(Sigma)
    except np.linalg.LinAlgError as exc:
        raise ContractError("Sigma must be positive definite") from exc
    Bw = scipy.linalg.solve_triangular(L, system.B, lower=True)
    cw = scipy.linalg.solve_triangular(L, system.c, lower=True)
    whitened = AnchoredSystem(Bw, cw, system.anchor, system.used_units, system.offset)
    return solve_inversion(whitened)[0]


def noise_diagnostics(system, sigma):
    """Conditioning of ``B`` plus the worst-case error bound for noise level ``sigma``.

    The bound is ``sigma * sqrt(K - 1) / sigma_min(B)``, i.e. ``||B^+||`` times
    the typical norm of an i.i.d. perturbation of ``c``.
    """
    if sigma < 0:
        raise ContractError("sigma must be >= 0")
    return _diagnostics(system.B, _singular_values(system.B), sigma)


def expected_mse(system, sigma, noise="rhs"):
    """Expected ``||z_hat - z||^2`` of the least-squares inverse under noise.

    ``noise="rhs"`` perturbs ``c`` with i.i.d. ``N(0, sigma^2)`` entries, which
    gives ``sigma^2 tr((B^T B)^{-1})``. ``noise="activations"`` perturbs the
    activations instead; the anchor's noise then enters every row of ``c``
    and the covariance of ``c`` becomes ``sigma^2 (I + 1 1^T)``.
    """
    B = system.B
    if noise == "rhs":
        diag = noise_diagnostics(system, sigma)
        if diag.trace_inv is None:
            return np.inf
        return sigma**2 * diag.trace_inv
    if noise == "activations":
        pinv = np.linalg.pinv(B, rcond=RANK_RTOL)
        cov = np.eye(B.shape[0]) + 1.0
        return float(sigma**2 * np.trace(pinv @ cov @ pinv.T))
    raise ContractError(f"unknown noise model {noise!r}")


def invert(W, a, anchor=None, subset=None, center=False):
    """Convenience wrapper: build the system and solve it.

    ``anchor`` defaults to the unit with the smallest activation in ``subset``.
    """
    a = np.asarray(a, dtype=np.float64)
    if anchor is None:
        pool = np.arange(a.shape[0]) if subset is None else np.asarray(subset)
        anchor = int(pool[np.argmin(a[pool])])
    system = build_anchored_system(W, a, anchor, subset=subset, center=center)
    return solve_inversion(system)
