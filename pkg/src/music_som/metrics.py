"""Continuity and topology-aware statistics of a recorded trajectory.

Exactly-zero steps (e.g. a step at the target) carry no direction. They are
dropped from the cosine-based metrics and only count as dwell time.
Quantiles use linear interpolation; IQR is ``Q3 - Q1``.
"""

import math
from dataclasses import asdict, dataclass, field

import numpy as np

__all__ = [
    "TrajectoryMetrics",
    "step_continuity",
    "global_continuity",
    "transition_rate",
    "dwell_stats",
    "curvature",
    "geodesic_efficiency",
    "segmented_continuity",
    "compute_metrics",
    "aggregate_metrics",
    "SUMMARY_KEYS",
]


def _parts(traj):
    """(states, bmus) from a Trajectory or a ``(states, bmus)`` pair."""
    if isinstance(traj, tuple):
        states, bmus = traj
    else:
        states, bmus = traj.states, traj.bmu_per_state
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    bmus = np.asarray(bmus)
    if bmus.shape[0] != states.shape[0]:
        raise ValueError("one BMU per state required")
    return states, bmus


def _quantile_stats(values):
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return math.nan, math.nan
    q1, med, q3 = np.quantile(v, [0.25, 0.5, 0.75])
    return float(med), float(q3 - q1)


def _nonzero_steps(states):
    deltas = np.diff(states, axis=0)
    norms = np.linalg.norm(deltas, axis=1)
    return deltas, norms, np.flatnonzero(norms > 0)


def _cosine(u, v):
    c = float(u @ v / (np.linalg.norm(u) * np.linalg.norm(v)))
    return min(1.0, max(-1.0, c))


def _pairs(states):
    """Consecutive nonzero steps ``(i, j)`` with their cosine."""
    deltas, norms, keep = _nonzero_steps(states)
    out = []
    for i, j in zip(keep[:-1], keep[1:]):
        out.append((int(i), int(j), _cosine(deltas[i], deltas[j])))
    return out, deltas, norms


def step_continuity(traj):
    """Cosines between consecutive nonzero steps (empty if fewer than two)."""
    states, _ = _parts(traj)
    pairs, _, _ = _pairs(states)
    return np.array([c for _, _, c in pairs])


def global_continuity(traj):
    """Cosine of each nonzero step with the first step; empty if the first step is zero."""
    states, _ = _parts(traj)
    deltas, norms, keep = _nonzero_steps(states)
    if deltas.shape[0] == 0 or norms[0] == 0:
        return np.array([])
    return np.array([_cosine(deltas[t], deltas[0]) for t in keep])


def transition_rate(traj):
    """Fraction of steps whose end state has a different BMU from its start."""
    _, bmus = _parts(traj)
    T = bmus.shape[0] - 1
    if T <= 0:
        return 0.0
    return float(np.count_nonzero(bmus[1:] != bmus[:-1]) / T)


def _runs(bmus):
    change = np.flatnonzero(bmus[1:] != bmus[:-1]) + 1
    starts = np.concatenate([[0], change])
    ends = np.concatenate([change, [bmus.shape[0]]])
    return starts, ends


def dwell_stats(traj):
    """Lengths of maximal constant-BMU runs of states, their median and IQR."""
    _, bmus = _parts(traj)
    starts, ends = _runs(bmus)
    lengths = (ends - starts).astype(int)
    med, iqr = _quantile_stats(lengths)
    return lengths, med, iqr


def _curvatures(states, bmus):
    pairs, _, norms = _pairs(states)
    within, trans = [], []
    for i, _, c in pairs:
        kappa = math.acos(c) / norms[i]
        # the turn happens at state i + 1, reached by step i
        (trans if bmus[i + 1] != bmus[i] else within).append(kappa)
    return np.array(within), np.array(trans)


def curvature(traj):
    """Median turning angle per unit step length, within cells and at transitions.

    Either median is NaN when no such turn exists.
    """
    states, bmus = _parts(traj)
    within, trans = _curvatures(states, bmus)
    return (
        float(np.median(within)) if within.size else math.nan,
        float(np.median(trans)) if trans.size else math.nan,
    )


def geodesic_efficiency(traj):
    """Net displacement over path length; NaN for a path of zero length."""
    states, _ = _parts(traj)
    path = float(np.linalg.norm(np.diff(states, axis=0), axis=1).sum())
    if path == 0.0:
        return math.nan
    return min(1.0, float(np.linalg.norm(states[-1] - states[0])) / path)


def segmented_continuity(traj):
    """Mean step continuity inside each dwell segment holding two or more steps.

    A cosine belongs to a segment when both of its steps start and end in it.
    Returns ``(means, median, IQR)``.
    """
    states, bmus = _parts(traj)
    starts, ends = _runs(bmus)
    seg_of_state = np.repeat(np.arange(starts.size), ends - starts)
    pairs, _, _ = _pairs(states)
    sums = {}
    for i, j, c in pairs:
        k = seg_of_state[i]
        if seg_of_state[j + 1] == k:
            sums.setdefault(k, []).append(c)
    means = np.array([np.mean(sums[k]) for k in sorted(sums)])
    med, iqr = _quantile_stats(means)
    return means, med, iqr


@dataclass
class TrajectoryMetrics:
    step_continuity: np.ndarray
    global_continuity: np.ndarray
    transition_rate: float
    dwell_lengths: np.ndarray
    dwell_median: float
    dwell_iqr: float
    curvature_within: float
    curvature_trans: float
    curvature_median: float
    geodesic_efficiency: float
    segmented_means: np.ndarray
    segmented_median: float
    segmented_iqr: float
    flags: list = field(default_factory=list)

    @property
    def continuity_median(self):
        return float(np.median(self.step_continuity)) if self.step_continuity.size else math.nan

    def summary(self):
        """Per-trajectory scalars used by the aggregate reports."""
        return {
            "transition_rate": self.transition_rate,
            "dwell_median": self.dwell_median,
            "dwell_iqr": self.dwell_iqr,
            "step_continuity": self.continuity_median,
            "curvature": self.curvature_median,
            "curvature_within": self.curvature_within,
            "curvature_trans": self.curvature_trans,
            "geodesic_efficiency": self.geodesic_efficiency,
            "segmented_continuity": self.segmented_median,
            "segmented_continuity_iqr": self.segmented_iqr,
        }

    def to_dict(self):
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, np.ndarray):
                d[k] = v.tolist()
        d["summary"] = self.summary()
        return d


SUMMARY_KEYS = (
    "transition_rate",
    "dwell_median",
    "dwell_iqr",
    "step_continuity",
    "curvature",
    "curvature_within",
    "curvature_trans",
    "geodesic_efficiency",
    "segmented_continuity",
    "segmented_continuity_iqr",
)


def compute_metrics(traj):
    states, bmus = _parts(traj)
    pair = (states, bmus)
    flags = []
    sc = step_continuity(pair)
    if sc.size == 0:
        flags.append("step_continuity_empty")
    gc = global_continuity(pair)
    if gc.size == 0:
        flags.append("global_continuity_undefined")
    lengths, dmed, diqr = dwell_stats(pair)
    within, trans = _curvatures(states, bmus)
    if trans.size == 0:
        flags.append("no_transition_turns")
    all_k = np.concatenate([within, trans])
    eg = geodesic_efficiency(pair)
    if math.isnan(eg):
        flags.append("zero_path_length")
    means, smed, siqr = segmented_continuity(pair)
    if means.size == 0:
        flags.append("no_segment_with_two_steps")
    return TrajectoryMetrics(
        step_continuity=sc,
        global_continuity=gc,
        transition_rate=transition_rate(pair),
        dwell_lengths=lengths,
        dwell_median=dmed,
        dwell_iqr=diqr,
        curvature_within=float(np.median(within)) if within.size else math.nan,
        curvature_trans=float(np.median(trans)) if trans.size else math.nan,
        curvature_median=float(np.median(all_k)) if all_k.size else math.nan,
        geodesic_efficiency=eg,
        segmented_means=means,
        segmented_median=smed,
        segmented_iqr=siqr,
        flags=flags,
    )


def aggregate_metrics(metrics):
    """Median and IQR of each per-trajectory scalar across trajectories.

    NaN entries (undefined for that trajectory) are skipped.
    """
    rows = [m.summary() if isinstance(m, TrajectoryMetrics) else m for m in metrics]
    out = {}
    for key in SUMMARY_KEYS:
        vals = np.array([r[key] for r in rows], dtype=np.float64)
        vals = np.sort(vals[~np.isnan(vals)])
        med, iqr = _quantile_stats(vals)
        out[key] = {"median": med, "iqr": iqr, "n": int(vals.size)}
    return out
