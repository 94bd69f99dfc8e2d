"""Pareto-set maintenance and the hypervolume indicator (minimization).

The exact path is a recursive dimension sweep and is used for up to four
objectives.  Beyond that the Monte-Carlo estimator takes over; with a fixed
seed it reuses the same sample cloud, so estimates for a growing archive are
non-decreasing just like the exact value.
"""

from __future__ import annotations

import logging

import numpy as np

logger = logging.getLogger(__name__)

EXACT_MAX_OBJECTIVES = 4
DEFAULT_MC_SAMPLES = 200_000


def dominates(a, b) -> bool:
    """True if ``a`` Pareto-dominates ``b`` (no worse everywhere, better somewhere)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return bool(np.all(a <= b) and np.any(a < b))


def _as_points(points) -> np.ndarray:
    if isinstance(points, np.ndarray):
        arr = points.astype(float, copy=False)
    else:
        rows = [np.asarray(p, dtype=float).ravel() for p in points]
        if not rows:
            return np.empty((0, 0))
        lengths = {len(r) for r in rows}
        if len(lengths) > 1:
            raise ValueError(f"mixed objective dimensionalities: {sorted(lengths)}")
        arr = np.vstack(rows)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1) if arr.size else np.empty((0, 0))
    if arr.ndim != 2:
        raise ValueError(f"points must be a 2-D array, got shape {arr.shape}")
    if arr.size and not np.all(np.isfinite(arr)):
        raise ValueError("points must be finite")
    return arr


def nondominated_mask(points) -> np.ndarray:
    """Boolean mask of the nondominated rows; of exact duplicates only the first survives."""
    pts = _as_points(points)
    k = len(pts)
    keep = np.ones(k, dtype=bool)
    for i in range(k):
        if not keep[i]:
            continue
        others = pts[keep]
        le = np.all(others <= pts[i], axis=1)
        lt = np.any(others < pts[i], axis=1)
        if np.any(le & lt):
            keep[i] = False
            continue
        # drop later duplicates of row i
        dup = np.all(pts == pts[i], axis=1)
        dup[: i + 1] = False
        keep[dup] = False
    return keep


def pareto_filter(points) -> np.ndarray:
    """Return the nondominated subset of ``points`` in first-occurrence order."""
    pts = _as_points(points)
    if len(pts) == 0:
        return pts
    return pts[nondominated_mask(pts)]


def _clip_to_reference(front, ref) -> tuple[np.ndarray, np.ndarray]:
    ref = np.asarray(ref, dtype=float).ravel()
    pts = _as_points(front)
    if len(pts) == 0:
        return np.empty((0, len(ref))), ref
    if pts.shape[1] != len(ref):
        raise ValueError(f"reference point has {len(ref)} values, front has {pts.shape[1]} objectives")
    inside = np.all(pts < ref, axis=1)
    return pts[inside], ref


def _sweep(pts: np.ndarray, ref: np.ndarray) -> float:
    k, m = pts.shape
    if k == 0:
        return 0.0
    if m == 1:
        return float(ref[0] - pts[:, 0].min())
    order = np.argsort(pts[:, -1], kind="stable")
    pts = pts[order]
    if m == 2:
        # the slab below each level is 1-D: its measure only needs the running minimum
        uppers = np.append(pts[1:, 1], ref[1])
        heights = np.maximum(uppers - pts[:, 1], 0.0)
        return float(np.sum((ref[0] - np.minimum.accumulate(pts[:, 0])) * heights))
    volume = 0.0
    for i in range(k):
        upper = pts[i + 1, -1] if i + 1 < k else ref[-1]
        height = upper - pts[i, -1]
        if height <= 0.0:
            continue
        slab = pareto_filter(pts[: i + 1, :-1])
        volume += _sweep(slab, ref[:-1]) * height
    return volume


def hypervolume_exact(front, ref) -> float:
    """Exact hypervolume of ``front`` bounded by ``ref``.

    Points that do not strictly dominate ``ref`` are clipped out.  For more
    than four objectives the call is routed to :func:`hypervolume_mc` and a
    note is logged.
    """
    pts, ref = _clip_to_reference(front, ref)
    if len(ref) > EXACT_MAX_OBJECTIVES:
        logger.info("hypervolume: m=%d exceeds the exact path, using Monte-Carlo", len(ref))
        return hypervolume_mc(pts, ref, DEFAULT_MC_SAMPLES, seed=0)[0]
    if len(pts) == 0:
        return 0.0
    return _sweep(pareto_filter(pts), ref)


def hypervolume_mc(front, ref, samples: int = DEFAULT_MC_SAMPLES, seed: int = 0,
                   chunk: int = 50_000, lower=None) -> tuple[float, float]:
    """Monte-Carlo hypervolume estimate and its standard error.

    Samples are uniform in the box spanned by ``lower`` and ``ref``; by
    default ``lower`` is the componentwise minimum of the (clipped) front.
    Passing a fixed ``lower`` freezes the sample set for a given seed, which
    makes the estimate exactly monotone as points are added.  Points are
    raised to ``lower`` first, so a ``lower`` above some coordinates
    underestimates.
    """
    if samples < 1000:
        raise ValueError("hypervolume_mc needs at least 1000 samples")
    pts, ref = _clip_to_reference(front, ref)
    if len(pts) == 0:
        return 0.0, 0.0
    pts = pareto_filter(pts)
    lower = pts.min(axis=0) if lower is None else np.asarray(lower, dtype=float).ravel()
    box = float(np.prod(ref - lower))
    rng = np.random.default_rng(seed)
    hits = 0
    remaining = samples
    while remaining > 0:
        n = min(chunk, remaining)
        u = lower + rng.random((n, len(ref))) * (ref - lower)
        dominated = np.zeros(n, dtype=bool)
        for p in pts:
            dominated |= np.all(u >= p, axis=1)
        hits += int(dominated.sum())
        remaining -= n
    frac = hits / samples
    return box * frac, box * float(np.sqrt(frac * (1.0 - frac) / samples))


def hypervolume(front, ref, samples: int = DEFAULT_MC_SAMPLES, seed: int = 0,
                lower=None) -> tuple[float, float]:
    """Hypervolume with standard error, exact (SE 0) when m <= 4."""
    ref = np.asarray(ref, dtype=float).ravel()
    if len(ref) <= EXACT_MAX_OBJECTIVES:
        return hypervolume_exact(front, ref), 0.0
    return hypervolume_mc(front, ref, samples, seed, lower=lower)


def dtlz2_hypervolume_ceiling(m: int, ref_value: float = 1.1) -> float:
    """Hypervolume of the full DTLZ2 front: the box minus the unit-ball orthant."""
    from math import gamma, pi

    ball = pi ** (m / 2) / gamma(m / 2 + 1)
    return ref_value**m - ball / 2**m
