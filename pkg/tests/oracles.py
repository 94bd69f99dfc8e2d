"""Independent reference implementations used only by the tests.

Each oracle takes a different route from the production code: inclusion and
exclusion instead of a dimension sweep, pairwise loops instead of the
vectorized filters, an explicit kernel-matrix solve instead of Cholesky
factors.
"""

from __future__ import annotations

import itertools

import numpy as np


def hv_inclusion_exclusion(front, ref) -> float:
    """Union volume of boxes [f, ref] by summing signed intersections over all subsets.

    Subsets are enumerated by doubling; a subset whose intersection is empty
    is dropped together with all of its supersets.
    """
    ref = np.asarray(ref, dtype=float)
    pts = [np.asarray(p, dtype=float) for p in front if np.all(np.asarray(p) < ref)]
    corners = np.empty((0, len(ref)))
    signs = np.empty(0)
    for p in pts:
        grown = np.maximum(corners, p)
        keep = np.all(grown < ref, axis=1)
        corners = np.vstack([corners, p[None, :], grown[keep]])
        signs = np.concatenate([signs, [1.0], -signs[keep]])
    if len(signs) == 0:
        return 0.0
    return float(np.sum(signs * np.prod(ref - corners, axis=1)))


def hv_staircase_2d(front, ref) -> float:
    """Two-objective hypervolume as a sum of rectangles along the sorted staircase."""
    pts = sorted((float(a), float(b)) for a, b in front if a < ref[0] and b < ref[1])
    total = 0.0
    best_y = ref[1]
    for x, y in pts:
        if y < best_y:
            total += (ref[0] - x) * (best_y - y)
            best_y = y
    return total


def brute_dominates(a, b) -> bool:
    better = False
    for ai, bi in zip(a, b):
        if ai > bi:
            return False
        if ai < bi:
            better = True
    return better


def brute_nondominated(points) -> list[tuple]:
    """Nondominated subset by a double loop; duplicates collapse to the first copy."""
    out = []
    for i, p in enumerate(points):
        if any(brute_dominates(q, p) for j, q in enumerate(points) if j != i):
            continue
        t = tuple(float(v) for v in p)
        if t not in out:
            out.append(t)
    return out


def brute_front_ranks(points) -> list[int]:
    """Front index of every point by repeatedly peeling the nondominated layer."""
    remaining = list(range(len(points)))
    ranks = [-1] * len(points)
    level = 0
    while remaining:
        layer = [i for i in remaining
                 if not any(brute_dominates(points[j], points[i]) for j in remaining if j != i)]
        for i in layer:
            ranks[i] = level
        remaining = [i for i in remaining if i not in layer]
        level += 1
    return ranks


def gp_posterior_dense(x, y, probe, mean, signal_variance, lengthscales, noise_variance):
    """GP posterior at ``probe`` via an explicit inverse of the kernel matrix."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    probe = np.atleast_2d(np.asarray(probe, dtype=float))
    ls = np.asarray(lengthscales, dtype=float)

    def k(a, b):
        out = np.empty((len(a), len(b)))
        for i, j in itertools.product(range(len(a)), range(len(b))):
            d = (a[i] - b[j]) / ls
            out[i, j] = signal_variance * np.exp(-0.5 * float(d @ d))
        return out

    kxx = k(x, x) + noise_variance * np.eye(len(x))
    inv = np.linalg.inv(kxx)
    kpx = k(probe, x)
    mu = mean + kpx @ inv @ (np.asarray(y, dtype=float) - mean)
    var = signal_variance - np.einsum("ij,jk,ik->i", kpx, inv, kpx)
    return mu, var
