"""Chebyshev scalarization and expected-improvement acquisition."""

from __future__ import annotations

import numpy as np
from scipy.special import ndtr

from optifab.optimizer.gp import GP

SIGMA_EPS = 1e-12
N_PROBES = 1024
N_LOCAL = 8
STEP_SIZES = (0.1, 0.05, 0.02, 0.01, 0.005, 0.002)
MAX_MOVES_PER_STEP = 25
# moves must raise EI by this relative margin; smaller gains are kernel-tail noise
MIN_RELATIVE_GAIN = 1e-3
ANCHOR_SPREAD = 0.1


def scalarize(objectives, weights, rho: float = 0.05) -> np.ndarray | float:
    """Augmented Chebyshev scalarization ``max_j(w_j f_j) + rho * sum_j(w_j f_j)``.

    Accepts a single objective vector or a 2-D array of them (one per row).
    """
    f = np.asarray(objectives, dtype=float)
    w = np.asarray(weights, dtype=float)
    wf = f * w
    out = wf.max(axis=-1) + rho * wf.sum(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def sample_simplex(m: int, rng: np.random.Generator) -> np.ndarray:
    return rng.dirichlet(np.ones(m))


def expected_improvement(mean, variance, best: float) -> np.ndarray:
    """Closed-form EI for minimization; zero-sigma points get ``max(best - mean, 0)``."""
    scalar = np.ndim(mean) == 0 and np.ndim(variance) == 0
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    sigma = np.sqrt(np.maximum(np.atleast_1d(np.asarray(variance, dtype=float)), 0.0))
    mean, sigma = np.broadcast_arrays(mean, sigma)
    improvement = best - mean
    ei = np.maximum(improvement, 0.0)
    live = sigma >= SIGMA_EPS
    if np.any(live):
        z = improvement[live] / sigma[live]
        pdf = np.exp(-0.5 * z * z) / np.sqrt(2.0 * np.pi)
        ei_live = improvement[live] * ndtr(z) + sigma[live] * pdf
        ei = ei.astype(float, copy=True)
        ei[live] = np.maximum(ei_live, 0.0)
    return float(ei[0]) if scalar else ei


def acquire(gp: GP, best: float, candidates) -> tuple[int, float]:
    """Index and EI value of the best candidate; ties go to the lowest index."""
    cand = np.atleast_2d(np.asarray(candidates, dtype=float))
    mean, var = gp.predict(cand)
    ei = expected_improvement(mean, var, best)
    idx = int(np.argmax(ei))
    return idx, float(ei[idx])


def ei_at(gp: GP, best: float, points) -> np.ndarray:
    mean, var = gp.predict(np.atleast_2d(points))
    return expected_improvement(mean, var, best)


def _compass_search(gp: GP, best: float, x: np.ndarray, value: float) -> tuple[np.ndarray, float]:
    dim = len(x)
    eye = np.eye(dim)
    for step in STEP_SIZES:
        for _ in range(MAX_MOVES_PER_STEP):
            neighbours = np.clip(np.vstack([x + step * eye, x - step * eye]), 0.0, 1.0)
            values = ei_at(gp, best, neighbours)
            j = int(np.argmax(values))
            if values[j] <= value * (1.0 + MIN_RELATIVE_GAIN):
                break
            x, value = neighbours[j], float(values[j])
    return x, value


def maximize_ei(gp: GP, best: float, dim: int, rng: np.random.Generator,
                n_probes: int = N_PROBES, n_local: int = N_LOCAL,
                anchor: np.ndarray | None = None) -> tuple[np.ndarray, float]:
    """Random probing of the unit cube followed by coordinate-wise refinement.

    Refinement only accepts moves that raise EI by a relative margin, so
    the result is never worse than the best probe and coordinates the
    surrogate is insensitive to stay where the probe put them.

    Args:
        anchor: Optional incumbent in unit coordinates. When given, half of
            the probes are Gaussian perturbations of it rather than uniform.
    """
    probes = rng.random((n_probes, dim))
    if anchor is not None:
        half = n_probes // 2
        probes[half:] = np.clip(anchor + ANCHOR_SPREAD * rng.standard_normal((n_probes - half, dim)), 0.0, 1.0)
    values = ei_at(gp, best, probes)
    order = np.argsort(-values, kind="stable")[:n_local]
    best_x, best_v = probes[order[0]], float(values[order[0]])
    for i in order:
        x, v = _compass_search(gp, best, probes[i], float(values[i]))
        if v > best_v:
            best_x, best_v = x, v
    return best_x, best_v
