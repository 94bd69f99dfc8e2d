"""NSGA-II building blocks on the unit hypercube.

Selection uses (front rank, crowding distance); variation is simulated
binary crossover followed by polynomial mutation, both bounded to [0, 1].
"""

from __future__ import annotations

import numpy as np

ETA_C = 15.0
CROSSOVER_RATE = 0.9
ETA_M = 20.0


def fast_non_dominated_sort(objectives) -> list[np.ndarray]:
    """Split rows of ``objectives`` into fronts; front 0 is nondominated."""
    f = np.asarray(objectives, dtype=float)
    k = len(f)
    if k == 0:
        return []
    le = np.all(f[:, None, :] <= f[None, :, :], axis=2)
    lt = np.any(f[:, None, :] < f[None, :, :], axis=2)
    dom = le & lt  # dom[i, j]: i dominates j
    counts = dom.sum(axis=0)
    fronts = []
    current = np.flatnonzero(counts == 0)
    while current.size:
        fronts.append(current)
        counts = counts - dom[current].sum(axis=0)
        counts[current] = -1
        current = np.flatnonzero(counts == 0)
    return fronts


def front_ranks(objectives) -> np.ndarray:
    ranks = np.empty(len(objectives), dtype=int)
    for r, front in enumerate(fast_non_dominated_sort(objectives)):
        ranks[front] = r
    return ranks


def crowding_distance(objectives) -> np.ndarray:
    """Crowding distance within one front; boundary individuals get +inf."""
    f = np.asarray(objectives, dtype=float)
    k, m = f.shape
    dist = np.zeros(k)
    if k <= 2:
        dist[:] = np.inf
        return dist
    for j in range(m):
        order = np.argsort(f[:, j], kind="stable")
        span = f[order[-1], j] - f[order[0], j]
        dist[order[0]] = dist[order[-1]] = np.inf
        if span <= 0:
            continue
        gaps = (f[order[2:], j] - f[order[:-2], j]) / span
        dist[order[1:-1]] += gaps
    return dist


def rank_and_crowding(objectives) -> tuple[np.ndarray, np.ndarray]:
    f = np.asarray(objectives, dtype=float)
    ranks = np.empty(len(f), dtype=int)
    crowd = np.empty(len(f))
    for r, front in enumerate(fast_non_dominated_sort(f)):
        ranks[front] = r
        crowd[front] = crowding_distance(f[front])
    return ranks, crowd


def survival_select(objectives, size: int) -> np.ndarray:
    """Indices of the ``size`` best rows by rank, then crowding (ties: lowest index)."""
    f = np.asarray(objectives, dtype=float)
    chosen: list[int] = []
    for front in fast_non_dominated_sort(f):
        if len(chosen) + len(front) <= size:
            chosen.extend(front.tolist())
            continue
        crowd = crowding_distance(f[front])
        order = sorted(range(len(front)), key=lambda i: (-crowd[i], front[i]))
        chosen.extend(int(front[i]) for i in order[: size - len(chosen)])
        break
    return np.asarray(chosen, dtype=int)


def binary_tournament(ranks: np.ndarray, crowd: np.ndarray, rng: np.random.Generator, count: int) -> np.ndarray:
    p = len(ranks)
    a = rng.integers(0, p, count)
    b = rng.integers(0, p, count)
    a_wins = (ranks[a] < ranks[b]) | ((ranks[a] == ranks[b]) & (crowd[a] > crowd[b])) \
        | ((ranks[a] == ranks[b]) & (crowd[a] == crowd[b]) & (a <= b))
    return np.where(a_wins, a, b)


def sbx_crossover(x1: np.ndarray, x2: np.ndarray, rng: np.random.Generator, eta: float = ETA_C,
                  lo: float = 0.0, hi: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Bounded simulated binary crossover applied per variable with probability 0.5."""
    c1, c2 = x1.copy(), x2.copy()
    for i in range(len(x1)):
        if rng.random() > 0.5 or abs(x1[i] - x2[i]) <= 1e-14:
            continue
        y1, y2 = min(x1[i], x2[i]), max(x1[i], x2[i])
        u = rng.random()

        def spread(beta: float) -> float:
            alpha = 2.0 - beta ** -(eta + 1.0)
            if u <= 1.0 / alpha:
                return (u * alpha) ** (1.0 / (eta + 1.0))
            return (1.0 / (2.0 - u * alpha)) ** (1.0 / (eta + 1.0))

        bq = spread(1.0 + 2.0 * (y1 - lo) / (y2 - y1))
        a = 0.5 * (y1 + y2 - bq * (y2 - y1))
        bq = spread(1.0 + 2.0 * (hi - y2) / (y2 - y1))
        b = 0.5 * (y1 + y2 + bq * (y2 - y1))
        a, b = min(max(a, lo), hi), min(max(b, lo), hi)
        if rng.random() <= 0.5:
            a, b = b, a
        c1[i], c2[i] = a, b
    return c1, c2


def polynomial_mutation(x: np.ndarray, rng: np.random.Generator, eta: float = ETA_M,
                        rate: float | None = None, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    rate = 1.0 / len(x) if rate is None else rate
    y = x.copy()
    power = 1.0 / (eta + 1.0)
    for i in range(len(x)):
        if rng.random() > rate:
            continue
        d1 = (y[i] - lo) / (hi - lo)
        d2 = (hi - y[i]) / (hi - lo)
        u = rng.random()
        if u < 0.5:
            val = 2.0 * u + (1.0 - 2.0 * u) * (1.0 - d1) ** (eta + 1.0)
            dq = val**power - 1.0
        else:
            val = 2.0 * (1.0 - u) + 2.0 * (u - 0.5) * (1.0 - d2) ** (eta + 1.0)
            dq = 1.0 - val**power
        y[i] = min(max(y[i] + dq * (hi - lo), lo), hi)
    return y


def mogo_step(designs, objectives, rng: np.random.Generator) -> np.ndarray:
    """One generation of offspring from an evaluated population.

    ``designs`` is (p, n) in the unit cube, ``objectives`` (p, m).  Returns
    p offspring designs.
    """
    x = np.asarray(designs, dtype=float)
    p = len(x)
    if p < 4 or p % 2:
        raise ValueError(f"population size must be even and >= 4, got {p}")
    ranks, crowd = rank_and_crowding(objectives)
    parents = binary_tournament(ranks, crowd, rng, p)
    children = []
    for a, b in zip(parents[0::2], parents[1::2]):
        c1, c2 = x[a].copy(), x[b].copy()
        if rng.random() <= CROSSOVER_RATE:
            c1, c2 = sbx_crossover(c1, c2, rng)
        children.append(polynomial_mutation(c1, rng))
        children.append(polynomial_mutation(c2, rng))
    return np.vstack(children)


def run_nsga2(evaluate, dim: int, population: int, generations: int, seed: int = 0, on_generation=None):
    """Plain generational NSGA-II loop; returns the final (designs, objectives).

    ``on_generation(gen, designs, objectives)`` is called for the initial
    population (gen 0) and after every survival step.
    """
    rng = np.random.default_rng(seed)
    x = rng.random((population, dim))
    f = np.array([evaluate(row) for row in x])
    if on_generation:
        on_generation(0, x, f)
    for gen in range(1, generations + 1):
        kids = mogo_step(x, f, rng)
        fk = np.array([evaluate(row) for row in kids])
        xa, fa = np.vstack([x, kids]), np.vstack([f, fk])
        keep = survival_select(fa, population)
        x, f = xa[keep], fa[keep]
        if on_generation:
            on_generation(gen, x, f)
    return x, f
