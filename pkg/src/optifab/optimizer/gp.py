"""Squared-exponential ARD Gaussian process with marginal-likelihood fitting.

Inputs are expected in the unit hypercube and targets standardized (zero
mean, unit variance); the surrogate layer in :mod:`optifab.optimizer.core`
takes care of both.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.optimize import minimize

NOISE_FLOOR = 1e-6
LENGTHSCALE_BOUNDS = (1e-2, 1e2)
SIGNAL_BOUNDS = (5e-2, 1e3)
NOISE_BOUNDS = (NOISE_FLOOR, 1.0)
MEAN_BOUNDS = (-3.0, 3.0)
_JITTERS = (0.0, 1e-10, 1e-8, 1e-6, 1e-4)


@dataclass
class GPParams:
    mean: float
    signal_variance: float
    lengthscales: np.ndarray
    noise_variance: float

    def to_dict(self) -> dict:
        return {
            "mean": float(self.mean),
            "signal_variance": float(self.signal_variance),
            "lengthscales": [float(v) for v in self.lengthscales],
            "noise_variance": float(self.noise_variance),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GPParams":
        return cls(d["mean"], d["signal_variance"], np.asarray(d["lengthscales"], dtype=float),
                   d["noise_variance"])

    @classmethod
    def default(cls, dim: int) -> "GPParams":
        return cls(0.0, 1.0, np.full(dim, 0.5 * np.sqrt(dim)), NOISE_FLOOR)


def se_kernel(a: np.ndarray, b: np.ndarray, signal_variance: float, lengthscales) -> np.ndarray:
    a = a / lengthscales
    b = b / lengthscales
    sq = np.sum(a**2, axis=1)[:, None] + np.sum(b**2, axis=1)[None, :] - 2.0 * a @ b.T
    np.maximum(sq, 0.0, out=sq)
    return signal_variance * np.exp(-0.5 * sq)


def _cholesky(k: np.ndarray) -> np.ndarray:
    eye = np.eye(len(k))
    for jitter in _JITTERS:
        try:
            return cholesky(k + jitter * eye, lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            continue
    raise np.linalg.LinAlgError("kernel matrix not positive definite even with jitter")


class GP:
    """Posterior of a fitted GP conditioned on training data."""

    def __init__(self, params: GPParams, x=None, y=None):
        self.params = params
        dim = len(params.lengthscales)
        self.x = np.empty((0, dim)) if x is None else np.asarray(x, dtype=float).reshape(-1, dim)
        self.y = np.empty(0) if y is None else np.asarray(y, dtype=float).ravel()
        if len(self.x):
            k = se_kernel(self.x, self.x, params.signal_variance, params.lengthscales)
            k[np.diag_indices_from(k)] += params.noise_variance
            self._chol = _cholesky(k)
            self._alpha = cho_solve((self._chol, True), self.y - params.mean, check_finite=False)

    def predict(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and latent (noise-free) variance at each row of ``points``."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        p = self.params
        if len(self.x) == 0:
            return np.full(len(pts), p.mean), np.full(len(pts), p.signal_variance)
        ks = se_kernel(pts, self.x, p.signal_variance, p.lengthscales)
        mean = p.mean + ks @ self._alpha
        v = solve_triangular(self._chol, ks.T, lower=True, check_finite=False)
        var = p.signal_variance - np.sum(v**2, axis=0)
        return mean, np.maximum(var, 0.0)


def predict(gp: GP, point) -> tuple[float, float]:
    mean, var = gp.predict(np.atleast_2d(point))
    return float(mean[0]), float(var[0])


def _pack(p: GPParams) -> np.ndarray:
    return np.concatenate([np.log(p.lengthscales), [np.log(p.signal_variance), np.log(p.noise_variance), p.mean]])


def _unpack(theta: np.ndarray, dim: int) -> GPParams:
    return GPParams(float(theta[-1]), float(np.exp(theta[dim])), np.exp(theta[:dim]),
                    float(np.exp(theta[dim + 1])))


def neg_log_marginal_likelihood(theta: np.ndarray, x: np.ndarray, y: np.ndarray):
    """Negative log marginal likelihood and its gradient in packed log space."""
    t, dim = x.shape
    p = _unpack(theta, dim)
    kf = se_kernel(x, x, p.signal_variance, p.lengthscales)
    k = kf.copy()
    k[np.diag_indices_from(k)] += p.noise_variance
    try:
        chol = _cholesky(k)
    except np.linalg.LinAlgError:
        return 1e25, np.zeros_like(theta)
    r = y - p.mean
    alpha = cho_solve((chol, True), r, check_finite=False)
    nll = 0.5 * r @ alpha + np.sum(np.log(np.diag(chol))) + 0.5 * t * np.log(2 * np.pi)

    l_inv = solve_triangular(chol, np.eye(t), lower=True, check_finite=False)
    k_inv = l_inv.T @ l_inv
    w = k_inv - np.outer(alpha, alpha)
    m = w * kf
    # sum_ij m_ij (x_id - x_jd)^2, using symmetry of m
    row = m.sum(axis=1)
    sqdist = 2.0 * (row @ x**2) - 2.0 * np.sum(x * (m @ x), axis=0)
    grad = np.empty_like(theta)
    grad[:dim] = 0.5 * sqdist / p.lengthscales**2
    grad[dim] = 0.5 * m.sum()
    grad[dim + 1] = 0.5 * p.noise_variance * np.trace(w)
    grad[dim + 2] = -alpha.sum()
    return float(nll), grad


def _bounds(dim: int) -> list[tuple[float, float]]:
    ls = tuple(np.log(LENGTHSCALE_BOUNDS))
    return [ls] * dim + [tuple(np.log(SIGNAL_BOUNDS)), tuple(np.log(NOISE_BOUNDS)), MEAN_BOUNDS]


def fit_gp(x, y, restarts: int = 16, rng: np.random.Generator | None = None,
           init: GPParams | None = None, maxiter: int = 200) -> GPParams:
    """Maximize the log marginal likelihood by multi-start L-BFGS-B.

    The first start is ``init`` (or a default guess); the remaining
    ``restarts - 1`` are drawn log-uniformly from a moderate box.  Ties in
    the final objective go to the earliest start.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    dim = x.shape[1]
    if len(y) < 2:
        p = GPParams.default(dim)
        if len(y) == 1:
            p.mean = float(y[0])
        return p
    rng = np.random.default_rng(0) if rng is None else rng
    bounds = _bounds(dim)
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    starts = [_pack(init if init is not None else GPParams.default(dim))]
    for _ in range(max(restarts, 1) - 1):
        theta = np.concatenate([
            rng.uniform(np.log(0.05), np.log(2.0 * np.sqrt(dim)), dim),
            [rng.uniform(np.log(0.3), np.log(3.0)), rng.uniform(np.log(NOISE_FLOOR), np.log(1e-2)),
             rng.uniform(-0.5, 0.5)],
        ])
        starts.append(theta)
    best_theta, best_val = None, np.inf
    for theta0 in starts:
        theta0 = np.clip(theta0, lo, hi)
        res = minimize(neg_log_marginal_likelihood, theta0, args=(x, y), jac=True, method="L-BFGS-B",
                       bounds=bounds, options={"maxiter": maxiter})
        val = float(res.fun)
        if np.isfinite(val) and val < best_val:
            best_theta, best_val = res.x, val
    if best_theta is None:
        return GPParams.default(dim)
    p = _unpack(best_theta, dim)
    p.noise_variance = max(p.noise_variance, NOISE_FLOOR)
    return p
