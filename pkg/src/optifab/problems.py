"""Benchmark problems evaluated by the task workers.

Two problems are registered by name: ``"dtlz2"`` with configurable (m, n)
and ``"detector-toy"``, a synthetic constrained seven-parameter problem whose
definition (bounds, objective tables, exclusion ellipsoid) lives in
``data/detector_toy.json``.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass
from functools import lru_cache
from importlib import resources

import numpy as np

CONSTRAINT_MODES = ("none", "overlap_check")


@dataclass(frozen=True)
class ProblemSpec:
    name: str
    n: int
    m: int
    constraint_mode: str = "none"
    eval_delay: float = 0.0

    def validate(self) -> None:
        if self.name not in PROBLEMS:
            raise ValueError(f"problem.name: unknown problem {self.name!r}")
        if self.constraint_mode not in CONSTRAINT_MODES:
            raise ValueError(f"problem.constraint_mode: must be one of {CONSTRAINT_MODES}")
        if self.eval_delay < 0:
            raise ValueError("problem.eval_delay: must be >= 0")
        if self.m < 2:
            raise ValueError("problem.m: need at least 2 objectives")
        if self.name == "dtlz2" and self.n < self.m:
            raise ValueError(f"problem.n: DTLZ2 needs n >= m (got n={self.n}, m={self.m})")
        if self.name == "detector-toy":
            d = detector_definition()
            if (self.n, self.m) != (len(d["parameters"]), len(d["objectives"])):
                raise ValueError("problem.n/problem.m: detector-toy is fixed at n=7, m=3")

    def bounds(self) -> np.ndarray:
        if self.name == "detector-toy":
            return detector_bounds()
        return np.tile([0.0, 1.0], (self.n, 1))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ProblemSpec":
        name = d["name"]
        if name == "detector-toy":
            defaults = {"n": 7, "m": 3, "constraint_mode": "overlap_check"}
        else:
            defaults = {}
        merged = {**defaults, **d}
        return cls(
            name=merged["name"],
            n=int(merged["n"]),
            m=int(merged["m"]),
            constraint_mode=merged.get("constraint_mode", "none"),
            eval_delay=float(merged.get("eval_delay", 0.0)),
        )


@dataclass
class EvaluationOutcome:
    status: str  # "valid" | "invalid"
    objectives: list[float] | None
    eval_duration: float


def _check_bounds(x: np.ndarray, bounds: np.ndarray) -> None:
    if x.shape != (len(bounds),):
        raise ValueError(f"design has {x.size} coordinates, expected {len(bounds)}")
    if np.any(x < bounds[:, 0]) or np.any(x > bounds[:, 1]):
        raise ValueError("design coordinates out of bounds")


def dtlz2_eval(x, m: int) -> np.ndarray:
    """DTLZ2 objectives for ``x`` in the unit hypercube.

    The last ``n - m + 1`` variables set the distance g from the front;
    the first ``m - 1`` set the position on the unit sphere.
    """
    x = np.asarray(x, dtype=float).ravel()
    n = x.size
    if n < m or m < 2:
        raise ValueError(f"DTLZ2 needs n >= m >= 2 (got n={n}, m={m})")
    _check_bounds(x, np.tile([0.0, 1.0], (n, 1)))
    g = float(np.sum((x[m - 1:] - 0.5) ** 2))
    theta = x[: m - 1] * (np.pi / 2)
    f = np.empty(m)
    for k in range(m):
        # k = 0 is f_1: all cosines; k > 0 swaps the last factor for a sine
        value = 1.0 + g
        value *= np.prod(np.cos(theta[: m - 1 - k]))
        if k > 0:
            value *= np.sin(theta[m - 1 - k])
        f[k] = value
    return f


@lru_cache(maxsize=1)
def detector_definition() -> dict:
    text = resources.files("optifab").joinpath("data/detector_toy.json").read_text()
    return json.loads(text)


def detector_bounds() -> np.ndarray:
    return np.array([[p["lo"], p["hi"]] for p in detector_definition()["parameters"]])


def detector_normalize(x) -> np.ndarray:
    b = detector_bounds()
    return (np.asarray(x, dtype=float) - b[:, 0]) / (b[:, 1] - b[:, 0])


def detector_denormalize(u) -> np.ndarray:
    b = detector_bounds()
    return b[:, 0] + np.asarray(u, dtype=float) * (b[:, 1] - b[:, 0])


def detector_excluded(u) -> bool:
    """Overlap-check predicate on a normalized design."""
    ex = detector_definition()["exclusion"]
    z = (np.asarray(u) - ex["center"]) / np.asarray(ex["semi_axes"])
    return bool(np.sum(z**2) <= 1.0)


def detector_objectives(u) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    out = []
    for obj in detector_definition()["objectives"]:
        d = u - np.asarray(obj["center"])
        bowl = np.exp(-np.sum(np.asarray(obj["sharpness"]) * d**2))
        amp = obj["ripple_amplitude"]
        ripple = (1.0 + amp * np.cos(2 * np.pi * np.dot(obj["ripple_frequency"], d))) / (1.0 + amp)
        out.append(1.0 - bowl * ripple)
    return np.array(out)


def _passive_wait(started: float, delay: float) -> None:
    remaining = started + delay - time.monotonic()
    while remaining > 0:
        time.sleep(remaining)
        remaining = started + delay - time.monotonic()


def detector_toy_eval(x, spec: ProblemSpec | None = None) -> EvaluationOutcome:
    started = time.monotonic()
    x = np.asarray(x, dtype=float).ravel()
    _check_bounds(x, detector_bounds())
    u = detector_normalize(x)
    delay = spec.eval_delay if spec is not None else 0.0
    check = spec is None or spec.constraint_mode == "overlap_check"
    if check and detector_excluded(u):
        outcome = EvaluationOutcome("invalid", None, 0.0)
    else:
        outcome = EvaluationOutcome("valid", detector_objectives(u).tolist(), 0.0)
    _passive_wait(started, delay)
    outcome.eval_duration = time.monotonic() - started
    return outcome


def evaluate(spec: ProblemSpec, x) -> EvaluationOutcome:
    """Evaluate ``x`` under ``spec``, honouring ``eval_delay`` as a passive wait."""
    if spec.name == "detector-toy":
        return detector_toy_eval(x, spec)
    started = time.monotonic()
    f = PROBLEMS[spec.name](x, spec.m)
    _passive_wait(started, spec.eval_delay)
    return EvaluationOutcome("valid", f.tolist(), time.monotonic() - started)


def true_front_sample(problem: ProblemSpec | str, count: int, seed: int | None = 0,
                      m: int | None = None, stratified: bool | None = None) -> np.ndarray:
    """Sample ``count`` points on the DTLZ2 front (positive orthant of the unit sphere).

    For two objectives the default is stratified: evenly spaced angles that
    include both endpoints.  Otherwise points are normalized absolute
    Gaussian draws.
    """
    if isinstance(problem, ProblemSpec):
        name, m = problem.name, problem.m
    else:
        name = problem
    if name != "dtlz2":
        raise ValueError(f"no known Pareto front for problem {name!r}")
    if m is None:
        raise ValueError("objective count m is required")
    if stratified is None:
        stratified = m == 2
    if stratified:
        if m != 2:
            raise ValueError("stratified sampling is only defined for m=2")
        theta = np.linspace(0.0, np.pi / 2, count)
        pts = np.column_stack([np.cos(theta), np.sin(theta)])
        pts[np.abs(pts) < 1e-15] = 0.0
        return pts
    rng = np.random.default_rng(seed)
    z = np.abs(rng.standard_normal((count, m)))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


PROBLEMS = {
    "dtlz2": dtlz2_eval,
    "detector-toy": detector_toy_eval,
}
