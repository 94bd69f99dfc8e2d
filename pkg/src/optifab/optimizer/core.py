"""Ask/tell multi-objective optimizer.

Two strategies share one trial book:

* ``mobo``: scrambled Sobol initialization, then per-proposal augmented
  Chebyshev scalarization with a freshly drawn weight, a GP on the
  scalarized targets, and expected-improvement maximization.
* ``mogo``: NSGA-II; generations are produced whenever the offspring queue
  runs dry, from the elitist survivors of everything evaluated so far.

All randomness is derived from ``(rng_seed, trial_id, stream)`` so that the
proposal for a trial depends only on the seed and the tell history, never on
how many random numbers earlier calls consumed.  That is what lets a journal
replay reproduce an uninterrupted run bit for bit.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.stats import qmc

from optifab.optimizer import nsga2
from optifab.optimizer.acquisition import maximize_ei, sample_simplex, scalarize
from optifab.optimizer.gp import GP, GPParams, fit_gp
from optifab.pareto import dominates

logger = logging.getLogger(__name__)

STATUSES = ("pending", "running", "valid", "invalid", "failed")
FINAL_STATUSES = ("valid", "invalid", "failed")

_STREAM_WEIGHT = 1
_STREAM_FIT = 2
_STREAM_ACQ = 3
_STREAM_FALLBACK = 4
_STREAM_GENERATION = 5


class OptimizerError(RuntimeError):
    pass


@dataclass(frozen=True)
class DesignSpace:
    bounds: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.bounds, dtype=float)
        if b.ndim != 2 or b.shape[1] != 2 or len(b) < 1:
            raise ValueError("bounds must be an (n, 2) array with n >= 1")
        if np.any(b[:, 0] >= b[:, 1]):
            raise ValueError("every bound needs lo < hi")
        object.__setattr__(self, "bounds", b)

    @property
    def dimension(self) -> int:
        return len(self.bounds)

    def to_unit(self, x) -> np.ndarray:
        b = self.bounds
        return (np.asarray(x, dtype=float) - b[:, 0]) / (b[:, 1] - b[:, 0])

    def from_unit(self, u) -> np.ndarray:
        b = self.bounds
        x = b[:, 0] + np.asarray(u, dtype=float) * (b[:, 1] - b[:, 0])
        return np.clip(x, b[:, 0], b[:, 1])

    def contains(self, x) -> bool:
        x = np.asarray(x, dtype=float)
        return x.shape == (self.dimension,) and bool(np.all(x >= self.bounds[:, 0]) and np.all(x <= self.bounds[:, 1]))


@dataclass
class OptimizerConfig:
    strategy: str = "mobo"
    batch_size: int = 1
    init_count: int | None = None
    max_trials: int = 50
    rng_seed: int = 0
    scalarization_rho: float = 0.05
    acquisition_restarts: int = 16
    generation_mode: str = "synchronous"
    population_size: int | None = None

    def validate(self, dimension: int) -> None:
        if self.strategy not in ("mobo", "mogo"):
            raise ValueError("optimizer.strategy: must be 'mobo' or 'mogo'")
        if self.generation_mode not in ("synchronous", "asynchronous"):
            raise ValueError("optimizer.generation_mode: must be 'synchronous' or 'asynchronous'")
        if self.batch_size < 1:
            raise ValueError("optimizer.batch_size: must be >= 1")
        if self.max_trials < 1:
            raise ValueError("optimizer.max_trials: must be >= 1")
        if self.resolved_init_count(dimension) < 1:
            raise ValueError("optimizer.init_count: must be >= 1")
        if self.resolved_init_count(dimension) > self.max_trials:
            raise ValueError("optimizer.init_count: must not exceed max_trials")
        if self.acquisition_restarts < 1:
            raise ValueError("optimizer.acquisition_restarts: must be >= 1")
        if not 0 <= self.rng_seed < 2**64:
            raise ValueError("optimizer.rng_seed: must be a 64-bit unsigned integer")
        if self.strategy == "mogo":
            p = self.resolved_population_size()
            if p < 4 or p % 2:
                raise ValueError("optimizer.population_size: must be even and >= 4")

    def resolved_init_count(self, dimension: int) -> int:
        return min(2 * dimension, 32) if self.init_count is None else self.init_count

    def resolved_population_size(self) -> int:
        if self.population_size is not None:
            return self.population_size
        return max(4, self.batch_size + self.batch_size % 2)


@dataclass
class TrialRecord:
    trial_id: int
    design: np.ndarray
    status: str = "pending"
    objectives: list[float] | None = None
    attempt_count: int = 0
    timing: dict = field(default_factory=dict)


def refit_interval(tell_count: int) -> int:
    return 1 if tell_count < 50 else 5


class Optimizer:
    """Single logical actor; every public mutation takes the same lock."""

    def __init__(self, space: DesignSpace, n_objectives: int, config: OptimizerConfig,
                 listener: Callable[[str, dict], None] | None = None):
        config.validate(space.dimension)
        if n_objectives < 1:
            raise ValueError("need at least one objective")
        self.space = space
        self.m = n_objectives
        self.config = config
        self.listener = listener
        self.trials: list[TrialRecord] = []
        self.archive: list[tuple[int, list[float]]] = []
        self.tell_count = 0
        self.gp_params: GPParams | None = None
        self.last_fit_tells: int | None = None
        self.norm_min: np.ndarray | None = None
        self.norm_max: np.ndarray | None = None
        self.last_proposal: dict | None = None
        self._lock = threading.RLock()
        self._init_count = config.resolved_init_count(space.dimension)
        self._sobol = self._sobol_points(self._initial_count())
        self._offspring: list[np.ndarray] = []
        self._generation = 0

    # ------------------------------------------------------------------ helpers
    def _rng(self, trial_id: int, stream: int) -> np.random.Generator:
        return np.random.default_rng([self.config.rng_seed, trial_id, stream])

    def _initial_count(self) -> int:
        if self.config.strategy == "mogo":
            return self.config.resolved_population_size()
        return self._init_count

    def _sobol_points(self, count: int) -> np.ndarray:
        sampler = qmc.Sobol(d=self.space.dimension, scramble=True, seed=self.config.rng_seed)
        power = max(int(np.ceil(np.log2(max(count, 1)))), 0)
        return sampler.random_base2(power)[:count]

    def _emit(self, kind: str, payload: dict) -> None:
        if self.listener is not None:
            self.listener(kind, payload)

    def _valid(self) -> list[TrialRecord]:
        return [t for t in self.trials if t.status == "valid"]

    def training_data(self) -> tuple[np.ndarray, np.ndarray]:
        """Unit-cube inputs and raw objectives of valid trials, in trial_id order."""
        valid = self._valid()
        if not valid:
            return np.empty((0, self.space.dimension)), np.empty((0, self.m))
        x = np.vstack([self.space.to_unit(t.design) for t in valid])
        f = np.array([t.objectives for t in valid], dtype=float)
        return x, f

    def normalize(self, f) -> np.ndarray:
        f = np.asarray(f, dtype=float)
        if self.norm_min is None:
            return f
        span = self.norm_max - self.norm_min
        span = np.where(span > 0, span, 1.0)
        return (f - self.norm_min) / span

    # ------------------------------------------------------------------ ask
    def propose(self, q: int) -> list[np.ndarray]:
        with self._lock:
            if q < 1:
                raise ValueError("q must be >= 1")
            if len(self.trials) + q > self.config.max_trials:
                raise OptimizerError(
                    f"proposing {q} would exceed max_trials={self.config.max_trials} "
                    f"({len(self.trials)} already proposed)")
            if self.config.strategy == "mogo":
                units = [self._next_mogo(len(self.trials) + k) for k in range(q)]
            else:
                units = self._propose_mobo(q)
            out = []
            for u in units:
                design = self.space.from_unit(u)
                record = TrialRecord(len(self.trials), design)
                self.trials.append(record)
                out.append(design)
            return out

    def _propose_mobo(self, q: int) -> list[np.ndarray]:
        first_id = len(self.trials)
        x_train, f_train = self.training_data()
        n_valid = len(x_train)
        due = n_valid >= 2 and (
            self.gp_params is None or self.last_fit_tells is None
            or self.tell_count - self.last_fit_tells >= refit_interval(self.tell_count))
        if due:
            self.norm_min = f_train.min(axis=0)
            self.norm_max = f_train.max(axis=0)
        units = []
        for k in range(q):
            trial_id = first_id + k
            if trial_id < self._init_count:
                units.append(self._sobol[trial_id])
                continue
            if n_valid < 2:
                units.append(self._rng(trial_id, _STREAM_FALLBACK).random(self.space.dimension))
                continue
            if self.norm_min is None:
                self._emit("warning", {"code": "raw_scalarization", "trial_id": trial_id,
                                       "message": "no normalization basis; scalarizing raw objectives"})
            w = sample_simplex(self.m, self._rng(trial_id, _STREAM_WEIGHT))
            s = scalarize(self.normalize(f_train), w, self.config.scalarization_rho)
            mu, sd = s.mean(), s.std()
            y = (s - mu) / (sd if sd > 0 else 1.0)
            if due:
                self.gp_params = fit_gp(x_train, y, self.config.acquisition_restarts,
                                        self._rng(trial_id, _STREAM_FIT))
                self.last_fit_tells = self.tell_count
                self._emit("model_refit", self.refit_payload(trial_id))
            gp = GP(self.gp_params, x_train, y)
            best = float(y.min())
            u, ei = maximize_ei(gp, best, self.space.dimension, self._rng(trial_id, _STREAM_ACQ),
                                anchor=x_train[int(np.argmin(y))])
            self.last_proposal = {"trial_id": trial_id, "weights": w, "gp": gp, "best": best, "ei": ei,
                                  "unit": u}
            units.append(u)
        return units

    def refit_payload(self, trial_id: int) -> dict:
        return {
            "trial_id": trial_id,
            "tell_count": self.tell_count,
            "params": self.gp_params.to_dict(),
            "norm_min": self.norm_min.tolist(),
            "norm_max": self.norm_max.tolist(),
        }

    def _next_mogo(self, trial_id: int) -> np.ndarray:
        p = self.config.resolved_population_size()
        if trial_id < p:
            return self._sobol[trial_id]
        if not self._offspring:
            self._generation += 1
            rng = self._rng(self._generation, _STREAM_GENERATION)
            x_train, f_train = self.training_data()
            if len(x_train) >= p:
                keep = nsga2.survival_select(f_train, p)
                kids = nsga2.mogo_step(x_train[keep], f_train[keep], rng)
            elif len(x_train) >= 4:
                size = len(x_train) - len(x_train) % 2
                kids = nsga2.mogo_step(x_train[:size], f_train[:size], rng)
                kids = np.vstack([kids, rng.random((p - size, self.space.dimension))])
            else:
                kids = rng.random((p, self.space.dimension))
            self._offspring = list(kids)
        return self._offspring.pop(0)

    # ------------------------------------------------------------------ tell
    def mark_running(self, trial_id: int) -> None:
        with self._lock:
            record = self._get(trial_id)
            if record.status == "pending":
                record.status = "running"
            record.attempt_count += 1

    def _get(self, trial_id: int) -> TrialRecord:
        if not 0 <= trial_id < len(self.trials):
            raise KeyError(f"unknown trial_id {trial_id}")
        return self.trials[trial_id]

    def tell(self, trial_id: int, outcome: Sequence[float] | str) -> TrialRecord:
        """Finalize a trial with objectives, ``"invalid"`` or ``"failed"``."""
        with self._lock:
            record = self._get(trial_id)
            if isinstance(outcome, str):
                if outcome not in ("invalid", "failed"):
                    raise ValueError(f"outcome must be objectives, 'invalid' or 'failed', got {outcome!r}")
                status, objectives = outcome, None
            else:
                objectives = [float(v) for v in outcome]
                if len(objectives) != self.m:
                    raise ValueError(f"expected {self.m} objectives, got {len(objectives)}")
                if not all(np.isfinite(objectives)):
                    raise ValueError("objective values must be finite")
                status = "valid"
            if record.status in FINAL_STATUSES:
                if record.status == status and record.objectives == objectives:
                    return record
                raise OptimizerError(f"trial {trial_id} already finalized as {record.status}")
            record.status = status
            record.objectives = objectives
            self.tell_count += 1
            if status == "valid":
                self._update_archive(trial_id, objectives)
            return record

    def _update_archive(self, trial_id: int, f: list[float]) -> None:
        for _, g in self.archive:
            if g == f or dominates(g, f):
                return
        self.archive = [(tid, g) for tid, g in self.archive if not dominates(f, g)]
        self.archive.append((trial_id, f))
        self.archive.sort(key=lambda item: item[0])

    def archive_objectives(self) -> np.ndarray:
        with self._lock:
            if not self.archive:
                return np.empty((0, self.m))
            return np.array([f for _, f in self.archive])

    # ------------------------------------------------------------------ replay
    def restore_proposal(self, trial_id: int, design) -> None:
        """Re-register a journaled proposal without recomputing it (MOBO), or
        regenerate and verify it (MOGO, whose offspring queue is stateful)."""
        with self._lock:
            if trial_id != len(self.trials):
                raise OptimizerError(f"replayed trial_id {trial_id} out of order (expected {len(self.trials)})")
            design = np.asarray(design, dtype=float)
            if self.config.strategy == "mogo":
                regenerated = self.space.from_unit(self._next_mogo())
                if not np.array_equal(regenerated, design):
                    raise OptimizerError(f"replayed design for trial {trial_id} does not match the journal")
            self.trials.append(TrialRecord(trial_id, design))

    def restore_refit(self, payload: dict) -> None:
        with self._lock:
            self.gp_params = GPParams.from_dict(payload["params"])
            self.last_fit_tells = int(payload["tell_count"])
            self.norm_min = np.asarray(payload["norm_min"], dtype=float)
            self.norm_max = np.asarray(payload["norm_max"], dtype=float)

    def counts(self) -> dict[str, int]:
        with self._lock:
            out = {s: 0 for s in STATUSES}
            for t in self.trials:
                out[t.status] += 1
            return out
