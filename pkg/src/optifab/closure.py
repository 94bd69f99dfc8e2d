"""End-to-end closure suites.

Suite ``one`` checks optimizer quality on DTLZ2, where the true front and
its hypervolume are known.  Suite ``two`` checks that moving execution from
the in-process runner to spawned coordinator/worker processes changes
neither the trials nor the results, and that eight slots give the expected
speedup on slow evaluations.
"""

from __future__ import annotations

import logging
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from optifab import journal as jr
from optifab.config import ExperimentConfig
from optifab.driver import ExperimentResult, run_experiment
from optifab.pareto import dtlz2_hypervolume_ceiling, hypervolume
from optifab.problems import ProblemSpec, evaluate

logger = logging.getLogger(__name__)

MAKESPAN_BUDGET = 12.0


@dataclass
class Check:
    name: str
    passed: bool
    detail: str


@dataclass
class SuiteReport:
    suite: str
    checks: list[Check] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def add(self, name: str, passed: bool, detail: str) -> None:
        self.checks.append(Check(name, bool(passed), detail))
        logger.info("%s %s: %s", "PASS" if passed else "FAIL", name, detail)

    def render(self) -> str:
        lines = [f"{'PASS' if c.passed else 'FAIL'}  {c.name}: {c.detail}" for c in self.checks]
        lines.append(f"closure {self.suite}: {'PASS' if self.passed else 'FAIL'} ({self.seconds:.1f} s)")
        return "\n".join(lines)


def random_search_hypervolume(problem: ProblemSpec, budget: int, seed: int, ref) -> float:
    """Hypervolume of ``budget`` uniform random designs, the baseline any optimizer should beat."""
    rng = np.random.default_rng(seed)
    bounds = problem.bounds()
    points = []
    for _ in range(budget):
        x = bounds[:, 0] + rng.random(len(bounds)) * (bounds[:, 1] - bounds[:, 0])
        outcome = evaluate(ProblemSpec(problem.name, problem.n, problem.m, problem.constraint_mode), x)
        if outcome.status == "valid":
            points.append(outcome.objectives)
    return hypervolume(np.array(points).reshape(-1, problem.m), ref)[0]


def hv_series(result: ExperimentResult) -> list[float]:
    return [r["hypervolume"] for r in jr.hv_rows(result.events)]


def _base_config(out: Path, name: str, problem: dict, optimizer: dict, runner: dict | None = None) -> ExperimentConfig:
    return ExperimentConfig.from_dict({
        "experiment_id": name,
        "problem": problem,
        "optimizer": optimizer,
        "runner": runner or {"kind": "in_process", "concurrency": 4},
        "journal_path": str(out / name / "journal.jsonl"),
        "report_dir": str(out / name / "reports"),
    })


def suite_one(out: Path, seed: int = 0) -> SuiteReport:
    report = SuiteReport("one")
    cases = [
        ("mobo-m2-n6", {"name": "dtlz2", "m": 2, "n": 6},
         {"strategy": "mobo", "batch_size": 4, "max_trials": 60, "rng_seed": seed}),
        ("mogo-m2-n6", {"name": "dtlz2", "m": 2, "n": 6},
         {"strategy": "mogo", "batch_size": 16, "population_size": 16, "max_trials": 320, "rng_seed": seed}),
        ("mobo-m3-n12", {"name": "dtlz2", "m": 3, "n": 12},
         {"strategy": "mobo", "batch_size": 4, "max_trials": 120, "rng_seed": seed}),
        ("mogo-m3-n12", {"name": "dtlz2", "m": 3, "n": 12},
         {"strategy": "mogo", "batch_size": 16, "population_size": 16, "max_trials": 320, "rng_seed": seed}),
    ]
    for name, problem, optimizer in cases:
        config = _base_config(out, name, problem, optimizer)
        result = run_experiment(config)
        series = hv_series(result)
        m = problem["m"]
        ceiling = dtlz2_hypervolume_ceiling(m)
        baseline = random_search_hypervolume(config.problem, optimizer["max_trials"], seed + 1000,
                                             config.hv.resolved_ref(m))
        final = series[-1] if series else 0.0
        report.add(f"{name} rows", len(series) == optimizer["max_trials"],
                   f"{len(series)} hypervolume rows for {optimizer['max_trials']} trials")
        report.add(f"{name} monotone", all(b >= a for a, b in zip(series, series[1:])),
                   "hypervolume non-decreasing in trial count")
        report.add(f"{name} ceiling", final <= ceiling + 1e-6, f"final {final:.5f} <= ceiling {ceiling:.5f}")
        report.add(f"{name} beats random", final >= baseline,
                   f"final {final:.5f} >= random search {baseline:.5f}")
        audit = jr.audit(result.events, require_complete=True)
        report.add(f"{name} audit", audit.ok, "; ".join(audit.problems[:3]) or "journal audit clean")
    return report


def suite_two(out: Path, seed: int = 0, trials: int = 64, slots: int = 8, eval_delay: float = 1.0,
              workers: int = 2) -> SuiteReport:
    report = SuiteReport("two")
    problem = {"name": "dtlz2", "m": 2, "n": 6, "eval_delay": eval_delay}
    optimizer = {"strategy": "mobo", "batch_size": slots, "max_trials": trials, "rng_seed": seed}
    local = run_experiment(_base_config(out, "in-process", problem, optimizer,
                                        {"kind": "in_process", "concurrency": slots}))
    remote = run_experiment(_base_config(out, "distributed", problem, optimizer,
                                         {"kind": "distributed", "concurrency": slots // workers,
                                          "spawn_workers": workers, "heartbeat_interval": 1.0}))
    # task ids embed the experiment id, so compare on (trial_id, objectives) only
    same = local.trial_set() == remote.trial_set()
    report.add("trial-set equality", same and len(local.trial_set()) == trials,
               f"{len(local.trial_set())} in-process vs {len(remote.trial_set())} distributed trials, "
               f"{'identical' if same else 'DIFFERENT'}")
    makespan = remote.makespan
    report.add("evaluation makespan", makespan < MAKESPAN_BUDGET,
               f"{makespan:.2f} s for {trials} x {eval_delay:g} s on {slots} slots (budget {MAKESPAN_BUDGET:g} s)")
    peak = jr.overhead_report(remote.events).max_concurrency
    report.add("concurrency bound", peak <= slots, f"peak {peak} running tasks on {slots} slots")
    per_worker = jr.concurrency_profile(remote.events, per_worker=True)
    worst = max((max(n for _, n in prof) for prof in per_worker.values()), default=0)
    report.add("per-worker slots", worst <= slots // workers, f"peak {worst} per worker, {slots // workers} slots each")
    audit = jr.audit(remote.events, require_complete=True)
    report.add("audit", audit.ok, "; ".join(audit.problems[:3]) or "journal audit clean")
    return report


def run_suite(suite: str, out: str | Path | None = None, seed: int = 0) -> SuiteReport:
    started = time.monotonic()
    with tempfile.TemporaryDirectory(prefix=f"closure-{suite}-") as tmp:
        base = Path(out) if out is not None else Path(tmp)
        if suite == "one":
            report = suite_one(base, seed)
        elif suite == "two":
            report = suite_two(base, seed)
        else:
            raise ValueError(f"unknown closure suite {suite!r}")
    report.seconds = time.monotonic() - started
    return report
