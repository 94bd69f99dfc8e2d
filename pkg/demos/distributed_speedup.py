"""Slow evaluations on one slot versus a coordinator with two local workers.

Each DTLZ2 evaluation sleeps for ``--delay`` seconds.  The same seeded
experiment runs once on a single in-process slot and once through a
coordinator with two spawned worker processes of four slots each.  The
script prints both evaluation makespans, the peak number of concurrent
tasks, and whether the two runs produced the same trials.

    python demos/distributed_speedup.py [--trials 32] [--delay 0.5]
"""

import argparse
import tempfile
from pathlib import Path

from optifab import journal as jr
from optifab.config import ExperimentConfig
from optifab.driver import run_experiment


def build(out: Path, name: str, runner: dict, trials: int, delay: float) -> ExperimentConfig:
    return ExperimentConfig.from_dict({
        "experiment_id": name,
        "problem": {"name": "dtlz2", "n": 6, "m": 2, "eval_delay": delay},
        "optimizer": {"strategy": "mobo", "batch_size": 8, "max_trials": trials, "rng_seed": 1},
        "runner": runner,
        "journal_path": str(out / name / "journal.jsonl"),
        "report_dir": str(out / name / "reports"),
    })


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--trials", type=int, default=32)
    parser.add_argument("--delay", type=float, default=0.5)
    args = parser.parse_args()
    out = Path(tempfile.mkdtemp(prefix="demo-speedup-"))

    serial = run_experiment(build(out, "serial", {"kind": "in_process", "concurrency": 1},
                                  args.trials, args.delay))
    spread = run_experiment(build(out, "distributed", {"kind": "distributed", "concurrency": 4,
                                                       "spawn_workers": 2, "heartbeat_interval": 1.0},
                                  args.trials, args.delay))
    for name, result in (("one slot", serial), ("2 workers x 4", spread)):
        peak = jr.overhead_report(result.events).max_concurrency
        print(f"{name:>14}: makespan {result.makespan:6.2f} s, peak concurrency {peak}")
    print(f"speedup {serial.makespan / spread.makespan:.1f}x; identical trials: "
          f"{serial.trial_set() == spread.trial_set()}")
    print(f"concurrency profiles in {out}/*/reports/concurrency.csv")


if __name__ == "__main__":
    main()
