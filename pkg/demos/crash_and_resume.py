"""Interrupt a run halfway, resume it from the journal, and compare.

The first run stops abruptly after half of its trials are finalized,
leaving the journal as a crash would.  Resuming replays the journal,
resubmits whatever was outstanding and finishes the budget.  A second,
uninterrupted run with the same seed is the reference: both end with the
same trials and the same Pareto archive.

    python demos/crash_and_resume.py [--trials 40]
"""

import argparse
import tempfile
from pathlib import Path

import numpy as np

from optifab import journal as jr
from optifab.config import ExperimentConfig
from optifab.driver import run_experiment


def build(out: Path, name: str, trials: int) -> ExperimentConfig:
    return ExperimentConfig.from_dict({
        "experiment_id": "resume-demo",
        "problem": {"name": "dtlz2", "n": 6, "m": 2},
        "optimizer": {"strategy": "mobo", "batch_size": 4, "max_trials": trials, "rng_seed": 7},
        "journal_path": str(out / name / "journal.jsonl"),
        "report_dir": str(out / name / "reports"),
    })


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--trials", type=int, default=40)
    args = parser.parse_args()
    out = Path(tempfile.mkdtemp(prefix="demo-resume-"))

    cut = build(out, "interrupted", args.trials)
    first = run_experiment(cut, stop_after=args.trials // 2)
    print(f"stopped with {len(first.outcomes)} of {args.trials} trials finalized")
    resumed = run_experiment(cut, resume=True)
    reference = run_experiment(build(out, "reference", args.trials))

    print(f"resumed run finalized {len(resumed.outcomes)} trials, "
          f"hypervolume {resumed.final_hypervolume:.5f} vs reference {reference.final_hypervolume:.5f}")
    same_archive = np.array_equal(np.sort(resumed.archive, axis=0), np.sort(reference.archive, axis=0))
    print(f"identical trials: {resumed.trial_set() == reference.trial_set()}, identical archive: {same_archive}")
    print(f"audit: {'clean' if jr.audit(resumed.events, require_complete=True).ok else 'PROBLEMS'}")


if __name__ == "__main__":
    main()
