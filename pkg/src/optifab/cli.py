"""Command-line entry points: run, coordinator, worker, report, closure."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from optifab import journal as jr
from optifab.config import ConfigError, ExperimentConfig
from optifab.runners.base import CLI_RUNNER_NAMES

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_REFUSED = 3

LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}

logger = logging.getLogger("optifab")


def configure_logging() -> None:
    name = os.environ.get("OPTIFAB_LOG_LEVEL", "warn").strip().lower()
    level = LOG_LEVELS.get(name)
    logging.basicConfig(level=level or logging.WARNING, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if level is None:
        logger.warning("OPTIFAB_LOG_LEVEL=%r is not one of %s; using warn", name, sorted(LOG_LEVELS))


def _load_config(args) -> ExperimentConfig:
    config = ExperimentConfig.load(args.config)
    overrides: dict = {}
    runner: dict = {}
    if getattr(args, "runner", None):
        runner["kind"] = CLI_RUNNER_NAMES[args.runner]
    if getattr(args, "concurrency", None) is not None:
        runner["concurrency"] = args.concurrency
    if getattr(args, "queue_latency", None) is not None:
        runner["queue_latency"] = args.queue_latency
    if getattr(args, "coordinator", None):
        runner["listen_address"] = args.coordinator
    if getattr(args, "spawn_workers", None) is not None:
        runner["spawn_workers"] = args.spawn_workers
    if runner:
        overrides["runner"] = runner
    if getattr(args, "seed", None) is not None:
        overrides["optimizer"] = {"rng_seed": args.seed}
    if overrides:
        journal_path, report_dir = config.journal_path, config.report_dir
        config = config.replace(**overrides)
        config.journal_path, config.report_dir = journal_path, report_dir
    return config


def _execute(config: ExperimentConfig, resume: bool) -> int:
    from optifab.driver import Experiment, ResumeError
    from optifab.journal import JournalError

    try:
        result = Experiment(config, resume=resume).run()
    except ResumeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_REFUSED
    except JournalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    print(jr.summary(result.events))
    print(f"reports written to {config.report_dir}")
    return EXIT_OK


def cmd_run(args) -> int:
    config = _load_config(args)
    return _execute(config, args.resume)


def cmd_coordinator(args) -> int:
    """Serve the runner and broker protocols for one experiment; external workers join."""
    args.runner = "distributed"
    if args.listen:
        args.coordinator = args.listen
    config = _load_config(args)
    print(f"coordinator for {config.experiment_id} on {config.runner.listen_address}", flush=True)
    return _execute(config, args.resume)


def cmd_worker(args) -> int:
    from optifab.runners.distributed import Worker, install_signal_handlers

    worker = Worker(args.coordinator, slots=args.slots, worker_id=args.worker_id, grace=args.grace,
                    connect_deadline=args.connect_timeout)
    install_signal_handlers(worker)
    code = worker.run()
    if code == EXIT_REFUSED:
        print(f"worker {worker.worker_id}: registration refused by {args.coordinator}", file=sys.stderr)
    elif code != EXIT_OK:
        print(f"worker {worker.worker_id}: could not reach {args.coordinator}", file=sys.stderr)
    return code


def cmd_report(args) -> int:
    path = Path(args.journal)
    if not path.exists():
        print(f"error: no journal at {path}", file=sys.stderr)
        return EXIT_FAILURE
    contents = jr.read_journal(path)
    if contents.truncated_bytes:
        print(f"warning: ignored {contents.truncated_bytes} byte(s) of corrupt journal tail", file=sys.stderr)
    out = Path(args.out) if args.out else _default_report_dir(contents.header, path)
    jr.write_reports(contents.events, out)
    print(jr.summary(contents.events))
    print(f"reports written to {out}")
    return EXIT_OK


def _default_report_dir(header: dict | None, journal_path: Path) -> Path:
    if header is not None:
        report_dir = header.get("config", {}).get("report_dir")
        if report_dir:
            return Path(report_dir)
    return journal_path.parent / "reports"


def cmd_closure(args) -> int:
    from optifab.closure import run_suite

    report = run_suite(args.suite, args.out, args.seed)
    print(report.render())
    return EXIT_OK if report.passed else EXIT_FAILURE


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="optifab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def runner_flags(p, with_runner: bool = True):
        p.add_argument("--config", required=True, help="experiment config (canonical JSON)")
        if with_runner:
            p.add_argument("--runner", choices=sorted(CLI_RUNNER_NAMES))
        p.add_argument("--concurrency", type=int, help="worker slots (per worker for distributed)")
        p.add_argument("--queue-latency", type=float, help="injected scheduling delay for the batch runner")
        p.add_argument("--spawn-workers", type=int, help="local worker processes to start (distributed)")
        p.add_argument("--seed", type=int, help="override optimizer.rng_seed")
        p.add_argument("--resume", action="store_true", help="continue the run recorded in the journal")

    run = sub.add_parser("run", help="run an experiment to max_trials")
    runner_flags(run)
    run.add_argument("--coordinator", help="HOST:PORT the distributed coordinator listens on")
    run.set_defaults(func=cmd_run)

    coord = sub.add_parser("coordinator", help="run an experiment served to external workers")
    runner_flags(coord, with_runner=False)
    coord.add_argument("--listen", help="HOST:PORT to listen on (default: runner.listen_address)")
    coord.set_defaults(func=cmd_coordinator, coordinator=None)

    worker = sub.add_parser("worker", help="execute tasks for a coordinator")
    worker.add_argument("--coordinator", required=True, help="coordinator HOST:PORT")
    worker.add_argument("--slots", type=int, default=1)
    worker.add_argument("--worker-id")
    worker.add_argument("--grace", type=float, default=30.0, help="seconds to finish in-flight tasks on interrupt")
    worker.add_argument("--connect-timeout", type=float, default=None,
                        help="give up if the coordinator stays unreachable this long (default: keep trying)")
    worker.set_defaults(func=cmd_worker)

    report = sub.add_parser("report", help="regenerate report CSVs from a journal")
    report.add_argument("journal")
    report.add_argument("--out", help="output directory (default: the run's report_dir)")
    report.set_defaults(func=cmd_report)

    closure = sub.add_parser("closure", help="run a closure suite")
    closure.add_argument("suite", choices=("one", "two"))
    closure.add_argument("--out", help="keep experiment outputs here")
    closure.add_argument("--seed", type=int, default=0)
    closure.set_defaults(func=cmd_closure)
    return parser


def main(argv: list[str] | None = None) -> int:
    configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "slots", 1) < 1:
        print("error: --slots must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())
