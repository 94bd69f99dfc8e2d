"""Execution backends behind one submit/shutdown surface."""

from optifab.runners.base import CLI_RUNNER_NAMES, RUNNER_KINDS, Runner, RunnerConfig
from optifab.runners.distributed import Coordinator, DistributedRunner, Worker
from optifab.runners.local import BatchRunner, InProcessRunner


def make_runner(config: RunnerConfig, publish, broker=None, registry=None, on_event=None) -> Runner:
    """Build (but do not start) the runner named by ``config.kind``.

    The distributed kind needs the broker it embeds in its coordinator.
    """
    config.validate()
    if config.kind == "in_process":
        return InProcessRunner(config, publish, registry)
    if config.kind == "batch_subprocess":
        return BatchRunner(config, publish, registry)
    if broker is None:
        raise ValueError("the distributed runner needs a broker to embed")
    return DistributedRunner(config, publish, broker, registry, on_event)


__all__ = [
    "BatchRunner",
    "CLI_RUNNER_NAMES",
    "Coordinator",
    "DistributedRunner",
    "InProcessRunner",
    "RUNNER_KINDS",
    "Runner",
    "RunnerConfig",
    "Worker",
    "make_runner",
]
