from __future__ import annotations

import os
import sys
import threading
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

from optifab import wire
from optifab.tasks import FunctionRegistry, ResultEnvelope, TaskEnvelope, default_registry, failed_result

RUNNER_KINDS = ("in_process", "batch_subprocess", "distributed")
CLI_RUNNER_NAMES = {"in-process": "in_process", "batch": "batch_subprocess", "distributed": "distributed"}

Publish = Callable[[ResultEnvelope], object]


@dataclass
class RunnerConfig:
    kind: str = "in_process"
    concurrency: int = 1
    queue_latency: float = 0.0
    listen_address: str = "127.0.0.1:0"
    coordinator_address: str | None = None
    heartbeat_interval: float = 5.0
    worker_grace: int = 3
    requeue_limit: int = 5
    spawn_workers: int = 0

    def validate(self) -> None:
        if self.kind not in RUNNER_KINDS:
            raise ValueError(f"runner.kind: must be one of {RUNNER_KINDS}")
        if self.concurrency < 1:
            raise ValueError("runner.concurrency: must be >= 1")
        if self.queue_latency < 0:
            raise ValueError("runner.queue_latency: must be >= 0")
        if self.heartbeat_interval <= 0:
            raise ValueError("runner.heartbeat_interval: must be > 0")
        if self.worker_grace < 1:
            raise ValueError("runner.worker_grace: must be >= 1")
        if self.requeue_limit < 0:
            raise ValueError("runner.requeue_limit: must be >= 0")
        if self.spawn_workers < 0:
            raise ValueError("runner.spawn_workers: must be >= 0")
        if self.kind == "distributed":
            try:
                wire.parse_address(self.listen_address)
            except ValueError as exc:
                raise ValueError(f"runner.listen_address: {exc}") from None

    def to_dict(self) -> dict:
        return asdict(self)


class Runner:
    """Common submit/shutdown surface.  Results go to ``publish``, never back to the caller."""

    kind = ""

    def __init__(self, config: RunnerConfig, publish: Publish, registry: FunctionRegistry | None = None):
        config.validate()
        self.config = config
        self.publish = publish
        self.registry = registry or default_registry
        self.closed = False
        self._lock = threading.Lock()

    @property
    def slots(self) -> int:
        return self.config.concurrency

    def start(self) -> "Runner":
        return self

    def submit(self, envelope: TaskEnvelope) -> None:
        with self._lock:
            closed = self.closed
        if closed:
            self.publish(failed_result(envelope, "runner closed"))
            return
        self._dispatch(envelope)

    def _dispatch(self, envelope: TaskEnvelope) -> None:
        raise NotImplementedError

    def shutdown(self, wait: bool = True) -> None:
        with self._lock:
            self.closed = True


def subprocess_env() -> dict:
    """Environment that lets child interpreters import this package."""
    env = dict(os.environ)
    src = str(Path(__file__).resolve().parents[2])
    env["PYTHONPATH"] = src + (os.pathsep + env["PYTHONPATH"] if env.get("PYTHONPATH") else "")
    return env


PYTHON = sys.executable
