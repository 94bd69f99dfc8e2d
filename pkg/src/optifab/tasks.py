"""Function-as-a-Task layer: registry, envelopes, execution, retries, dedup.

Evaluation functions are not shipped to workers.  Submitter and worker run
the same distribution and resolve ``(registry_key, version)`` against a
shared registry; a version mismatch fails the task before anything runs.
"""

from __future__ import annotations

import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from concurrent.futures import TimeoutError as FutureTimeout
from dataclasses import dataclass, field
from typing import Any, Callable

from optifab import wire
from optifab.clock import now
from optifab.problems import EvaluationOutcome, ProblemSpec, evaluate

logger = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 300.0
DEFAULT_MAX_ATTEMPTS = 3
RESULT_STATUSES = ("valid", "invalid", "failed")


class RegistryError(KeyError):
    pass


@dataclass(frozen=True)
class FunctionRef:
    registry_key: str
    version: str

    def to_dict(self) -> dict:
        return {"registry_key": self.registry_key, "version": self.version}


class FunctionRegistry:
    def __init__(self):
        self._entries: dict[str, tuple[str, Callable[[dict], EvaluationOutcome]]] = {}
        self._lock = threading.Lock()

    def register(self, key: str, version: str, entry: Callable[[dict], EvaluationOutcome]) -> None:
        with self._lock:
            if key in self._entries and self._entries[key][0] != version:
                raise RegistryError(
                    f"function {key!r} already registered with version {self._entries[key][0]!r}")
            self._entries[key] = (version, entry)

    def resolve(self, key: str, version: str) -> Callable[[dict], EvaluationOutcome]:
        with self._lock:
            if key not in self._entries:
                raise RegistryError(f"unknown function {key!r}")
            have, entry = self._entries[key]
        if have != version:
            raise RegistryError(f"version mismatch for {key!r}: submitter {version!r}, worker {have!r}")
        return entry

    def manifest(self) -> dict[str, str]:
        with self._lock:
            return {k: v for k, (v, _) in sorted(self._entries.items())}


def _problem_entry(params: dict) -> EvaluationOutcome:
    spec = ProblemSpec.from_dict(params["problem"])
    return evaluate(spec, params["x"])


BUILTIN_VERSION = "1"
default_registry = FunctionRegistry()
for _name in ("dtlz2", "detector-toy"):
    default_registry.register(_name, BUILTIN_VERSION, _problem_entry)


def register_function(key: str, version: str, entry: Callable[[dict], EvaluationOutcome],
                      registry: FunctionRegistry | None = None) -> None:
    (registry or default_registry).register(key, version, entry)


# --------------------------------------------------------------------- envelopes
def make_task_id(experiment_id: str, trial_id: int, attempt: int) -> str:
    return f"{experiment_id}:{trial_id}:{attempt}"


def parse_task_id(task_id: str) -> tuple[str, int, int]:
    experiment_id, trial, attempt = task_id.rsplit(":", 2)
    return experiment_id, int(trial), int(attempt)


@dataclass
class TaskEnvelope:
    experiment_id: str
    trial_id: int
    function: FunctionRef
    params: dict
    attempt: int = 1
    max_attempts: int = DEFAULT_MAX_ATTEMPTS
    submitted_at: float = 0.0
    timeout: float = DEFAULT_TIMEOUT

    def __post_init__(self):
        if self.attempt < 1 or self.attempt > self.max_attempts:
            raise ValueError(f"attempt {self.attempt} outside 1..{self.max_attempts}")

    @property
    def task_id(self) -> str:
        return make_task_id(self.experiment_id, self.trial_id, self.attempt)

    def to_dict(self) -> dict:
        return {
            "schema_version": wire.SCHEMA_VERSION,
            "task_id": self.task_id,
            "experiment_id": self.experiment_id,
            "trial_id": self.trial_id,
            "function": self.function.to_dict(),
            "params": self.params,
            "attempt": self.attempt,
            "max_attempts": self.max_attempts,
            "submitted_at": self.submitted_at,
            "timeout": self.timeout,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TaskEnvelope":
        if d.get("schema_version") != wire.SCHEMA_VERSION:
            raise ValueError(f"unsupported envelope schema_version {d.get('schema_version')!r}")
        env = cls(
            experiment_id=d["experiment_id"],
            trial_id=int(d["trial_id"]),
            function=FunctionRef(**d["function"]),
            params=d["params"],
            attempt=int(d["attempt"]),
            max_attempts=int(d["max_attempts"]),
            submitted_at=float(d["submitted_at"]),
            timeout=float(d["timeout"]),
        )
        if env.task_id != d["task_id"]:
            raise ValueError(f"task_id {d['task_id']!r} does not match its parts")
        return env

    def next_attempt(self) -> "TaskEnvelope":
        return TaskEnvelope(self.experiment_id, self.trial_id, self.function, self.params,
                            self.attempt + 1, self.max_attempts, 0.0, self.timeout)


@dataclass
class ResultEnvelope:
    task_id: str
    status: str
    objectives: list[float] | None = None
    error_text: str | None = None
    started_at: float = 0.0
    finished_at: float = 0.0
    worker_id: str = ""
    retryable: bool = True

    def __post_init__(self):
        if self.status not in RESULT_STATUSES:
            raise ValueError(f"status must be one of {RESULT_STATUSES}, got {self.status!r}")
        if (self.objectives is not None) != (self.status == "valid"):
            raise ValueError("objectives must be present exactly when status is valid")
        if self.finished_at < self.started_at:
            raise ValueError("finished_at precedes started_at")

    @property
    def trial_id(self) -> int:
        return parse_task_id(self.task_id)[1]

    @property
    def attempt(self) -> int:
        return parse_task_id(self.task_id)[2]

    def to_dict(self) -> dict:
        return {
            "schema_version": wire.SCHEMA_VERSION,
            "task_id": self.task_id,
            "status": self.status,
            "objectives": self.objectives,
            "error_text": self.error_text,
            "timing": {"started_at": self.started_at, "finished_at": self.finished_at},
            "worker_id": self.worker_id,
            "retryable": self.retryable,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ResultEnvelope":
        if d.get("schema_version") != wire.SCHEMA_VERSION:
            raise ValueError(f"unsupported result schema_version {d.get('schema_version')!r}")
        return cls(d["task_id"], d["status"], d.get("objectives"), d.get("error_text"),
                   float(d["timing"]["started_at"]), float(d["timing"]["finished_at"]),
                   d.get("worker_id", ""), bool(d.get("retryable", True)))

    def same_outcome(self, other: "ResultEnvelope") -> bool:
        return (self.status, self.objectives) == (other.status, other.objectives)


def serialize(envelope: TaskEnvelope | ResultEnvelope) -> bytes:
    return wire.encode(envelope.to_dict())


def deserialize_task(data: bytes) -> TaskEnvelope:
    return TaskEnvelope.from_dict(wire.decode(data))


def deserialize_result(data: bytes) -> ResultEnvelope:
    return ResultEnvelope.from_dict(wire.decode(data))


def failed_result(envelope: TaskEnvelope, error_text: str, worker_id: str = "",
                  retryable: bool = True) -> ResultEnvelope:
    t = now()
    return ResultEnvelope(envelope.task_id, "failed", None, error_text, t, t, worker_id, retryable)


# --------------------------------------------------------------------- execution
_timeout_pool = ThreadPoolExecutor(max_workers=256, thread_name_prefix="optifab-exec")


def _run_entry(entry, params) -> EvaluationOutcome:
    return entry(params)


def execute(envelope: TaskEnvelope, registry: FunctionRegistry | None = None,
            worker_id: str = "", timeout: float | None = None) -> ResultEnvelope:
    """Resolve, run and classify one task.  Never raises for task-level errors."""
    registry = registry or default_registry
    started = now()
    try:
        entry = registry.resolve(envelope.function.registry_key, envelope.function.version)
    except RegistryError as exc:
        return ResultEnvelope(envelope.task_id, "failed", None, str(exc.args[0]), started, now(), worker_id)
    limit = envelope.timeout if timeout is None else timeout
    try:
        future = _timeout_pool.submit(_run_entry, entry, envelope.params)
        outcome = future.result(timeout=limit)
    except FutureTimeout:
        return ResultEnvelope(envelope.task_id, "failed", None, f"timed out after {limit:g} s",
                              started, now(), worker_id)
    except Exception as exc:  # task code is untrusted
        return ResultEnvelope(envelope.task_id, "failed", None, f"{type(exc).__name__}: {exc}",
                              started, now(), worker_id)
    finished = now()
    if outcome.status == "valid":
        return ResultEnvelope(envelope.task_id, "valid", [float(v) for v in outcome.objectives], None,
                              started, finished, worker_id)
    return ResultEnvelope(envelope.task_id, "invalid", None, None, started, finished, worker_id)


# --------------------------------------------------------------------- policies
RESUBMIT = "resubmit"
FINALIZE = "finalize"


def retry_policy(result: ResultEnvelope, envelope: TaskEnvelope) -> str:
    if result.status == "failed" and result.retryable and envelope.attempt < envelope.max_attempts:
        return RESUBMIT
    return FINALIZE


@dataclass
class DedupGate:
    """Pass the first result per task_id; count duplicates and report conflicts.

    ``on_event(kind, payload)`` receives ``warning`` events for every dropped
    duplicate (code ``duplicate_result``) or conflicting one (code
    ``conflicting_duplicate``).
    """

    on_event: Callable[[str, dict], None] | None = None
    seen: dict[str, ResultEnvelope] = field(default_factory=dict)
    duplicates: int = 0
    conflicts: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def seed(self, task_ids) -> None:
        """Mark task_ids as already consumed (e.g. after a journal replay)."""
        with self._lock:
            for task_id in task_ids:
                self.seen.setdefault(task_id, None)

    def admit(self, result: ResultEnvelope) -> bool:
        with self._lock:
            first = self.seen.get(result.task_id, ...)
            if first is ...:
                self.seen[result.task_id] = result
                return True
            self.duplicates += 1
            conflict = first is not None and not first.same_outcome(result)
            if conflict:
                self.conflicts += 1
        if self.on_event is not None:
            if conflict:
                logger.warning("conflicting duplicate for %s: kept %s, dropped %s",
                               result.task_id, first.status, result.status)
                self.on_event("warning", {"code": "conflicting_duplicate", "task_id": result.task_id,
                                          "kept": first.status, "dropped": result.status})
            else:
                self.on_event("warning", {"code": "duplicate_result", "task_id": result.task_id})
        return False

    def filter(self, results):
        for r in results:
            if self.admit(r):
                yield r


def envelope_for(experiment_id: str, trial_id: int, design, problem: ProblemSpec,
                 max_attempts: int = DEFAULT_MAX_ATTEMPTS, timeout: float = DEFAULT_TIMEOUT) -> TaskEnvelope:
    params: dict[str, Any] = {"x": [float(v) for v in design], "problem": problem.to_dict()}
    return TaskEnvelope(experiment_id, trial_id, FunctionRef(problem.name, BUILTIN_VERSION), params,
                        1, max_attempts, 0.0, timeout)


def wait_until(predicate: Callable[[], bool], timeout: float, interval: float = 0.01) -> bool:
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if predicate():
            return True
        time.sleep(interval)
    return predicate()
