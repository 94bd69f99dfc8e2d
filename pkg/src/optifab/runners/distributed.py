"""Coordinator/worker runner over framed TCP.

One coordinator port serves two protocols.  Worker control connections
speak REGISTER / REGISTER_ACK / HEARTBEAT / TASK / TASK_ACK / CANCEL /
SHUTDOWN; broker connections speak SUB / PUB / POLL / ACK (see
:mod:`optifab.channel`).  Workers publish results to the embedded broker, and
the coordinator frees the worker's slot when it sees the result go by.

All coordinator state lives behind one lock, so registrations, heartbeats,
dispatches, results and sweeps are applied one at a time.
"""

from __future__ import annotations

import logging
import os
import signal
import socket
import subprocess
import threading
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

from optifab import transport, wire
from optifab.channel import Broker, BrokerClient, BrokerService, topic_for
from optifab.clock import now
from optifab.runners.base import PYTHON, Publish, Runner, RunnerConfig, subprocess_env
from optifab.tasks import (
    FunctionRegistry,
    ResultEnvelope,
    TaskEnvelope,
    default_registry,
    execute,
    failed_result,
    parse_task_id,
)

logger = logging.getLogger(__name__)

CONTROL_TYPES = ("REGISTER", "HEARTBEAT", "TASK_ACK")


class RegistrationRefused(RuntimeError):
    pass


@dataclass
class WorkerInfo:
    worker_id: str
    slots: int
    last_heartbeat: float
    state: str = "idle"  # idle | busy | lost
    conn: transport.Connection | None = field(default=None, repr=False)
    in_flight: dict[str, TaskEnvelope] = field(default_factory=dict)
    draining: bool = False
    task_log: list[tuple[str, float]] = field(default_factory=list, repr=False)

    @property
    def free_slots(self) -> int:
        return self.slots - len(self.in_flight)


class Coordinator:
    def __init__(self, address: str, broker: Broker, registry: FunctionRegistry | None = None,
                 heartbeat_interval: float = 5.0, worker_grace: int = 3, requeue_limit: int = 5,
                 publish: Publish | None = None, on_event: Callable[[str, dict], None] | None = None):
        self.broker = broker
        self.registry = registry or default_registry
        self.heartbeat_interval = heartbeat_interval
        self.worker_grace = worker_grace
        self.requeue_limit = requeue_limit
        self.on_event = on_event
        self._publish = publish
        self.workers: dict[str, WorkerInfo] = {}
        self.queue: deque[TaskEnvelope] = deque()
        self.requeues: dict[str, int] = {}
        self.done: set[str] = set()
        self.dispatch_log: list[tuple[float, str, str]] = []
        self.closed = False
        self._lock = threading.RLock()
        self._stop = threading.Event()
        self._service = BrokerService(broker)
        self._server = transport.FrameServer(address, self._on_message, self._on_close, "coordinator")
        broker.listeners.append(self._on_published)

    @property
    def address(self) -> str:
        return self._server.address

    def start(self) -> "Coordinator":
        self._server.start()
        threading.Thread(target=self._sweep_loop, name="coordinator-sweep", daemon=True).start()
        return self

    # ------------------------------------------------------------ submissions
    def submit(self, envelope: TaskEnvelope) -> None:
        with self._lock:
            if self.closed:
                closed = True
            else:
                closed = False
                self.queue.append(envelope)
                self._schedule()
        if closed:
            self._fail(envelope, "runner closed")

    def _fail(self, envelope: TaskEnvelope, text: str, retryable: bool = True) -> None:
        result = failed_result(envelope, text, "coordinator", retryable)
        if self._publish is not None:
            self._publish(result)
        else:
            self.broker.publish(topic_for(envelope.experiment_id), result)

    def _schedule(self) -> None:
        """Work-conserving dispatch: least-loaded worker first, ties by worker_id."""
        while self.queue:
            candidates = [w for w in self.workers.values()
                          if w.state != "lost" and not w.draining and w.free_slots > 0 and w.conn is not None]
            if not candidates:
                return
            worker = min(candidates, key=lambda w: (len(w.in_flight), w.worker_id))
            envelope = self.queue.popleft()
            if envelope.task_id in self.done:
                continue
            worker.in_flight[envelope.task_id] = envelope
            worker.state = "busy"
            self.dispatch_log.append((now(), worker.worker_id, envelope.task_id))
            if not worker.conn.send({"type": "TASK", "envelope": envelope.to_dict()}):
                self._lose(worker, "send failed")

    # ------------------------------------------------------------ protocol
    def _on_message(self, conn: transport.Connection, msg: dict) -> None:
        kind = msg.get("type")
        if kind in BrokerService.MESSAGE_TYPES:
            self._service.handle(conn, msg)
        elif kind == "REGISTER":
            self._register(conn, msg)
        elif kind == "HEARTBEAT":
            self._heartbeat(msg)
        elif kind == "TASK_ACK":
            with self._lock:
                worker = self.workers.get(msg.get("worker_id", ""))
                if worker is not None:
                    worker.task_log.append((msg["task_id"], float(msg.get("started_at", 0.0))))
        else:
            conn.send({"type": "ACK", "error": f"unknown message type {kind!r}"})

    def manifest(self) -> dict:
        return {
            "schema_version": wire.SCHEMA_VERSION,
            "registry": self.registry.manifest(),
            "heartbeat_interval": self.heartbeat_interval,
        }

    def _register(self, conn: transport.Connection, msg: dict) -> None:
        worker_id = str(msg["worker_id"])
        slots = int(msg.get("slots", 1))
        theirs = msg.get("registry", {})
        mine = self.registry.manifest()
        problems = []
        if msg.get("schema_version") != wire.SCHEMA_VERSION:
            problems.append(f"schema_version {msg.get('schema_version')!r} != {wire.SCHEMA_VERSION!r}")
        for key, version in mine.items():
            if theirs.get(key) != version:
                problems.append(f"function {key!r}: worker has {theirs.get(key)!r}, coordinator needs {version!r}")
        if slots < 1:
            problems.append("slots must be >= 1")
        if problems:
            self._emit("warning", {"code": "registration_refused", "worker_id": worker_id, "reason": problems})
            conn.send({"type": "REGISTER_ACK", "ok": False, "reason": "; ".join(problems)})
            return
        with self._lock:
            old = self.workers.get(worker_id)
            if old is not None:
                self._lose(old, "re-registered", close=old.conn is not conn)
            conn.context["worker_id"] = worker_id
            self.workers[worker_id] = WorkerInfo(worker_id, slots, time.monotonic(), conn=conn)
            conn.send({"type": "REGISTER_ACK", "ok": True, "manifest": self.manifest()})
            logger.info("worker %s registered with %d slots", worker_id, slots)
            self._schedule()

    def _heartbeat(self, msg: dict) -> None:
        with self._lock:
            worker = self.workers.get(msg.get("worker_id", ""))
            if worker is None or worker.state == "lost":
                return
            worker.last_heartbeat = time.monotonic()
            worker.draining = bool(msg.get("draining", False))
            self._schedule()

    def _on_close(self, conn: transport.Connection) -> None:
        if "worker_id" in conn.context and not self.closed:
            with self._lock:
                worker = self.workers.get(conn.context["worker_id"])
                if worker is not None and worker.conn is conn and worker.state != "lost":
                    self._lose(worker, "connection closed")
        self._service.on_close(conn)

    def _on_published(self, topic: str, seq: int, record: dict) -> None:
        task_id = record.get("task_id")
        if not task_id:
            return
        with self._lock:
            self.done.add(task_id)
            for worker in self.workers.values():
                if worker.in_flight.pop(task_id, None) is not None and not worker.in_flight \
                        and worker.state == "busy":
                    worker.state = "idle"
            self._schedule()

    # ------------------------------------------------------------ failures
    def _lose(self, worker: WorkerInfo, reason: str, close: bool = True) -> None:
        worker.state = "lost"
        orphans = list(worker.in_flight.values())
        worker.in_flight.clear()
        logger.warning("worker %s lost (%s); requeueing %d task(s)", worker.worker_id, reason, len(orphans))
        self._emit("warning", {"code": "worker_lost", "worker_id": worker.worker_id, "reason": reason,
                               "requeued": [e.task_id for e in orphans]})
        if close and worker.conn is not None:
            worker.conn.close()
        for envelope in reversed(orphans):
            self._requeue(envelope)
        self._schedule()

    def _requeue(self, envelope: TaskEnvelope) -> None:
        if envelope.task_id in self.done:
            return
        count = self.requeues.get(envelope.task_id, 0) + 1
        self.requeues[envelope.task_id] = count
        if count > self.requeue_limit:
            self.done.add(envelope.task_id)
            self._fail(envelope, f"requeue limit {self.requeue_limit} exceeded", retryable=False)
            return
        # a lost worker is not the task's fault: same attempt, front of the queue
        self.queue.appendleft(envelope)

    def failure_sweep(self) -> list[str]:
        """Mark silent workers lost; returns the task_ids that were requeued."""
        limit = self.worker_grace * self.heartbeat_interval
        requeued = []
        with self._lock:
            t = time.monotonic()
            for worker in list(self.workers.values()):
                if worker.state != "lost" and t - worker.last_heartbeat > limit:
                    requeued.extend(worker.in_flight)
                    self._lose(worker, f"silent for {t - worker.last_heartbeat:.1f} s")
        return requeued

    def _sweep_loop(self) -> None:
        while not self._stop.wait(self.heartbeat_interval):
            self.failure_sweep()

    def _emit(self, kind: str, payload: dict) -> None:
        if self.on_event is not None:
            self.on_event(kind, payload)

    # ------------------------------------------------------------ lifecycle
    def live_workers(self) -> list[WorkerInfo]:
        with self._lock:
            return [w for w in self.workers.values() if w.state != "lost"]

    def shutdown(self, notify_workers: bool = True) -> None:
        with self._lock:
            self.closed = True
            pending = list(self.queue)
            self.queue.clear()
            workers = list(self.workers.values())
        for envelope in pending:
            self._fail(envelope, "runner closed")
        if notify_workers:
            for w in workers:
                if w.conn is not None and w.state != "lost":
                    w.conn.send({"type": "SHUTDOWN"})
        self._stop.set()
        try:
            self.broker.listeners.remove(self._on_published)
        except ValueError:
            pass
        self._server.stop()


class DistributedRunner(Runner):
    kind = "distributed"

    def __init__(self, config: RunnerConfig, publish: Publish, broker: Broker,
                 registry: FunctionRegistry | None = None, on_event=None):
        super().__init__(config, publish, registry)
        self.coordinator = Coordinator(config.listen_address, broker, self.registry, config.heartbeat_interval,
                                       config.worker_grace, config.requeue_limit, publish, on_event)
        self.processes: list[subprocess.Popen] = []

    @property
    def slots(self) -> int:
        return sum(w.slots for w in self.coordinator.live_workers())

    @property
    def address(self) -> str:
        return self.coordinator.address

    def start(self) -> "DistributedRunner":
        self.coordinator.start()
        if self.config.spawn_workers:
            self.spawn_local_workers(self.config.spawn_workers, self.config.concurrency)
        return self

    def spawn_local_workers(self, count: int, slots: int, prefix: str = "local") -> list[subprocess.Popen]:
        env = subprocess_env()
        started = []
        for i in range(count):
            worker_id = f"{prefix}-{len(self.processes)}"
            proc = subprocess.Popen(
                [PYTHON, "-m", "optifab", "worker", "--coordinator", self.address, "--slots", str(slots),
                 "--worker-id", worker_id],
                env=env, stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL)
            self.processes.append(proc)
            started.append(proc)
        return started

    def wait_for_workers(self, count: int, timeout: float = 30.0) -> bool:
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            if len(self.coordinator.live_workers()) >= count:
                return True
            time.sleep(0.05)
        return False

    def _dispatch(self, envelope: TaskEnvelope) -> None:
        self.coordinator.submit(envelope)

    def shutdown(self, wait: bool = True) -> None:
        super().shutdown(wait)
        self.coordinator.shutdown()
        for proc in self.processes:
            try:
                proc.wait(timeout=10 if wait else 0.1)
            except subprocess.TimeoutExpired:
                proc.kill()
                proc.wait()


# ====================================================================== worker
class Worker:
    """Worker daemon: registers, executes TASKs in ``slots`` threads, publishes results."""

    def __init__(self, coordinator_address: str, slots: int = 1, worker_id: str | None = None,
                 registry: FunctionRegistry | None = None, grace: float = 30.0,
                 connect_deadline: float | None = None):
        self.address = coordinator_address
        self.slots = slots
        self.worker_id = worker_id or f"{socket.gethostname()}-{os.getpid()}"
        self.registry = registry or default_registry
        self.grace = grace
        self.connect_deadline = connect_deadline
        self.heartbeat_interval = 5.0
        self.in_flight: set[str] = set()
        self.completed = 0
        self.draining = False
        self._stop = threading.Event()
        self._lock = threading.Lock()
        self._conn: transport.Connection | None = None
        self._pool = ThreadPoolExecutor(slots, thread_name_prefix="worker-slot")
        self._publisher: BrokerClient | None = None

    def _register(self, conn: transport.Connection) -> None:
        conn.send({"type": "REGISTER", "worker_id": self.worker_id, "slots": self.slots,
                   "registry": self.registry.manifest(), "schema_version": wire.SCHEMA_VERSION})
        reply = conn.recv()
        if reply is None:
            raise ConnectionError("coordinator closed during registration")
        if reply.get("type") != "REGISTER_ACK" or not reply.get("ok"):
            raise RegistrationRefused(reply.get("reason", "registration refused"))
        self.heartbeat_interval = float(reply["manifest"]["heartbeat_interval"])

    def run(self) -> int:
        """Serve until SHUTDOWN or :meth:`stop`.  Returns a process exit code."""
        deadline = None if self.connect_deadline is None else time.monotonic() + self.connect_deadline
        self._publisher = BrokerClient(self.address)
        try:
            while not self._stop.is_set():
                conn = transport.connect_with_backoff(self.address, self._stop, deadline=deadline)
                if conn is None:
                    return 0 if self._stop.is_set() else 1
                try:
                    self._register(conn)
                except RegistrationRefused as exc:
                    logger.error("registration refused: %s", exc)
                    conn.close()
                    return 3
                except (OSError, ValueError):
                    conn.close()
                    continue
                self._conn = conn
                deadline = None
                hb = threading.Thread(target=self._heartbeat_loop, args=(conn,), daemon=True)
                hb.start()
                if self._serve(conn):
                    break
            self._drain()
            return 0
        finally:
            self._publisher.close(flush_timeout=self.grace)
            self._pool.shutdown(wait=False)

    def _serve(self, conn: transport.Connection) -> bool:
        """Read control frames; True means shut down, False means reconnect."""
        while not self._stop.is_set():
            try:
                msg = conn.recv()
            except (OSError, ValueError):
                msg = None
            if msg is None:
                conn.close()
                return self._stop.is_set()
            kind = msg.get("type")
            if kind == "TASK":
                envelope = TaskEnvelope.from_dict(msg["envelope"])
                with self._lock:
                    self.in_flight.add(envelope.task_id)
                conn.send({"type": "TASK_ACK", "worker_id": self.worker_id, "task_id": envelope.task_id,
                           "started_at": now()})
                self._pool.submit(self._run_task, envelope)
            elif kind == "CANCEL":
                logger.info("cancel for %s ignored: tasks run to completion", msg.get("task_id"))
            elif kind == "SHUTDOWN":
                self._stop.set()
                return True
        return True

    def _run_task(self, envelope: TaskEnvelope) -> None:
        try:
            result = execute(envelope, self.registry, worker_id=self.worker_id)
        except Exception as exc:
            result = failed_result(envelope, f"worker error: {exc}", self.worker_id)
        self._publisher.publish(topic_for(envelope.experiment_id), result)
        with self._lock:
            self.in_flight.discard(envelope.task_id)
            self.completed += 1

    def _heartbeat_loop(self, conn: transport.Connection) -> None:
        while not conn.closed:
            with self._lock:
                msg = {"type": "HEARTBEAT", "worker_id": self.worker_id, "in_flight": sorted(self.in_flight),
                       "draining": self.draining}
            if not conn.send(msg):
                return
            if self._stop.wait(self.heartbeat_interval) and not self.draining:
                return

    def _drain(self) -> None:
        deadline = time.monotonic() + self.grace
        while time.monotonic() < deadline:
            with self._lock:
                if not self.in_flight:
                    break
            time.sleep(0.02)
        if self._publisher is not None:
            self._publisher.flush(max(deadline - time.monotonic(), 0.1))

    def stop(self, graceful: bool = True) -> None:
        """Stop taking work; in-flight tasks finish within the grace period."""
        with self._lock:
            self.draining = graceful
        conn = self._conn
        if graceful and conn is not None and not conn.closed:
            conn.send({"type": "HEARTBEAT", "worker_id": self.worker_id, "in_flight": sorted(self.in_flight),
                       "draining": True})
        self._stop.set()
        if conn is not None:
            # unblock the reader; results still go out on the publisher connection
            conn.close()


def install_signal_handlers(worker: Worker) -> None:
    def handler(signum, frame):
        logger.info("signal %d: draining worker %s", signum, worker.worker_id)
        worker.stop(graceful=True)

    signal.signal(signal.SIGINT, handler)
    signal.signal(signal.SIGTERM, handler)
