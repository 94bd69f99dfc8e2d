"""The optimize -> dispatch -> aggregate loop.

:class:`Experiment` owns one optimizer, one runner, one embedded broker and
one journal.  Results arrive on channel threads and are handed to the main
thread through a queue, so every optimizer mutation and every journal
decision happens on a single thread.

Synchronous mode proposes a batch, waits for the whole batch, and tells the
outcomes in trial_id order; that makes the proposal sequence a function of
the seed alone, whatever order the runner finishes tasks in.  Asynchronous
mode keeps ``batch_size`` trials in flight and proposes one replacement per
finalized trial.
"""

from __future__ import annotations

import logging
import queue
import shutil
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from optifab import journal as jr
from optifab import transport
from optifab.channel import Broker, BrokerClient, BrokerService, ResultConsumer, topic_for
from optifab.clock import EPOCH_OFFSET, now
from optifab.config import ExperimentConfig
from optifab.optimizer import DesignSpace, Optimizer
from optifab.pareto import hypervolume
from optifab.runners import make_runner
from optifab.tasks import (
    FINALIZE,
    DedupGate,
    FunctionRegistry,
    ResultEnvelope,
    TaskEnvelope,
    envelope_for,
    parse_task_id,
    retry_policy,
)

logger = logging.getLogger(__name__)


IGNORED = "ignored"  # decision recorded for a late copy of a superseded attempt


class ResumeError(RuntimeError):
    pass


class Interrupted(Exception):
    """Raised internally when ``stop_after`` trials have been finalized."""


@dataclass
class _Trial:
    trial_id: int
    design: list[float]
    envelope: TaskEnvelope | None = None
    awaiting: bool = False  # a submission is outstanding
    final: ResultEnvelope | None = None  # decided outcome not yet told
    done: bool = False


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    events: list[dict]
    outcomes: dict[int, tuple[str, list[float] | None]]
    archive: np.ndarray
    final_hypervolume: float
    final_stderr: float
    interrupted: bool
    report_paths: dict[str, Path] = field(default_factory=dict)

    def trial_set(self) -> set[tuple[int, tuple[float, ...] | None]]:
        """{(trial_id, objectives)} over finalized trials, the backend-equivalence key."""
        return {(tid, None if f is None else tuple(f)) for tid, (_, f) in self.outcomes.items()}

    @property
    def makespan(self) -> float:
        return jr.evaluation_makespan(self.events)


def broker_dir_for(journal_path: str | Path) -> Path:
    path = Path(journal_path)
    return path.with_name(path.name + ".broker")


class Experiment:
    """One optimization run, fresh or resumed from its journal.

    Args:
        config: Validated experiment configuration.
        resume: Continue from an existing journal instead of refusing to
            touch it.
        registry: Function registry for in-process execution and for the
            coordinator's version manifest.
        stop_after: Stop abruptly once this many trials are finalized, leaving
            the journal exactly as a crash at that point would.
        on_finalized: Called on the driver thread as ``fn(experiment, count)``
            after each finalization is journaled.
        fsync: Forwarded to the journal and broker logs; tests may disable it.
    """

    def __init__(self, config: ExperimentConfig, resume: bool = False, registry: FunctionRegistry | None = None,
                 stop_after: int | None = None, on_finalized: Callable[["Experiment", int], None] | None = None,
                 fsync: bool = True):
        config.validate()
        self.config = config
        self.resume = resume
        self.registry = registry
        self.stop_after = stop_after
        self.on_finalized = on_finalized
        self.fsync = fsync
        self.problem = config.problem
        self.opt_cfg = config.optimizer
        self.topic = topic_for(config.experiment_id)
        self.ref = config.hv.resolved_ref(self.problem.m)
        self.lower = config.hv.resolved_lower(self.problem.m)
        self.trials: dict[int, _Trial] = {}
        self.finalized = 0
        self.hv = (0.0, 0.0)
        self._archive_size = -1
        self._cursor = 0
        self._inbox: queue.Queue = queue.Queue()
        self._pending_events: list[tuple[str, dict]] = []
        self.runner = None
        self.consumer: ResultConsumer | None = None
        self._client: BrokerClient | None = None
        self._server: transport.FrameServer | None = None
        self.broker: Broker | None = None
        self.journal: jr.Journal | None = None

    # ------------------------------------------------------------------ setup
    def _header(self) -> dict:
        cfg = self.config.to_dict()
        return {"seed": self.opt_cfg.rng_seed, "config_hash": jr.config_hash(cfg), "config": cfg}

    def _open_journal(self) -> list[dict]:
        path = Path(self.config.journal_path)
        existing = jr.read_journal(path)
        if existing.header is not None and existing.events:
            if not self.resume:
                raise ResumeError(f"{path} already holds a run; resume it or choose another journal_path")
            if existing.header.get("seed") != self.opt_cfg.rng_seed:
                raise ResumeError(f"journal seed {existing.header.get('seed')} does not match "
                                  f"config seed {self.opt_cfg.rng_seed}")
            if existing.header.get("config_hash") != jr.config_hash(self.config.to_dict()):
                logger.warning("resuming with a config that differs from the journal header")
        fresh = existing.header is None or not existing.events
        if fresh:
            if path.exists() and (existing.header is not None or path.stat().st_size == 0):
                path.unlink()  # header-only or empty: nothing to keep
            stale = broker_dir_for(path)
            if stale.exists():
                shutil.rmtree(stale)  # results of a run whose journal is gone
        self.journal = jr.Journal(path, self._header(), fsync=self.fsync)
        return [] if fresh else list(self.journal.events)

    def _publish_local(self, result: ResultEnvelope) -> None:
        self.broker.publish(topic_for(parse_task_id(result.task_id)[0]), result)

    def _publish_remote(self, result: ResultEnvelope) -> None:
        self._client.publish(topic_for(parse_task_id(result.task_id)[0]), result)

    def _start_channel(self) -> None:
        self.broker = Broker(broker_dir_for(self.config.journal_path), fsync=self.fsync)
        self._tcp = self.config.channel.transport == "tcp"
        if self._tcp and self.config.runner.kind != "distributed":
            service = BrokerService(self.broker)
            self._server = transport.FrameServer(self.config.channel.address, service.handle,
                                                 service.on_close, "broker").start()
            self.broker_address = self._server.address

    def _start_runner(self) -> None:
        publish = self._publish_remote if self._tcp else self._publish_local
        if self._tcp and self.config.runner.kind != "distributed":
            self._client = BrokerClient(self.broker_address)
        self.runner = make_runner(self.config.runner, self._publish_local if self.config.runner.kind ==
                                  "distributed" else publish, self.broker, self.registry, self._on_async_event)
        self.runner.start()
        if self.config.runner.kind == "distributed":
            self.broker_address = self.runner.address
            logger.info("coordinator listening on %s", self.runner.address)

    def _start_consumer(self) -> None:
        source = BrokerClient(self.broker_address) if self._tcp else self.broker
        if self._tcp:
            self._consumer_client = source
        # resume after the last journaled record, unless the topic log is shorter than that
        cursor = min(self._cursor, self.broker.length(self.topic))
        self.consumer = ResultConsumer(source, self.topic, self._on_record, cursor, self.config.channel.mode)

    def restart_broker(self, downtime: float = 0.5) -> None:
        """Stop the TCP broker, drop its in-memory state, and bring it back from its log."""
        if self._server is None:
            raise RuntimeError("broker restart needs channel.transport = 'tcp' with a local runner")
        address = self._server.address
        self._server.stop()
        self.broker.close()
        time.sleep(downtime)
        self.broker = Broker(broker_dir_for(self.config.journal_path), fsync=self.fsync)
        service = BrokerService(self.broker)
        self._server = transport.FrameServer(address, service.handle, service.on_close, "broker").start()

    # ------------------------------------------------------------------ events
    def _on_record(self, seq: int, record: dict) -> None:
        self._inbox.put(("result", seq, record))

    def _on_async_event(self, kind: str, payload: dict) -> None:
        self._inbox.put(("event", kind, payload))

    def _on_optimizer_event(self, kind: str, payload: dict) -> None:
        self._pending_events.append((kind, payload))

    # ------------------------------------------------------------------ replay
    def _replay(self, events: list[dict], dedup: DedupGate) -> None:
        for ev in events:
            kind, p = ev["kind"], ev["payload"]
            if kind == "trial_proposed":
                self.optimizer.restore_proposal(p["trial_id"], p["design"])
                self.trials[p["trial_id"]] = _Trial(p["trial_id"], p["design"])
            elif kind == "model_refit":
                self.optimizer.restore_refit(p)
            elif kind == "task_submitted":
                trial = self.trials[p["trial_id"]]
                trial.envelope = TaskEnvelope.from_dict(p["envelope"])
                trial.awaiting = True
            elif kind == "result_received":
                dedup.seed([p["task_id"]])
                if "broker_seq" in p:
                    self._cursor = max(self._cursor, p["broker_seq"] + 1)
                trial = self.trials[p["trial_id"]]
                if p["decision"] == IGNORED:
                    continue
                trial.awaiting = False
                if p["decision"] == FINALIZE:
                    trial.final = ResultEnvelope.from_dict(p["result"])
            elif kind == "trial_finalized":
                trial = self.trials[p["trial_id"]]
                self.optimizer.tell(p["trial_id"], p["objectives"] if p["status"] == "valid" else p["status"])
                trial.final, trial.done, trial.awaiting = None, True, False
                self.finalized += 1
            elif kind == "hv_computed":
                self.hv = (p["hypervolume"], p["hv_stderr"])
                self._archive_size = p["archive_size"]

    def _resubmit_outstanding(self) -> None:
        for tid in sorted(self.trials):
            trial = self.trials[tid]
            if trial.done or trial.final is not None:
                continue
            if trial.envelope is None:
                envelope = envelope_for(self.config.experiment_id, tid, trial.design, self.problem,
                                        self.config.task.max_attempts, self.config.task.timeout)
            elif trial.awaiting:
                envelope = trial.envelope  # same attempt: its result may already be in the topic log
            else:
                envelope = trial.envelope.next_attempt()
            self._submit([(trial, envelope)])

    # ------------------------------------------------------------------ dispatch
    def _submit(self, items: list[tuple[_Trial, TaskEnvelope]], prefix: list[tuple] = ()) -> None:
        t = now()
        records = list(prefix)
        for trial, envelope in items:
            envelope.submitted_at = t
            trial.envelope = envelope
            trial.awaiting = True
            records.append(("task_submitted", {"task_id": envelope.task_id, "trial_id": trial.trial_id,
                                               "attempt": envelope.attempt, "submitted_at": t,
                                               "envelope": envelope.to_dict()}, t))
        self.journal.append_many(records)
        for trial, envelope in items:
            self.optimizer.mark_running(trial.trial_id)
            self.runner.submit(envelope)

    def _propose(self, count: int) -> None:
        started = now()
        self._pending_events = []
        designs = self.optimizer.propose(count)
        elapsed = now() - started
        first = len(self.trials)
        records = [(kind, payload) for kind, payload in self._pending_events]
        items = []
        for k, design in enumerate(designs):
            tid = first + k
            trial = _Trial(tid, [float(v) for v in design])
            self.trials[tid] = trial
            records.append(("trial_proposed", {"trial_id": tid, "design": trial.design, "batch_size": count,
                                               "generation_seconds": elapsed / count}))
            items.append((trial, envelope_for(self.config.experiment_id, tid, trial.design, self.problem,
                                              self.config.task.max_attempts, self.config.task.timeout)))
        self._pending_events = []
        self._submit(items, prefix=records)

    def _handle_record(self, seq: int, record: dict, dedup: DedupGate) -> _Trial | None:
        """Journal an admitted result and apply the retry policy; returns the trial if it is decided."""
        try:
            result = ResultEnvelope.from_dict(record)
            exp, tid, attempt = parse_task_id(result.task_id)
        except (KeyError, TypeError, ValueError) as exc:
            self.journal.append("warning", {"code": "unreadable_result", "error": str(exc)})
            return None
        trial = self.trials.get(tid)
        if exp != self.config.experiment_id or trial is None or trial.envelope is None \
                or attempt > trial.envelope.attempt:
            self.journal.append("warning", {"code": "unknown_task", "task_id": result.task_id})
            return None
        if not dedup.admit(result):
            self._flush_dedup_events()
            return None
        envelope = trial.envelope if attempt == trial.envelope.attempt else None
        decision = IGNORED if envelope is None or trial.done else retry_policy(result, envelope)
        received = now()
        base = {"task_id": result.task_id, "trial_id": tid, "attempt": attempt}
        records = [
            ("task_started", {**base, "started_at": result.started_at, "worker_id": result.worker_id}),
            ("result_received", {**base, "status": result.status, "started_at": result.started_at,
                                 "finished_at": result.finished_at, "received_at": received,
                                 "worker_id": result.worker_id, "decision": decision, "broker_seq": seq,
                                 "result": result.to_dict()}, received),
        ]
        if decision == IGNORED:
            self.journal.append_many(records)  # a late copy of an older attempt: recorded, not acted on
            return None
        trial.awaiting = False
        if decision == FINALIZE:
            self.journal.append_many(records)
            trial.final = result
            return trial
        self._submit([(trial, envelope.next_attempt())], prefix=records)
        return None

    def _flush_dedup_events(self) -> None:
        events, self._dedup_events = self._dedup_events, []
        if events:
            self.journal.append_many(events)

    def _finalize(self, trial: _Trial) -> None:
        result = trial.final
        outcome = result.objectives if result.status == "valid" else result.status
        self.optimizer.tell(trial.trial_id, outcome)
        trial.done, trial.final = True, None
        self.finalized += 1
        archive = self.optimizer.archive_objectives()
        if len(archive) != self._archive_size or result.status == "valid":
            self.hv = hypervolume(archive, self.ref, self.config.hv.samples, self.config.hv.seed, self.lower) \
                if len(archive) else (0.0, 0.0)
            self._archive_size = len(archive)
        t = now()
        self.journal.append_many([
            ("trial_finalized", {"trial_id": trial.trial_id, "status": result.status,
                                 "objectives": result.objectives, "attempts": parse_task_id(result.task_id)[2],
                                 "task_id": result.task_id}, t),
            ("hv_computed", {"trial_index": self.finalized, "trial_id": trial.trial_id,
                             "hypervolume": float(self.hv[0]), "hv_stderr": float(self.hv[1]),
                             "archive_size": self._archive_size}, t),
        ])
        if self.on_finalized is not None:
            self.on_finalized(self, self.finalized)
        if self.stop_after is not None and self.finalized >= self.stop_after:
            raise Interrupted

    def _drain_inbox(self, dedup: DedupGate, timeout: float) -> list[_Trial]:
        decided = []
        try:
            item = self._inbox.get(timeout=timeout)
        except queue.Empty:
            return decided
        while True:
            if item[0] == "result":
                trial = self._handle_record(item[1], item[2], dedup)
                if trial is not None:
                    decided.append(trial)
            else:
                self.journal.append(item[1], item[2])
            try:
                item = self._inbox.get_nowait()
            except queue.Empty:
                return decided

    # ------------------------------------------------------------------ loops
    def _loop_synchronous(self, dedup: DedupGate) -> None:
        max_trials, q = self.opt_cfg.max_trials, self.opt_cfg.batch_size
        while self.finalized < max_trials:
            open_trials = [t for t in self.trials.values() if not t.done]
            if not open_trials:
                self._propose(min(q, max_trials - len(self.trials)))
                continue
            if all(t.final is not None for t in open_trials):
                for trial in sorted(open_trials, key=lambda t: t.trial_id):
                    self._finalize(trial)
                continue
            self._drain_inbox(dedup, 0.2)

    def _loop_asynchronous(self, dedup: DedupGate) -> None:
        max_trials, q = self.opt_cfg.max_trials, self.opt_cfg.batch_size
        for trial in sorted((t for t in self.trials.values() if t.final is not None and not t.done),
                            key=lambda t: t.trial_id):
            self._finalize(trial)
        while self.finalized < max_trials:
            in_flight = sum(1 for t in self.trials.values() if not t.done)
            room = min(q - in_flight, max_trials - len(self.trials))
            if room > 0:
                self._propose(room)
                continue
            for trial in self._drain_inbox(dedup, 0.2):
                self._finalize(trial)

    # ------------------------------------------------------------------ run
    def run(self) -> ExperimentResult:
        space = DesignSpace(self.problem.bounds())
        self.optimizer = Optimizer(space, self.problem.m, self.opt_cfg, self._on_optimizer_event)
        self._dedup_events: list[tuple] = []
        dedup = DedupGate(on_event=lambda kind, payload: self._dedup_events.append((kind, payload)))
        history = self._open_journal()
        interrupted = False
        try:
            self._replay(history, dedup)
            self._pending_events = []
            self._start_channel()
            self._start_runner()
            self.journal.append("experiment_started", {
                "experiment_id": self.config.experiment_id, "resumed": bool(history),
                "runner": self.config.runner.kind, "concurrency": self.config.runner.concurrency,
                "generation_mode": self.opt_cfg.generation_mode, "epoch_offset": EPOCH_OFFSET,
                "broker_address": getattr(self, "broker_address", None)})
            self._start_consumer()
            self._resubmit_outstanding()
            if self.opt_cfg.generation_mode == "synchronous":
                self._loop_synchronous(dedup)
            else:
                self._loop_asynchronous(dedup)
        except Interrupted:
            interrupted = True
        finally:
            self._teardown(graceful=not interrupted)
        events = list(self.journal.events)
        reports = {}
        if not interrupted:
            reports = jr.write_reports(events, self.config.report_dir)
        outcomes = {tid: (p["status"], p["objectives"]) for tid, p in jr.final_statuses(events).items()}
        return ExperimentResult(self.config, events, outcomes, self.optimizer.archive_objectives(),
                                float(self.hv[0]), float(self.hv[1]), interrupted, reports)

    def _teardown(self, graceful: bool) -> None:
        if self.consumer is not None:
            self.consumer.close()
        if getattr(self, "_consumer_client", None) is not None:
            self._consumer_client.close(flush_timeout=None)
        if self.runner is not None:
            self.runner.shutdown(wait=graceful)
        if self._client is not None:
            self._client.close(flush_timeout=5.0 if graceful else None)
        if self._server is not None:
            self._server.stop()
        if self.broker is not None:
            self.broker.close()
        if self.journal is not None:
            self.journal.close()


def run_experiment(config: ExperimentConfig, **kwargs) -> ExperimentResult:
    return Experiment(config, **kwargs).run()
