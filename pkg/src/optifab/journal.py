"""Append-only experiment journal, audit, and timing reports.

A journal is a ``.jsonl`` file: one header line, then one canonical-JSON
event per line::

    {"config": {...}, "config_hash": "...", "schema_version": "1", "seed": 7, "type": "header"}
    {"kind": "trial_proposed", "payload": {...}, "seq": 0, "wall_time": 1760000000.123}

Every report in this module is a pure function of the event list, so CSVs
regenerated from a journal are byte-identical to those written during the
run.
"""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import os
import threading
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

from optifab import wire
from optifab.clock import now

logger = logging.getLogger(__name__)

EVENT_KINDS = (
    "experiment_started",
    "trial_proposed",
    "task_submitted",
    "task_started",
    "result_received",
    "trial_finalized",
    "model_refit",
    "hv_computed",
    "warning",
)
INTERVAL_CLASSES = ("generation", "queue", "execution", "retrieval")

REPORT_FILES = {
    "hv_vs_trials.csv": ("trial_index", "hypervolume", "hv_stderr"),
    "hv_vs_time.csv": ("wall_seconds", "hypervolume"),
    "overhead.csv": ("interval_class", "total_seconds", "fraction"),
    "concurrency.csv": ("wall_seconds", "running_tasks"),
}


class JournalError(RuntimeError):
    pass


def config_hash(config: dict) -> str:
    return hashlib.sha256(wire.encode(config)).hexdigest()


@dataclass
class JournalContents:
    header: dict | None
    events: list[dict]
    truncated_bytes: int = 0


def _parse(data: bytes) -> tuple[dict | None, list[dict], int]:
    """Parse journal bytes; returns (header, events, length of the valid prefix)."""
    header = None
    events: list[dict] = []
    valid_end = 0
    pos = 0
    while pos < len(data):
        nl = data.find(b"\n", pos)
        if nl < 0:
            break  # unterminated line: torn write
        line = data[pos:nl]
        try:
            record = wire.decode(line)
        except ValueError:
            break
        if header is None:
            if record.get("type") != "header":
                break
            header = record
        else:
            if record.get("seq") != len(events) or record.get("kind") not in EVENT_KINDS:
                break
            events.append(record)
        pos = nl + 1
        valid_end = pos
    return header, events, valid_end


def read_journal(path: str | Path) -> JournalContents:
    """Read the valid prefix of a journal; a torn or corrupt tail is reported, not fatal."""
    path = Path(path)
    if not path.exists():
        return JournalContents(None, [], 0)
    data = path.read_bytes()
    header, events, valid_end = _parse(data)
    dropped = len(data) - valid_end
    if dropped:
        logger.warning("journal %s: ignoring %d byte(s) of corrupt tail", path, dropped)
    return JournalContents(header, events, dropped)


class Journal:
    """Single-writer journal.  Every append is flushed and fsynced before returning."""

    def __init__(self, path: str | Path, header: dict, fsync: bool = True):
        self.path = Path(path)
        self.fsync = fsync
        self._lock = threading.Lock()
        self.path.parent.mkdir(parents=True, exist_ok=True)
        contents = read_journal(self.path)
        if contents.header is None and self.path.exists() and b"\n" in self.path.read_bytes():
            raise JournalError(f"{self.path} exists but is not a journal")
        self.events = list(contents.events)
        self.recovered_tail = contents.truncated_bytes
        if contents.header is None:
            self.header = {"type": "header", "schema_version": wire.SCHEMA_VERSION, **header}
            with open(self.path, "wb") as fh:
                fh.write(wire.encode(self.header) + b"\n")
                self._sync(fh)
            self.events = []
        else:
            self.header = contents.header
            if contents.truncated_bytes:
                valid = self.path.stat().st_size - contents.truncated_bytes
                with open(self.path, "r+b") as fh:
                    fh.truncate(valid)
                    self._sync(fh)
        self._fh = open(self.path, "ab")
        if contents.truncated_bytes:
            self.append("warning", {"code": "journal_tail_truncated", "bytes": contents.truncated_bytes})

    def _sync(self, fh) -> None:
        fh.flush()
        if self.fsync:
            os.fsync(fh.fileno())

    @property
    def next_seq(self) -> int:
        return len(self.events)

    def append(self, kind: str, payload: dict, wall_time: float | None = None) -> int:
        return self.append_many([(kind, payload, wall_time)])[0]

    def append_many(self, items) -> list[int]:
        """Append several events with a single write and fsync."""
        with self._lock:
            records = []
            for kind, payload, *rest in items:
                if kind not in EVENT_KINDS:
                    raise JournalError(f"unknown event kind {kind!r}")
                wall_time = rest[0] if rest and rest[0] is not None else now()
                records.append({"seq": len(self.events) + len(records), "wall_time": wall_time,
                                "kind": kind, "payload": payload})
            blob = b"".join(wire.encode(r) + b"\n" for r in records)
            try:
                self._fh.write(blob)
                self._sync(self._fh)
            except OSError as exc:
                raise JournalError(f"journal write failed: {exc}") from exc
            self.events.extend(records)
            return [r["seq"] for r in records]

    def close(self) -> None:
        with self._lock:
            if not self._fh.closed:
                self._fh.close()


# ====================================================================== audit
@dataclass
class AuditReport:
    problems: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.problems


def audit(events: list[dict], require_complete: bool = False, hv_tolerance: float = 0.0) -> AuditReport:
    """Check bijection, causality, and hypervolume monotonicity of an event list."""
    report = AuditReport()
    proposed: dict[int, int] = defaultdict(int)
    finalized: dict[int, int] = defaultdict(int)
    task_stage: dict[str, str] = {}
    order = {"task_submitted": 0, "task_started": 1, "result_received": 2}
    last_hv = None
    for i, ev in enumerate(events):
        if ev.get("seq") != i:
            report.problems.append(f"event {i}: sequence {ev.get('seq')} is not contiguous")
        kind, p = ev["kind"], ev["payload"]
        if kind == "trial_proposed":
            proposed[p["trial_id"]] += 1
        elif kind == "trial_finalized":
            tid = p["trial_id"]
            if not proposed.get(tid):
                report.problems.append(f"trial {tid} finalized before it was proposed")
            finalized[tid] += 1
        elif kind in order:
            task_id = p["task_id"]
            prev = task_stage.get(task_id)
            if kind == "task_submitted":
                if not proposed.get(p["trial_id"]):
                    report.problems.append(f"task {task_id} submitted for an unproposed trial")
            elif prev is None:
                report.problems.append(f"{kind} for task {task_id} that was never submitted")
            elif order[prev] >= order[kind]:
                report.problems.append(f"{kind} for task {task_id} out of causal order (after {prev})")
            task_stage[task_id] = kind
        elif kind == "hv_computed":
            hv = p["hypervolume"]
            if last_hv is not None and hv < last_hv - hv_tolerance:
                report.problems.append(f"hypervolume decreased at seq {i}: {last_hv} -> {hv}")
            last_hv = hv if last_hv is None else max(hv, last_hv)
    for tid, count in sorted(proposed.items()):
        if count != 1:
            report.problems.append(f"trial {tid} proposed {count} times")
    for tid, count in sorted(finalized.items()):
        if count != 1:
            report.problems.append(f"trial {tid} finalized {count} times")
    if require_complete:
        for tid in sorted(set(proposed) - set(finalized)):
            report.problems.append(f"trial {tid} never finalized")
    return report


# ====================================================================== timing
@dataclass
class TimingTrace:
    trial_id: int
    proposed_at: float | None = None
    submitted_at: float | None = None
    started_at: float | None = None
    finished_at: float | None = None
    received_at: float | None = None
    finalized_at: float | None = None
    generation: float = 0.0
    queue: float = 0.0
    execution: float = 0.0
    retrieval: float = 0.0
    attempts: int = 0

    def intervals(self) -> dict[str, float]:
        return {c: getattr(self, c) for c in INTERVAL_CLASSES}


@dataclass
class Execution:
    """One attempt's execution interval as reported by the worker."""

    task_id: str
    worker_id: str
    submitted_at: float
    started_at: float
    finished_at: float
    received_at: float


def executions(events: list[dict]) -> list[Execution]:
    submitted: dict[str, float] = {}
    out = []
    for ev in events:
        p = ev["payload"]
        if ev["kind"] == "task_submitted":
            submitted[p["task_id"]] = p["submitted_at"]
        elif ev["kind"] == "result_received":
            sub = submitted.get(p["task_id"], p["started_at"])
            out.append(Execution(p["task_id"], p.get("worker_id", ""), sub, p["started_at"], p["finished_at"],
                                 p["received_at"]))
    return out


def timing_traces(events: list[dict]) -> dict[int, TimingTrace]:
    traces: dict[int, TimingTrace] = {}
    submitted: dict[str, float] = {}
    for ev in events:
        kind, p = ev["kind"], ev["payload"]
        if kind == "trial_proposed":
            traces[p["trial_id"]] = TimingTrace(p["trial_id"], proposed_at=ev["wall_time"],
                                                generation=float(p.get("generation_seconds", 0.0)))
            continue
        tid = p.get("trial_id")
        trace = traces.get(tid) if tid is not None else None
        if trace is None:
            continue
        if kind == "task_submitted":
            submitted[p["task_id"]] = p["submitted_at"]
            if trace.submitted_at is None:
                trace.submitted_at = p["submitted_at"]
        elif kind == "result_received":
            sub = submitted.get(p["task_id"])
            started, finished, received = p["started_at"], p["finished_at"], p["received_at"]
            if sub is not None:
                trace.queue += max(started - sub, 0.0)
                trace.execution += max(finished - started, 0.0)
                trace.retrieval += max(received - finished, 0.0)
            trace.attempts += 1
            if trace.started_at is None:
                trace.started_at = started
            trace.finished_at = finished
            trace.received_at = received
        elif kind == "trial_finalized":
            trace.finalized_at = ev["wall_time"]
    return traces


@dataclass
class OverheadReport:
    totals: dict[str, float]
    fractions: dict[str, float]
    concurrency: list[tuple[float, int]]

    @property
    def max_concurrency(self) -> int:
        return max((c for _, c in self.concurrency), default=0)


def experiment_start(events: list[dict]) -> float | None:
    for ev in events:
        if ev["kind"] == "experiment_started":
            return ev["wall_time"]
    return events[0]["wall_time"] if events else None


def concurrency_profile(events: list[dict], per_worker: bool = False):
    """Running-task count at every start/finish boundary, finishes before starts on ties."""
    t0 = experiment_start(events) or 0.0
    groups: dict[str, list[tuple[float, int]]] = defaultdict(list)
    for ex in executions(events):
        if ex.finished_at <= ex.started_at:
            continue  # never ran (e.g. refused by a closed runner)
        key = ex.worker_id if per_worker else ""
        groups[key].append((ex.started_at, 1))
        groups[key].append((ex.finished_at, -1))
    out = {}
    for key, marks in groups.items():
        marks.sort(key=lambda item: (item[0], item[1]))
        running = 0
        profile = []
        for t, delta in marks:
            running += delta
            profile.append((t - t0, running))
        out[key] = profile
    if per_worker:
        return out
    return out.get("", [])


def overhead_report(events: list[dict]) -> OverheadReport:
    totals = {c: 0.0 for c in INTERVAL_CLASSES}
    for trace in timing_traces(events).values():
        for c, v in trace.intervals().items():
            totals[c] += v
    grand = sum(totals.values())
    fractions = {c: (totals[c] / grand if grand > 0 else 0.0) for c in INTERVAL_CLASSES}
    return OverheadReport(totals, fractions, concurrency_profile(events))


def evaluation_makespan(events: list[dict]) -> float:
    """Length of the union of [submitted, finished] intervals over all attempts.

    Time the driver spends between batches generating proposals is excluded,
    so this isolates how long the runner kept work in flight.
    """
    spans = sorted((ex.submitted_at, ex.finished_at) for ex in executions(events))
    total = 0.0
    cur_lo = cur_hi = None
    for lo, hi in spans:
        if cur_hi is None or lo > cur_hi:
            if cur_hi is not None:
                total += cur_hi - cur_lo
            cur_lo, cur_hi = lo, hi
        else:
            cur_hi = max(cur_hi, hi)
    if cur_hi is not None:
        total += cur_hi - cur_lo
    return total


# ====================================================================== reports
def hv_rows(events: list[dict]) -> list[dict]:
    return [ev["payload"] | {"wall_time": ev["wall_time"]} for ev in events if ev["kind"] == "hv_computed"]


def _csv(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def render_reports(events: list[dict]) -> dict[str, str]:
    """All report CSVs as text, keyed by file name."""
    t0 = experiment_start(events) or 0.0
    hv = hv_rows(events)
    overhead = overhead_report(events)
    return {
        "hv_vs_trials.csv": _csv(REPORT_FILES["hv_vs_trials.csv"],
                                 [(r["trial_index"], float(r["hypervolume"]), float(r["hv_stderr"])) for r in hv]),
        "hv_vs_time.csv": _csv(REPORT_FILES["hv_vs_time.csv"],
                               [(float(r["wall_time"] - t0), float(r["hypervolume"])) for r in hv]),
        "overhead.csv": _csv(REPORT_FILES["overhead.csv"],
                             [(c, float(overhead.totals[c]), float(overhead.fractions[c]))
                              for c in INTERVAL_CLASSES] if hv or overhead.concurrency else []),
        "concurrency.csv": _csv(REPORT_FILES["concurrency.csv"],
                                [(float(t), n) for t, n in overhead.concurrency]),
    }


def write_reports(events: list[dict], out_dir: str | Path) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, text in render_reports(events).items():
        path = out_dir / name
        path.write_text(text)
        paths[name] = path
    return paths


def final_statuses(events: list[dict]) -> dict[int, dict]:
    return {ev["payload"]["trial_id"]: ev["payload"] for ev in events if ev["kind"] == "trial_finalized"}


def summary(events: list[dict]) -> str:
    finals = final_statuses(events)
    counts = {s: 0 for s in ("valid", "invalid", "failed")}
    for p in finals.values():
        counts[p["status"]] += 1
    proposed = sum(1 for ev in events if ev["kind"] == "trial_proposed")
    hv = hv_rows(events)
    overhead = overhead_report(events)
    warnings = sum(1 for ev in events if ev["kind"] == "warning")
    lines = [
        f"trials proposed: {proposed}",
        f"trials finalized: {len(finals)} (valid {counts['valid']}, invalid {counts['invalid']}, "
        f"failed {counts['failed']})",
    ]
    if hv:
        last = hv[-1]
        se = f" +/- {last['hv_stderr']:.2g}" if last["hv_stderr"] else ""
        lines.append(f"final hypervolume: {last['hypervolume']:.6f}{se}")
    else:
        lines.append("final hypervolume: n/a")
    lines.append("overhead fractions: " + ", ".join(
        f"{c} {overhead.fractions[c]:.3f} ({overhead.totals[c]:.2f} s)" for c in INTERVAL_CLASSES))
    lines.append(f"max concurrent tasks: {overhead.max_concurrency}")
    lines.append(f"warnings: {warnings}")
    return "\n".join(lines)
