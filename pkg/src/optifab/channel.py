"""Result channel: a durable topic-log broker with push and poll consumers.

Records are appended to one log file per topic (length-prefixed canonical
JSON frames ``{"seq": n, "record": {...}}``), fsynced before the publish is
acknowledged.  Sequence numbers are contiguous from 0 per topic.  Delivery is
at-least-once; consumers deduplicate by task_id downstream.

The same operations are available in-process (:class:`Broker`) and over TCP
(:class:`BrokerService` on the server side, :class:`BrokerClient` on the
client side), so callers can switch transports without code changes.
"""

from __future__ import annotations

import itertools
import logging
import os
import queue
import re
import threading
import time
from concurrent.futures import Future
from pathlib import Path
from typing import Callable

from optifab import transport, wire
from optifab.transport import Connection

logger = logging.getLogger(__name__)

BUFFER_LIMIT = 10_000
FALLBACK_AFTER_FAILURES = 3

Record = dict
Callback = Callable[[int, Record], None]


def topic_for(experiment_id: str) -> str:
    return f"results/{experiment_id}"


def _to_record(payload) -> Record:
    return payload.to_dict() if hasattr(payload, "to_dict") else dict(payload)


class TopicLog:
    def __init__(self, name: str, path: Path | None, fsync: bool = True):
        self.name = name
        self.path = path
        self.fsync = fsync
        self.records: list[Record] = []
        self.cond = threading.Condition()
        self._fh = None
        if path is not None:
            self._open(path)

    def _open(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        if path.exists():
            with open(path, "rb") as fh:
                frames, valid_end = wire.read_frames(fh)
            if valid_end < path.stat().st_size:
                logger.warning("topic log %s: truncating torn tail at byte %d", path, valid_end)
                with open(path, "r+b") as fh:
                    fh.truncate(valid_end)
            for i, frame in enumerate(frames):
                if frame.get("seq") != i:
                    raise ValueError(f"topic log {path} has a sequence gap at frame {i}")
                self.records.append(frame["record"])
        self._fh = open(path, "ab")

    def append(self, record: Record) -> int:
        with self.cond:
            seq = len(self.records)
            if self._fh is not None:
                self._fh.write(wire.pack_frame({"seq": seq, "record": record}))
                self._fh.flush()
                if self.fsync:
                    os.fsync(self._fh.fileno())
            self.records.append(record)
            self.cond.notify_all()
            return seq

    def read(self, cursor: int, max_items: int | None = None) -> list[tuple[int, Record]]:
        with self.cond:
            end = len(self.records) if max_items is None else min(len(self.records), cursor + max_items)
            return [(i, self.records[i]) for i in range(max(cursor, 0), end)]

    def __len__(self) -> int:
        with self.cond:
            return len(self.records)

    def close(self) -> None:
        with self.cond:
            if self._fh is not None:
                self._fh.close()
                self._fh = None
            self.cond.notify_all()


class Subscription:
    """Delivers ``(seq, record)`` in order on its own thread until closed."""

    def __init__(self, log: TopicLog, from_cursor: int, callback: Callback):
        self.log = log
        self.cursor = max(from_cursor, 0)
        self.callback = callback
        self._closed = threading.Event()
        self._thread = threading.Thread(target=self._run, name=f"sub-{log.name}", daemon=True)
        self._thread.start()

    def _run(self) -> None:
        while not self._closed.is_set():
            with self.log.cond:
                while len(self.log.records) <= self.cursor and not self._closed.is_set():
                    self.log.cond.wait(0.5)
                batch = self.log.records[self.cursor:]
            for record in batch:
                if self._closed.is_set():
                    return
                try:
                    self.callback(self.cursor, record)
                except Exception:
                    logger.exception("subscriber callback failed at seq %d", self.cursor)
                self.cursor += 1

    def close(self) -> None:
        self._closed.set()
        with self.log.cond:
            self.log.cond.notify_all()
        if threading.current_thread() is not self._thread:
            self._thread.join(timeout=5)


class Broker:
    """In-process topic-log broker; ``log_dir=None`` keeps topics in memory only."""

    def __init__(self, log_dir: str | Path | None = None, fsync: bool = True):
        self.log_dir = Path(log_dir) if log_dir is not None else None
        self.fsync = fsync
        self._topics: dict[str, TopicLog] = {}
        self._lock = threading.Lock()
        self._subs: list[Subscription] = []
        self.listeners: list[Callable[[str, int, Record], None]] = []

    def _topic(self, name: str) -> TopicLog:
        if not name or ".." in name:
            raise ValueError(f"invalid topic name {name!r}")
        with self._lock:
            log = self._topics.get(name)
            if log is None:
                path = None
                if self.log_dir is not None:
                    path = self.log_dir / (re.sub(r"[^A-Za-z0-9_.-]", "__", name) + ".log")
                log = self._topics[name] = TopicLog(name, path, self.fsync)
            return log

    def publish(self, topic: str, payload) -> int:
        record = _to_record(payload)
        seq = self._topic(topic).append(record)
        for listener in list(self.listeners):
            listener(topic, seq, record)
        return seq

    def subscribe(self, topic: str, from_cursor: int, callback: Callback) -> Subscription:
        sub = Subscription(self._topic(topic), from_cursor, callback)
        with self._lock:
            self._subs.append(sub)
        return sub

    def poll(self, topic: str, cursor: int, max_items: int) -> tuple[list[tuple[int, Record]], int]:
        records = self._topic(topic).read(cursor, max_items)
        next_cursor = records[-1][0] + 1 if records else max(cursor, 0)
        return records, next_cursor

    def length(self, topic: str) -> int:
        return len(self._topic(topic))

    def close(self) -> None:
        with self._lock:
            subs, self._subs = self._subs, []
            topics = list(self._topics.values())
        for sub in subs:
            sub.close()
        for log in topics:
            log.close()


def read_topic_log(path: str | Path) -> list[tuple[int, Record]]:
    """Audit helper: all valid frames of a topic log file."""
    with open(path, "rb") as fh:
        frames, _ = wire.read_frames(fh)
    return [(f["seq"], f["record"]) for f in frames]


# ---------------------------------------------------------------- TCP service
class BrokerService:
    """Server-side handler for SUB / PUB / POLL messages on a :class:`FrameServer`."""

    MESSAGE_TYPES = ("SUB", "PUB", "POLL")

    def __init__(self, broker: Broker):
        self.broker = broker

    def handle(self, conn: Connection, msg: dict) -> None:
        kind = msg.get("type")
        if kind == "PUB":
            seq = self.broker.publish(msg["topic"], msg["record"])
            conn.send({"type": "ACK", "msg_id": msg.get("msg_id"), "seq": seq})
        elif kind == "POLL":
            records, next_cursor = self.broker.poll(msg["topic"], int(msg["cursor"]), int(msg["max_items"]))
            conn.send({"type": "ACK", "msg_id": msg.get("msg_id"), "next_cursor": next_cursor,
                       "records": [{"seq": s, "record": r} for s, r in records]})
        elif kind == "SUB":
            topic = msg["topic"]

            def push(seq: int, record: Record, _conn=conn, _topic=topic) -> None:
                # a failed send closes the connection; on_close then drops the subscription
                _conn.send({"type": "PUB", "topic": _topic, "seq": seq, "record": record})

            conn.send({"type": "ACK", "msg_id": msg.get("msg_id"), "subscribed": topic})
            sub = self.broker.subscribe(topic, int(msg.get("from_cursor", 0)), push)
            conn.context.setdefault("subscriptions", []).append(sub)
            if conn.closed:
                sub.close()
        else:
            conn.send({"type": "ACK", "msg_id": msg.get("msg_id"), "error": f"unknown message type {kind!r}"})

    def on_close(self, conn: Connection) -> None:
        for sub in conn.context.get("subscriptions", []):
            sub.close()


class BrokerServer:
    """Standalone TCP broker (the coordinator embeds the same service)."""

    def __init__(self, address: str, log_dir: str | Path | None, fsync: bool = True):
        self.broker = Broker(log_dir, fsync)
        self.service = BrokerService(self.broker)
        self.server = transport.FrameServer(address, self.service.handle, self.service.on_close, "broker")

    @property
    def address(self) -> str:
        return self.server.address

    def start(self) -> "BrokerServer":
        self.server.start()
        return self

    def stop(self) -> None:
        self.server.stop()
        self.broker.close()


# ---------------------------------------------------------------- TCP client
class BrokerClient:
    """Remote broker access with a buffered, retrying publisher.

    :meth:`publish` never drops: envelopes wait in a local buffer of at most
    ``buffer_limit`` entries (publish blocks beyond that) while a sender
    thread delivers them one at a time, reconnecting with exponential
    backoff.  A retried publish may be appended twice; that is the
    at-least-once contract.
    """

    def __init__(self, address: str, buffer_limit: int = BUFFER_LIMIT,
                 backoff_base: float = transport.BACKOFF_BASE, backoff_cap: float = transport.BACKOFF_CAP):
        self.address = address
        self.backoff_base = backoff_base
        self.backoff_cap = backoff_cap
        self._buffer: queue.Queue = queue.Queue(maxsize=buffer_limit)
        self._stop = threading.Event()
        self._ids = itertools.count()
        self._pub_conn: Connection | None = None
        self._req_lock = threading.Lock()
        self._req_conn: Connection | None = None
        self._sender = threading.Thread(target=self._send_loop, name="broker-publisher", daemon=True)
        self._sender.start()

    # publish path
    def publish(self, topic: str, payload) -> Future:
        fut: Future = Future()
        self._buffer.put((topic, _to_record(payload), fut))
        return fut

    def pending(self) -> int:
        return self._buffer.unfinished_tasks

    def flush(self, timeout: float | None = None) -> bool:
        deadline = None if timeout is None else time.monotonic() + timeout
        while self._buffer.unfinished_tasks:
            if deadline is not None and time.monotonic() > deadline:
                return False
            time.sleep(0.01)
        return True

    def _send_loop(self) -> None:
        while not self._stop.is_set():
            try:
                topic, record, fut = self._buffer.get(timeout=0.2)
            except queue.Empty:
                continue
            delays = transport.backoff_delays(self.backoff_base, self.backoff_cap)
            while not self._stop.is_set():
                try:
                    if self._pub_conn is None or self._pub_conn.closed:
                        self._pub_conn = transport.connect(self.address)
                    msg_id = next(self._ids)
                    self._pub_conn.send({"type": "PUB", "topic": topic, "record": record, "msg_id": msg_id})
                    reply = self._pub_conn.recv()
                    if reply is None or reply.get("msg_id") != msg_id:
                        raise ConnectionError("broker closed the connection")
                    fut.set_result(reply["seq"])
                    break
                except (OSError, ValueError):
                    if self._pub_conn is not None:
                        self._pub_conn.close()
                        self._pub_conn = None
                    self._stop.wait(next(delays))
            self._buffer.task_done()

    # request/response path
    def _request(self, msg: dict, timeout: float = 5.0) -> dict:
        with self._req_lock:
            try:
                if self._req_conn is None or self._req_conn.closed:
                    self._req_conn = transport.connect(self.address, timeout)
                msg = {**msg, "msg_id": next(self._ids)}
                self._req_conn.sock.settimeout(timeout)
                self._req_conn.send(msg)
                reply = self._req_conn.recv()
                self._req_conn.sock.settimeout(None)
                if reply is None or reply.get("msg_id") != msg["msg_id"]:
                    raise ConnectionError("broker closed the connection")
                return reply
            except (OSError, ValueError):
                if self._req_conn is not None:
                    self._req_conn.close()
                    self._req_conn = None
                raise

    def poll(self, topic: str, cursor: int, max_items: int) -> tuple[list[tuple[int, Record]], int]:
        reply = self._request({"type": "POLL", "topic": topic, "cursor": cursor, "max_items": max_items})
        return [(r["seq"], r["record"]) for r in reply["records"]], reply["next_cursor"]

    def open_subscription(self, topic: str, from_cursor: int) -> Connection:
        conn = transport.connect(self.address)
        conn.send({"type": "SUB", "topic": topic, "from_cursor": from_cursor, "msg_id": next(self._ids)})
        reply = conn.recv()
        if reply is None or reply.get("subscribed") != topic:
            conn.close()
            raise ConnectionError("subscription refused")
        return conn

    def close(self, flush_timeout: float | None = 5.0) -> None:
        if flush_timeout:
            self.flush(flush_timeout)
        self._stop.set()
        for conn in (self._pub_conn, self._req_conn):
            if conn is not None:
                conn.close()


class ResultConsumer:
    """Cursor-tracking consumer over an in-process :class:`Broker` or a :class:`BrokerClient`.

    ``mode`` is ``"push"``, ``"poll"`` or ``"auto"``.  In auto mode the
    consumer subscribes, falls back to polling after three consecutive
    subscription failures, and returns to push once a subscription attempt
    succeeds again.  The callback sees every sequence number in order
    exactly once per consumer; redelivered copies across restarts carry new
    sequence numbers and are left to the dedup gate.
    """

    def __init__(self, source: Broker | BrokerClient, topic: str, callback: Callback, from_cursor: int = 0,
                 mode: str = "auto", poll_interval: float = 0.05, max_items: int = 256,
                 resubscribe_every: int = 20):
        if mode not in ("push", "poll", "auto"):
            raise ValueError(f"consumer mode must be push, poll or auto, got {mode!r}")
        self.source = source
        self.topic = topic
        self.callback = callback
        self.cursor = from_cursor
        self.mode = mode
        self.active_mode = "poll" if mode == "poll" else "push"
        self.poll_interval = poll_interval
        self.max_items = max_items
        self.resubscribe_every = resubscribe_every
        self.failures = 0
        self.switches = 0
        self._stop = threading.Event()
        self._lock = threading.Lock()
        self._local_sub: Subscription | None = None
        self._conn: Connection | None = None
        self._thread = threading.Thread(target=self._run, name=f"consumer-{topic}", daemon=True)
        self._thread.start()

    def _deliver(self, seq: int, record: Record) -> None:
        with self._lock:
            if seq != self.cursor:
                return  # already delivered (replay overlap) or out of order
            self.cursor += 1
        self.callback(seq, record)

    def _run(self) -> None:
        if isinstance(self.source, Broker):
            self._run_local()
        else:
            self._run_remote()

    def _run_local(self) -> None:
        if self.active_mode == "push":
            self._local_sub = self.source.subscribe(self.topic, self.cursor, self._deliver)
            self._stop.wait()
            self._local_sub.close()
            return
        while not self._stop.is_set():
            self._poll_once()
            self._stop.wait(self.poll_interval)

    def _poll_once(self) -> bool:
        try:
            records, _ = self.source.poll(self.topic, self.cursor, self.max_items)
        except (OSError, ValueError):
            return False
        for seq, record in records:
            self._deliver(seq, record)
        return True

    def _run_remote(self) -> None:
        delays = transport.backoff_delays(0.1, 2.0)
        polls = 0
        while not self._stop.is_set():
            if self.active_mode == "push":
                try:
                    self._conn = self.source.open_subscription(self.topic, self.cursor)
                except (OSError, ValueError):
                    self._conn = None
                    self._count_failure()
                    self._stop.wait(next(delays))
                    continue
                self.failures = 0
                delays = transport.backoff_delays(0.1, 2.0)
                self._read_push(self._conn)
                if not self._stop.is_set():
                    self._count_failure()
            else:
                ok = self._poll_once()
                polls += 1
                if self.mode == "auto" and ok and polls % self.resubscribe_every == 0:
                    self._switch("push")
                    continue
                self._stop.wait(self.poll_interval if ok else next(delays))

    def _read_push(self, conn: Connection) -> None:
        while not self._stop.is_set():
            try:
                msg = conn.recv()
            except (OSError, ValueError):
                break
            if msg is None:
                break
            if msg.get("type") == "PUB":
                self._deliver(msg["seq"], msg["record"])
        conn.close()

    def _count_failure(self) -> None:
        self.failures += 1
        if self.mode == "auto" and self.failures >= FALLBACK_AFTER_FAILURES:
            self._switch("poll")

    def _switch(self, mode: str) -> None:
        if mode != self.active_mode:
            logger.info("consumer %s switching to %s mode", self.topic, mode)
            self.active_mode = mode
            self.switches += 1
        self.failures = 0

    def close(self) -> None:
        self._stop.set()
        if self._conn is not None:
            self._conn.close()
        self._thread.join(timeout=5)
