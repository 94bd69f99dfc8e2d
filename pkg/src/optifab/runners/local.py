"""In-process thread-pool runner and the one-subprocess-per-task batch runner."""

from __future__ import annotations

import subprocess
import sys
import time
from concurrent.futures import ThreadPoolExecutor

from optifab import wire
from optifab.runners.base import PYTHON, Runner, subprocess_env
from optifab.tasks import ResultEnvelope, TaskEnvelope, deserialize_task, execute, failed_result, serialize


class InProcessRunner(Runner):
    kind = "in_process"

    def start(self) -> "InProcessRunner":
        self._pool = ThreadPoolExecutor(self.config.concurrency, thread_name_prefix="optifab-slot")
        return self

    def _dispatch(self, envelope: TaskEnvelope) -> None:
        self._pool.submit(self._run, envelope)

    def _run(self, envelope: TaskEnvelope) -> None:
        self.publish(execute(envelope, self.registry, worker_id="in-process"))

    def shutdown(self, wait: bool = True) -> None:
        super().shutdown(wait)
        self._pool.shutdown(wait=wait)


class BatchRunner(Runner):
    """Cluster stand-in: each task waits ``queue_latency`` then runs in a fresh interpreter."""

    kind = "batch_subprocess"

    def start(self) -> "BatchRunner":
        self._pool = ThreadPoolExecutor(self.config.concurrency, thread_name_prefix="optifab-batch")
        self._env = subprocess_env()
        return self

    def _dispatch(self, envelope: TaskEnvelope) -> None:
        self._pool.submit(self._run, envelope)

    def _run(self, envelope: TaskEnvelope) -> None:
        if self.config.queue_latency > 0:
            time.sleep(self.config.queue_latency)
        try:
            proc = subprocess.run([PYTHON, "-m", "optifab.runners.local"], input=serialize(envelope),
                                  capture_output=True, timeout=envelope.timeout + 30.0, env=self._env)
        except subprocess.TimeoutExpired:
            self.publish(failed_result(envelope, f"timed out after {envelope.timeout:g} s", "batch"))
            return
        if proc.returncode != 0:
            tail = proc.stderr.decode(errors="replace").strip().splitlines()[-1:] or ["no output"]
            self.publish(failed_result(envelope, f"batch task exited {proc.returncode}: {tail[0]}", "batch"))
            return
        try:
            result = ResultEnvelope.from_dict(wire.decode(proc.stdout))
        except (ValueError, KeyError) as exc:
            self.publish(failed_result(envelope, f"unreadable batch output: {exc}", "batch"))
            return
        self.publish(result)

    def shutdown(self, wait: bool = True) -> None:
        super().shutdown(wait)
        self._pool.shutdown(wait=wait)


def _batch_main() -> int:
    envelope = deserialize_task(sys.stdin.buffer.read())
    result = execute(envelope, worker_id="batch")
    sys.stdout.buffer.write(serialize(result))
    sys.stdout.flush()
    return 0


if __name__ == "__main__":
    sys.exit(_batch_main())
