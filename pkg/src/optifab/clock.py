"""Process clock: monotonic readings shifted onto the wall-clock epoch.

The offset is captured once per process, so timestamps never go backwards
within a process and remain comparable (up to clock skew) across processes
on the same host.
"""

import time

EPOCH_OFFSET = time.time() - time.monotonic()


def now() -> float:
    return time.monotonic() + EPOCH_OFFSET
