"""Canonical JSON encoding and length-prefixed framing.

Every payload that crosses a process boundary (task envelopes, broker
records, coordinator messages, topic logs) is canonical JSON: sorted keys,
no insignificant whitespace, UTF-8, NaN/Inf rejected.  Frames on sockets and
in topic log files are a 4-byte big-endian length followed by the payload.
"""

from __future__ import annotations

import json
import socket
import struct
from typing import Any, BinaryIO

SCHEMA_VERSION = "1"
HEADER = struct.Struct(">I")
HEADER_SIZE = HEADER.size
MAX_FRAME = 64 * 1024 * 1024


class FrameError(ValueError):
    """Raised for malformed or oversized frames."""


def dumps(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False)


def encode(obj: Any) -> bytes:
    return dumps(obj).encode("utf-8")


def decode(data: bytes | str) -> Any:
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    return json.loads(data)


def pack_frame(obj: Any) -> bytes:
    payload = encode(obj)
    if len(payload) > MAX_FRAME:
        raise FrameError(f"frame too large: {len(payload)} bytes")
    return HEADER.pack(len(payload)) + payload


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            if buf:
                raise ConnectionError("connection closed mid-frame")
            return None
        buf.extend(chunk)
    return bytes(buf)


def send_frame(sock: socket.socket, obj: Any) -> None:
    sock.sendall(pack_frame(obj))


def recv_frame(sock: socket.socket) -> Any | None:
    """Read one frame; returns None on clean EOF at a frame boundary."""
    header = _recv_exact(sock, HEADER_SIZE)
    if header is None:
        return None
    (length,) = HEADER.unpack(header)
    if length > MAX_FRAME:
        raise FrameError(f"frame too large: {length} bytes")
    payload = _recv_exact(sock, length)
    if payload is None:
        raise ConnectionError("connection closed mid-frame")
    return decode(payload)


def read_frames(fh: BinaryIO) -> tuple[list[Any], int]:
    """Read all complete frames from a file.

    Returns the decoded payloads and the byte offset just past the last
    valid frame.  A torn or undecodable tail stops the scan; callers decide
    whether to truncate.
    """
    records = []
    offset = 0
    while True:
        header = fh.read(HEADER_SIZE)
        if len(header) < HEADER_SIZE:
            break
        (length,) = HEADER.unpack(header)
        if length > MAX_FRAME:
            break
        payload = fh.read(length)
        if len(payload) < length:
            break
        try:
            records.append(decode(payload))
        except (UnicodeDecodeError, json.JSONDecodeError):
            break
        offset += HEADER_SIZE + length
    return records, offset


def parse_address(address: str) -> tuple[str, int]:
    host, sep, port = address.rpartition(":")
    if not sep or not host or not port.isdigit():
        raise ValueError(f"address must be HOST:PORT, got {address!r}")
    port_num = int(port)
    if not 0 <= port_num <= 65535:
        raise ValueError(f"port out of range in {address!r}")
    return host, port_num


def format_address(host: str, port: int) -> str:
    return f"{host}:{port}"
