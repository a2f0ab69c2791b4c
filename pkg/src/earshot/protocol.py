"""Line-delimited JSON telemetry: formats, validation models, and sinks.

Two streams leave the pipeline, one line per frame each:

    potential DOAs   {"frame":k,"pot":[{"x":…,"y":…,"z":…,"E":…}]}
    tracked sources  {"frame":k,"src":[{"id":…,"tag":"…","x":…,"y":…,"z":…,"activity":…}]}

Field order is fixed, floats carry exactly three decimals, and a line is
emitted even when the list is empty, so byte-identical replay only needs
identical input and configuration.  Lines travel to a file, to stdout, or
over TCP (newline-delimited, one connection per stream); an unreachable
TCP peer is retried behind a bounded buffer that drops oldest-first and
counts what it dropped.
"""

from __future__ import annotations

import socket
import sys
import time
from collections import deque
from typing import Iterable, Sequence, TextIO

from pydantic import BaseModel, ConfigDict

from .localization import PotentialDoa
from .tracking import TrackedSource

TCP_PREFIX = "tcp://"
STDOUT_DEST = "-"


def _fmt3(value: float) -> str:
    # round first so -0.0004 prints as 0.000, not -0.000
    return f"{round(float(value), 3) + 0.0:.3f}"


def format_pot_line(frame_index: int, doas: Sequence[PotentialDoa]) -> str:
    """One potential-DOA line; ranks are already encoded by list order."""
    entries = ",".join(
        f'{{"x":{_fmt3(d.direction[0])},"y":{_fmt3(d.direction[1])},'
        f'"z":{_fmt3(d.direction[2])},"E":{_fmt3(d.power)}}}'
        for d in doas
    )
    return f'{{"frame":{frame_index},"pot":[{entries}]}}'


def format_src_line(frame_index: int, sources: Sequence[TrackedSource],
                    tag: str = "dynamic") -> str:
    """One tracked-source line; an empty track set still yields a line."""
    entries = ",".join(
        f'{{"id":{s.id},"tag":"{tag}","x":{_fmt3(s.direction[0])},'
        f'"y":{_fmt3(s.direction[1])},"z":{_fmt3(s.direction[2])},'
        f'"activity":{_fmt3(s.activity)}}}'
        for s in sources
    )
    return f'{{"frame":{frame_index},"src":[{entries}]}}'


# ---------------------------------------------------------------------------
# Schema models: the machine-checkable half of docs/protocol.md
# ---------------------------------------------------------------------------

class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PotEntry(_Strict):
    x: float
    y: float
    z: float
    E: float


class PotLine(_Strict):
    frame: int
    pot: list[PotEntry]


class SrcEntry(_Strict):
    id: int
    tag: str
    x: float
    y: float
    z: float
    activity: float


class SrcLine(_Strict):
    frame: int
    src: list[SrcEntry]


def validate_pot_line(line: str) -> PotLine:
    """Parse one potential-DOA line, rejecting unknown or missing fields."""
    return PotLine.model_validate_json(line)


def validate_src_line(line: str) -> SrcLine:
    """Parse one tracked-source line, rejecting unknown or missing fields."""
    return SrcLine.model_validate_json(line)


# ---------------------------------------------------------------------------
# Sinks
# ---------------------------------------------------------------------------

class LineSink:
    """A destination for newline-delimited JSON; subclasses count drops."""

    dropped: int = 0

    def write(self, line: str) -> None:
        raise NotImplementedError

    def close(self) -> None:
        pass


class NullSink(LineSink):
    def write(self, line: str) -> None:
        pass


class MemorySink(LineSink):
    """Collects lines in a list; used by the in-process service."""

    def __init__(self) -> None:
        self.lines: list[str] = []

    def write(self, line: str) -> None:
        self.lines.append(line)


class FileSink(LineSink):
    """Writes to a file path or, for ``-``, to stdout.  Never drops."""

    def __init__(self, dest: str | TextIO):
        self._owns = isinstance(dest, str) and dest != STDOUT_DEST
        if isinstance(dest, str):
            self._fh = sys.stdout if dest == STDOUT_DEST else open(dest, "w", encoding="utf-8")
        else:
            self._fh = dest

    def write(self, line: str) -> None:
        self._fh.write(line + "\n")

    def close(self) -> None:
        if self._owns:
            self._fh.close()
        else:
            self._fh.flush()


class TcpSink(LineSink):
    """One TCP connection per stream, retried behind a bounded buffer.

    Lines queue while the peer is unreachable; when the buffer would exceed
    its limit the oldest line is dropped and counted.  Reconnection is
    attempted at most once per ``retry_interval_s`` so a dead peer costs
    one timeout per interval, not per line.
    """

    def __init__(self, host: str, port: int, buffer_limit: int = 1024,
                 retry_interval_s: float = 1.0, connect_timeout_s: float = 0.5):
        self.host, self.port = host, port
        self.buffer_limit = buffer_limit
        self.retry_interval_s = retry_interval_s
        self.connect_timeout_s = connect_timeout_s
        self.dropped = 0
        self._pending: deque[str] = deque()
        self._sock: socket.socket | None = None
        self._last_attempt = -float("inf")

    def _try_connect(self) -> None:
        now = time.monotonic()
        if now - self._last_attempt < self.retry_interval_s:
            return
        self._last_attempt = now
        try:
            self._sock = socket.create_connection(
                (self.host, self.port), timeout=self.connect_timeout_s)
            self._sock.settimeout(self.connect_timeout_s)
        except OSError:
            self._sock = None

    def _disconnect(self) -> None:
        if self._sock is not None:
            try:
                self._sock.close()
            except OSError:
                pass
            self._sock = None

    def _flush(self) -> None:
        while self._pending and self._sock is not None:
            line = self._pending[0]
            try:
                self._sock.sendall(line.encode("utf-8") + b"\n")
            except OSError:
                self._disconnect()
                return
            self._pending.popleft()

    def write(self, line: str) -> None:
        self._pending.append(line)
        if self._sock is None:
            self._try_connect()
        self._flush()
        while len(self._pending) > self.buffer_limit:
            self._pending.popleft()
            self.dropped += 1

    def close(self) -> None:
        if self._pending and self._sock is None:
            self._last_attempt = -float("inf")   # one final attempt
            self._try_connect()
        self._flush()
        self.dropped += len(self._pending)
        self._pending.clear()
        self._disconnect()


def parse_tcp_dest(dest: str) -> tuple[str, int]:
    """Split ``tcp://host:port``; raises ValueError on malformed input."""
    body = dest[len(TCP_PREFIX):]
    host, sep, port = body.rpartition(":")
    if not sep or not host or not port.isdigit():
        raise ValueError(f"expected tcp://host:port, got {dest!r}")
    return host, int(port)


def open_sink(dest: str | None) -> LineSink:
    """``None`` discards, ``-`` is stdout, ``tcp://host:port`` streams, else file path."""
    if dest is None:
        return NullSink()
    if dest.startswith(TCP_PREFIX):
        host, port = parse_tcp_dest(dest)
        return TcpSink(host, port)
    return FileSink(dest)
