"""Deterministic discrete-event core: integer-microsecond clock, event queue,
seeded random streams and the append-only protocol trace."""

from __future__ import annotations

import enum
import gzip
import hashlib
import heapq
import json
import random
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Iterator

import numpy as np

US_PER_MS = 1000


def ms(value: float) -> int:
    """Convert milliseconds to integer simulation time (microseconds)."""
    return int(round(value * US_PER_MS))


def to_ms(t_us: int) -> float:
    return t_us / US_PER_MS


class SchedulingError(RuntimeError):
    """Raised when an event is scheduled before the current clock."""


class EventKind(enum.Enum):
    TIMER_FIRE = "TimerFire"
    MESSAGE_DELIVER = "MessageDeliver"
    FAULT_ACTION = "FaultAction"
    TICK_SAMPLE = "TickSample"


class Event:
    __slots__ = ("fire_at", "sequence", "kind", "callback", "args", "cancelled")

    def __init__(self, fire_at: int, sequence: int, kind: EventKind, callback: Callable, args: tuple):
        self.fire_at = fire_at
        self.sequence = sequence
        self.kind = kind
        self.callback = callback
        self.args = args
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True

    def __repr__(self) -> str:
        return f"Event({self.kind.value}@{self.fire_at}#{self.sequence})"


class Simulator:
    """Single-threaded event loop ordered by (fire_at, sequence)."""

    def __init__(self) -> None:
        self.clock = 0
        self._seq = 0
        self._queue: list[tuple[int, int, Event]] = []

    def schedule(self, fire_at: int, kind: EventKind, callback: Callable, *args: Any) -> Event:
        if fire_at < self.clock:
            raise SchedulingError(f"event at {fire_at} scheduled in the past (clock={self.clock})")
        ev = Event(int(fire_at), self._seq, kind, callback, args)
        self._seq += 1
        heapq.heappush(self._queue, (ev.fire_at, ev.sequence, ev))
        return ev

    def schedule_in(self, delay: int, kind: EventKind, callback: Callable, *args: Any) -> Event:
        return self.schedule(self.clock + delay, kind, callback, *args)

    @staticmethod
    def cancel(handle: Event) -> None:
        handle.cancel()

    def pending(self) -> int:
        return sum(1 for _, _, ev in self._queue if not ev.cancelled)

    def run_until(self, end: int, sink: "TraceSink | None" = None) -> int:
        queue = self._queue
        pop = heapq.heappop
        while queue and queue[0][0] <= end:
            fire_at, _, ev = pop(queue)
            if ev.cancelled:
                continue
            self.clock = fire_at
            ev.callback(*ev.args)
        self.clock = max(self.clock, end)
        if sink is not None:
            sink.flush()
        return self.clock


# ---------------------------------------------------------------------------
# random streams


def _derive_key(parent_key: bytes, label: str) -> bytes:
    return hashlib.sha256(parent_key + b"/" + label.encode("utf-8")).digest()


class RngStream:
    """Labelled random stream; children depend only on (root seed, label path)."""

    def __init__(self, seed: int, stream_id: str = "root", _key: bytes | None = None):
        self.seed = int(seed)
        self.stream_id = stream_id
        self._key = _key if _key is not None else hashlib.sha256(b"seed:%d" % self.seed).digest()
        self._children: set[str] = set()
        self.py = random.Random(int.from_bytes(self._key[:16], "little"))
        self._np: np.random.Generator | None = None

    @property
    def np(self) -> np.random.Generator:
        if self._np is None:
            self._np = np.random.default_rng(int.from_bytes(self._key[16:], "little"))
        return self._np

    def fork(self, label: str) -> "RngStream":
        if label in self._children:
            raise ValueError(f"stream label {label!r} already forked from {self.stream_id!r}")
        self._children.add(label)
        return RngStream(self.seed, f"{self.stream_id}/{label}", _derive_key(self._key, label))

    # thin draw helpers
    def random(self) -> float:
        return self.py.random()

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.py.random()

    def gauss(self, mu: float, sigma: float) -> float:
        return self.py.gauss(mu, sigma)


def fork_stream(parent: RngStream, label: str) -> RngStream:
    return parent.fork(label)


# ---------------------------------------------------------------------------
# protocol trace


class Kind(str, enum.Enum):
    ELECTION_TIMEOUT = "ElectionTimeout"
    BECAME_CANDIDATE = "BecameCandidate"
    REQUEST_VOTE_SENT = "RequestVoteSent"
    REQUEST_VOTE_RECEIVED = "RequestVoteReceived"
    VOTE_GRANTED = "VoteGranted"
    LEADER_ELECTED = "LeaderElected"
    ELECTION_FAILED = "ElectionFailed"
    HEARTBEAT_SENT = "HeartbeatSent"
    HEARTBEAT_RECEIVED = "HeartbeatReceived"
    NODE_CRASHED = "NodeCrashed"
    NODE_RESTARTED = "NodeRestarted"
    PARTITION_START = "PartitionStart"
    PARTITION_END = "PartitionEnd"
    REGIME_SWITCH = "RegimeSwitch"
    POLICY_DECISION = "PolicyDecision"
    SAFETY_ENTER = "SafetyEnter"
    SAFETY_EXIT = "SafetyExit"


_KINDS = {k.value: k for k in Kind}


@dataclass(frozen=True)
class ProtocolEvent:
    time: int
    seq: int
    node: int | None
    kind: Kind
    term: int | None
    detail: dict = field(default_factory=dict)

    def to_line(self) -> str:
        node = "null" if self.node is None else str(self.node)
        term = "null" if self.term is None else str(self.term)
        detail = json.dumps(self.detail, sort_keys=True, separators=(",", ":"))
        return (
            f'{{"time":{self.time},"seq":{self.seq},"node":{node},'
            f'"kind":"{self.kind.value}","term":{term},"detail":{detail}}}'
        )


class TraceParseError(ValueError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


def parse_line(line: str, lineno: int = 0) -> ProtocolEvent:
    try:
        rec = json.loads(line)
        return ProtocolEvent(
            time=int(rec["time"]),
            seq=int(rec["seq"]),
            node=rec["node"],
            kind=_KINDS[rec["kind"]],
            term=rec["term"],
            detail=rec["detail"],
        )
    except (ValueError, KeyError, TypeError) as exc:
        raise TraceParseError(lineno, str(exc)) from None


class TraceSink:
    """In-memory append-only trace. ``flush`` is a hook for file-backed sinks."""

    def __init__(self) -> None:
        self.events: list[ProtocolEvent] = []

    def emit(self, time: int, node: int | None, kind: Kind, term: int | None = None, **detail: Any) -> None:
        self.events.append(ProtocolEvent(time, len(self.events), node, kind, term, detail))

    def flush(self) -> None:
        pass

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self) -> Iterator[ProtocolEvent]:
        return iter(self.events)

    def to_bytes(self) -> bytes:
        return dumps_trace(self.events)


def dumps_trace(events: Iterable[ProtocolEvent]) -> bytes:
    return "".join(ev.to_line() + "\n" for ev in events).encode("utf-8")


def loads_trace(data: bytes | str) -> list[ProtocolEvent]:
    text = data.decode("utf-8") if isinstance(data, bytes) else data
    out = []
    prev = None
    for i, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        ev = parse_line(line, i)
        key = (ev.time, ev.seq)
        if prev is not None and key < prev:
            raise TraceParseError(i, "trace not sorted by (time, seq)")
        prev = key
        out.append(ev)
    return out


def trace_digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def write_trace(path, data: bytes) -> None:
    path = str(path)
    opener = gzip.open if path.endswith(".gz") else open
    # empty name and mtime=0 keep gzip output byte-stable across paths and runs
    if path.endswith(".gz"):
        with open(path, "wb") as raw, gzip.GzipFile(filename="", fileobj=raw, mode="wb", mtime=0) as fh:
            fh.write(data)
    else:
        with opener(path, "wb") as fh:
            fh.write(data)


def read_trace(path) -> list[ProtocolEvent]:
    path = str(path)
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rb") as fh:
        return loads_trace(fh.read())
