"""Offline availability metrics derived from protocol traces.

Everything here is a pure function of the trace plus a few scenario constants
(N, horizon, heartbeat interval, tick). Nothing reads simulator state.
"""

from __future__ import annotations

import math
import warnings
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .engine import Kind, ProtocolEvent, ms

_RECV = Kind.HEARTBEAT_RECEIVED
_SENT = Kind.HEARTBEAT_SENT
_CRASH = Kind.NODE_CRASHED
_UP = Kind.NODE_RESTARTED


def grace_window_ms(heartbeat_interval_ms: float, tick_ms: float) -> float:
    return max(3 * heartbeat_interval_ms, 2 * tick_ms)


def majority(n: int) -> int:
    return n // 2 + 1


# ---------------------------------------------------------------------------
# writability


@dataclass(frozen=True)
class Interval:
    start_us: int
    end_us: int
    writable: bool

    @property
    def duration_ms(self) -> float:
        return (self.end_us - self.start_us) / 1000


@dataclass
class WritabilityTimeline:
    intervals: list[Interval]
    horizon_us: int
    tick_us: int

    def unwritable(self) -> list[Interval]:
        return [iv for iv in self.intervals if not iv.writable]

    @property
    def unwritable_fraction(self) -> float:
        if self.horizon_us == 0:
            return 0.0
        return sum(iv.end_us - iv.start_us for iv in self.unwritable()) / self.horizon_us


def tick_samples(horizon_us: int, tick_us: int) -> list[int]:
    return list(range(0, horizon_us, tick_us))


def writable_samples(
    events: Sequence[ProtocolEvent], n: int, horizon_us: int, heartbeat_interval_ms: float = 50.0, tick_ms: float = 10.0
) -> list[bool]:
    """Writability at every tick sample t = k * tick in [0, horizon).

    At t, an alive node counts toward leader L if it accepted a heartbeat from
    L within [t - grace, t]; L counts itself while alive and still sending
    heartbeats in that window. Writable iff some L reaches a strict majority.
    Followers keep counting for a crashed leader until their receipts age out.
    """
    grace = ms(grace_window_ms(heartbeat_interval_ms, tick_ms))
    tick = ms(tick_ms)
    need = majority(n)
    alive = [True] * n
    last_sent: dict[int, int] = {}
    last_recv: list[dict[int, int]] = [dict() for _ in range(n)]  # node -> {leader: time}
    out = []
    i, m = 0, len(events)
    for t in tick_samples(horizon_us, tick):
        while i < m and events[i].time <= t:
            ev = events[i]
            kind = ev.kind
            if kind is _RECV:
                last_recv[ev.node][ev.detail["leader"]] = ev.time
            elif kind is _SENT:
                last_sent[ev.node] = ev.time
            elif kind is _CRASH:
                alive[ev.node] = False
            elif kind is _UP:
                alive[ev.node] = True
            i += 1
        lo = t - grace
        counts: dict[int, int] = {}
        for node in range(n):
            if not alive[node]:
                continue
            heard = {leader for leader, at in last_recv[node].items() if at >= lo}
            sent = last_sent.get(node)
            if sent is not None and sent >= lo:
                heard.add(node)
            for leader in heard:  # each node counts at most once per leader
                counts[leader] = counts.get(leader, 0) + 1
        ok = any(c >= need for c in counts.values())
        out.append(ok)
    return out


def compute_writability(
    events: Sequence[ProtocolEvent], n: int, horizon_us: int, heartbeat_interval_ms: float = 50.0, tick_ms: float = 10.0
) -> WritabilityTimeline:
    """Tick samples merged into maximal alternating intervals covering [0, horizon]."""
    tick = ms(tick_ms)
    samples = writable_samples(events, n, horizon_us, heartbeat_interval_ms, tick_ms)
    intervals: list[Interval] = []
    for k, w in enumerate(samples):
        start, end = k * tick, min((k + 1) * tick, horizon_us)
        if intervals and intervals[-1].writable == w:
            intervals[-1] = Interval(intervals[-1].start_us, end, w)
        else:
            intervals.append(Interval(start, end, w))
    return WritabilityTimeline(intervals, horizon_us, tick)


# ---------------------------------------------------------------------------
# distribution helpers


def nearest_rank(values: Sequence[float], p: float) -> float:
    """Nearest-rank percentile: the ceil(p*n)-th smallest value (p in (0, 1])."""
    if not values:
        raise ValueError("percentile of an empty sample")
    s = sorted(values)
    k = max(1, math.ceil(p * len(s) - 1e-12))
    return s[k - 1]


@dataclass
class RecoveryStats:
    mean: float = 0.0
    p95: float = 0.0
    p99: float = 0.0
    max: float = 0.0
    count: int = 0
    empty: bool = True


def recovery_stats(durations_ms: Sequence[float]) -> RecoveryStats:
    if not durations_ms:
        return RecoveryStats()
    return RecoveryStats(
        mean=float(sum(durations_ms) / len(durations_ms)),
        p95=nearest_rank(durations_ms, 0.95),
        p99=nearest_rank(durations_ms, 0.99),
        max=float(max(durations_ms)),
        count=len(durations_ms),
        empty=False,
    )


# ---------------------------------------------------------------------------
# elections


def time_to_leader(events: Iterable[ProtocolEvent]) -> list[float]:
    return [ev.detail["latency_ms"] for ev in events if ev.kind is Kind.LEADER_ELECTED]


def split_vote_rate(events: Iterable[ProtocolEvent]) -> tuple[float, bool]:
    """(rate, no_elections_flag). Superseded attempts never reach the denominator."""
    failed = won = 0
    for ev in events:
        if ev.kind is Kind.ELECTION_FAILED:
            failed += 1
        elif ev.kind is Kind.LEADER_ELECTED:
            won += 1
    total = failed + won
    return (failed / total if total else 0.0), total == 0


FAILURE_CAUSES = ("no_quorum", "low_reach", "contention")


def classify_failures(events: Sequence[ProtocolEvent], n: int) -> list[str]:
    """Cause label for every ElectionFailed, in trace order."""
    need = majority(n)
    alive = [True] * n
    receipts: dict[tuple[int, int], set] = defaultdict(set)
    out = []
    for ev in events:
        kind = ev.kind
        if kind is _CRASH:
            alive[ev.node] = False
        elif kind is _UP:
            alive[ev.node] = True
        elif kind is Kind.REQUEST_VOTE_RECEIVED:
            receipts[(ev.detail["candidate"], ev.term)].add(ev.node)
        elif kind is Kind.ELECTION_FAILED:
            if sum(alive) < need:
                out.append("no_quorum")
            elif len(receipts.get((ev.node, ev.term), ())) < need - 1:
                out.append("low_reach")
            else:
                out.append("contention")
    return out


def failure_breakdown(events: Sequence[ProtocolEvent], n: int) -> dict[str, float]:
    labels = classify_failures(events, n)
    if not labels:
        return {c: 0.0 for c in FAILURE_CAUSES}
    return {c: labels.count(c) / len(labels) for c in FAILURE_CAUSES}


# ---------------------------------------------------------------------------
# forced-safe episodes


@dataclass
class SafetyStats:
    episodes: int = 0
    mean_duration_ms: float = 0.0
    overlap2: float = 0.0
    overlap3: float = 0.0
    truncated: int = 0


def safety_episodes(events: Iterable[ProtocolEvent], horizon_us: int) -> tuple[list[tuple[int, int, int]], int]:
    """(node, start_us, end_us) per forced-safe episode, plus how many were cut at the horizon."""
    open_: dict[int, int] = {}
    out = []
    for ev in events:
        if ev.kind is Kind.SAFETY_ENTER:
            open_.setdefault(ev.node, ev.time)
        elif ev.kind is Kind.SAFETY_EXIT and ev.node in open_:
            out.append((ev.node, open_.pop(ev.node), ev.time))
    for node, start in sorted(open_.items()):
        out.append((node, start, horizon_us))
    if open_:
        warnings.warn(f"{len(open_)} forced-safe episode(s) still open at the horizon; truncated", stacklevel=2)
    out.sort(key=lambda e: (e[1], e[0]))
    return out, len(open_)


def overlap_time(intervals: Iterable[tuple[int, int]], k: int) -> int:
    """Total time covered by at least ``k`` of the half-open intervals (sweep line)."""
    points = []
    for s, e in intervals:
        if e > s:
            points.append((s, 1))
            points.append((e, -1))
    points.sort()
    depth = 0
    covered = 0
    prev = None
    for t, d in points:
        if prev is not None and depth >= k:
            covered += t - prev
        depth += d
        prev = t
    return covered


def safety_overlap(events: Iterable[ProtocolEvent], horizon_us: int) -> SafetyStats:
    eps, truncated = safety_episodes(events, horizon_us)
    if not eps:
        return SafetyStats()
    spans = [(s, e) for _, s, e in eps]
    return SafetyStats(
        episodes=len(eps),
        mean_duration_ms=sum(e - s for s, e in spans) / len(spans) / 1000,
        overlap2=overlap_time(spans, 2) / horizon_us,
        overlap3=overlap_time(spans, 3) / horizon_us,
        truncated=truncated,
    )


def term_churn(events: Iterable[ProtocolEvent], horizon_us: int) -> float:
    """Highest term reached per simulated minute."""
    top = max((ev.term for ev in events if ev.term is not None), default=0)
    return top / (horizon_us / 60e6) if horizon_us else 0.0


# ---------------------------------------------------------------------------
# per-run summary


@dataclass
class MetricsSummary:
    recovery_mean: float
    recovery_p95: float
    recovery_p99: float
    recovery_max: float
    recovery_count: int
    recovery_empty: bool
    unwritable_fraction: float
    split_vote_rate: float
    no_elections: bool
    elections_won: int
    elections_failed: int
    time_to_leader_ms: list = field(default_factory=list)
    failure_causes: dict = field(default_factory=dict)
    safety: SafetyStats = field(default_factory=SafetyStats)
    term_churn: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsSummary":
        d = dict(d)
        d["safety"] = SafetyStats(**d["safety"])
        return cls(**d)

    def scalar(self, name: str) -> float:
        """Flat numeric lookup used by aggregation (``safety_episodes``, ``cause_low_reach``...)."""
        if name.startswith("safety_"):
            key = name[len("safety_"):]
            return float(getattr(self.safety, key))
        if name.startswith("cause_"):
            return float(self.failure_causes.get(name[len("cause_"):], 0.0))
        return float(getattr(self, name))


def summarize(
    events: Sequence[ProtocolEvent], n: int, horizon_us: int, heartbeat_interval_ms: float = 50.0, tick_ms: float = 10.0
) -> MetricsSummary:
    timeline = compute_writability(events, n, horizon_us, heartbeat_interval_ms, tick_ms)
    rec = recovery_stats([iv.duration_ms for iv in timeline.unwritable()])
    rate, none = split_vote_rate(events)
    ttl = time_to_leader(events)
    failed = sum(1 for ev in events if ev.kind is Kind.ELECTION_FAILED)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        safety = safety_overlap(events, horizon_us)
    return MetricsSummary(
        recovery_mean=rec.mean, recovery_p95=rec.p95, recovery_p99=rec.p99, recovery_max=rec.max,
        recovery_count=rec.count, recovery_empty=rec.empty,
        unwritable_fraction=timeline.unwritable_fraction,
        split_vote_rate=rate, no_elections=none, elections_won=len(ttl), elections_failed=failed,
        time_to_leader_ms=ttl, failure_causes=failure_breakdown(events, n),
        safety=safety, term_churn=term_churn(events, horizon_us),
    )


# ---------------------------------------------------------------------------
# cross-seed statistics


def bootstrap_ci(
    values: Sequence[float], level: float = 0.95, resamples: int = 10_000, rng: np.random.Generator | int | None = 0
) -> tuple[float, float, float]:
    """Mean over seeds with a percentile-bootstrap CI of the mean."""
    x = np.asarray(values, dtype=float)
    if x.size == 0:
        raise ValueError("bootstrap_ci needs at least one value")
    point = float(x.mean())
    if x.size == 1 or np.all(x == x[0]):
        return point, point, point
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    idx = gen.integers(0, x.size, size=(resamples, x.size))
    means = x[idx].mean(axis=1)
    tail = (1 - level) / 2 * 100
    lo, hi = np.percentile(means, [tail, 100 - tail])
    return point, float(lo), float(hi)


def ecdf(values: Sequence[float]) -> list[tuple[float, float]]:
    """(value, cumulative fraction) points for CDF plots."""
    s = sorted(values)
    n = len(s)
    return [(v, (i + 1) / n) for i, v in enumerate(s)]
