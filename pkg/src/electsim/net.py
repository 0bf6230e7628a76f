"""Link model and fault injection: delay/loss per regime, regime switching,
partitions, crash/restart schedules and per-node service delays."""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from typing import Union

from .engine import RngStream, ms

MIN_DELAY_US = 1


@dataclass(frozen=True)
class TailModel:
    shape: float = 2.0
    scale_ms: float = 100.0
    mix_probability: float = 0.0


@dataclass(frozen=True)
class DelayModel:
    base_ms: float = 1.0
    jitter_std_ms: float = 0.0
    tail: TailModel | None = None

    def sample_us(self, rng) -> int:
        """One-way delay in microseconds. ``rng`` is a ``random.Random``."""
        tail = self.tail
        if tail is not None and tail.mix_probability > 0 and rng.random() < tail.mix_probability:
            d = tail.scale_ms * rng.paretovariate(tail.shape)
        else:
            d = self.base_ms
            sd = self.jitter_std_ms
            if sd > 0:
                while True:
                    j = rng.gauss(0.0, sd)
                    if -3 * sd <= j <= 3 * sd:
                        break
                d += j
        return max(MIN_DELAY_US, int(round(d * 1000)))


@dataclass(frozen=True)
class BurstModel:
    p_good_bad: float
    p_bad_good: float
    loss_in_bad: float = 1.0

    def stationary_bad(self) -> float:
        total = self.p_good_bad + self.p_bad_good
        return 0.0 if total == 0 else self.p_good_bad / total


@dataclass(frozen=True)
class LossModel:
    iid: float = 0.0
    burst: BurstModel | None = None

    def stationary_loss(self) -> float:
        """Long-run drop probability of the combined iid + two-state process."""
        bad = self.burst.stationary_bad() * self.burst.loss_in_bad if self.burst else 0.0
        return 1.0 - (1.0 - self.iid) * (1.0 - bad)


@dataclass(frozen=True)
class Regime:
    id: int
    delay: DelayModel = field(default_factory=DelayModel)
    loss: LossModel = field(default_factory=LossModel)


class BurstChain:
    """Two-state (good/bad) Markov chain stepped once per transmitted message."""

    __slots__ = ("bad",)

    def __init__(self, bad: bool = False):
        self.bad = bad

    def step_and_drop(self, model: BurstModel, rng) -> bool:
        u = rng.random()
        if self.bad:
            if u < model.p_bad_good:
                self.bad = False
        elif u < model.p_good_bad:
            self.bad = True
        if self.bad and model.loss_in_bad > 0:
            return rng.random() < model.loss_in_bad
        return False


@dataclass(frozen=True)
class RegimeSchedule:
    switches: tuple[tuple[int, int], ...] = ((0, 0),)  # (switch_time_us, regime_id)

    def __post_init__(self):
        if not self.switches or self.switches[0][0] != 0:
            raise ValueError("regime schedule must start at t=0")
        times = [t for t, _ in self.switches]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("regime switch times must be strictly increasing")

    def active_regime(self, now: int) -> int:
        i = bisect.bisect_right([t for t, _ in self.switches], now) - 1
        return self.switches[max(i, 0)][1]


LEADER = "leader"
NodeRef = Union[int, str]


@dataclass(frozen=True)
class Crash:
    node: NodeRef  # node id, or "leader" to hit whoever leads at t_down
    down_us: int
    up_us: int


@dataclass(frozen=True)
class Partition:
    groups: tuple[frozenset, frozenset]
    start_us: int
    end_us: int


@dataclass(frozen=True)
class FaultSchedule:
    crashes: tuple[Crash, ...] = ()
    partitions: tuple[Partition, ...] = ()

    def validate(self, n: int) -> list[str]:
        errors = []
        for i, c in enumerate(self.crashes):
            where = f"faults.crashes[{i}]"
            if not c.down_us < c.up_us:
                errors.append(f"{where}: down must precede up")
            if c.node != LEADER and not (isinstance(c.node, int) and 0 <= c.node < n):
                errors.append(f"{where}: unknown node {c.node!r}")
        # leader-targeted crashes may hit any node, so treat them as overlapping everything
        for i, a in enumerate(self.crashes):
            for j in range(i + 1, len(self.crashes)):
                b = self.crashes[j]
                same = a.node == b.node or LEADER in (a.node, b.node)
                if same and a.down_us < b.up_us and b.down_us < a.up_us:
                    errors.append(f"faults.crashes[{j}]: overlaps crashes[{i}] on the same node")
        for i, p in enumerate(self.partitions):
            where = f"faults.partitions[{i}]"
            if not p.start_us < p.end_us:
                errors.append(f"{where}: start must precede end")
            g0, g1 = p.groups
            if g0 & g1 or (g0 | g1) != frozenset(range(n)) or not g0 or not g1:
                errors.append(f"{where}: groups must be a bipartition of all {n} nodes")
        for i, a in enumerate(self.partitions):
            for j in range(i + 1, len(self.partitions)):
                b = self.partitions[j]
                if a.start_us < b.end_us and b.start_us < a.end_us:
                    errors.append(f"faults.partitions[{j}]: overlaps partitions[{i}]")
        return errors


class Network:
    """Per-run link layer. Drops are a normal outcome, reported as ``None``."""

    def __init__(
        self,
        n: int,
        regimes: dict[int, Regime],
        schedule: RegimeSchedule,
        rng: RngStream,
        service_delay_ms: list[float] | None = None,
    ):
        self.n = n
        self.regimes = regimes
        self.schedule = schedule
        self.regime = regimes[schedule.active_regime(0)]
        self.service_us = [ms(s) for s in (service_delay_ms or [0.0] * n)]
        self.alive = [True] * n
        self._side: list[int] | None = None
        self._links = {}
        for s in range(n):
            for d in range(n):
                if s != d:
                    self._links[(s, d)] = (rng.fork(f"link-{s}-{d}").py, BurstChain())

    # regimes
    def active_regime(self, now: int) -> int:
        return self.schedule.active_regime(now)

    def switch_regime(self, regime_id: int) -> None:
        self.regime = self.regimes[regime_id]

    # partitions
    def start_partition(self, groups: tuple[frozenset, frozenset]) -> None:
        side = [0] * self.n
        for node in groups[1]:
            side[node] = 1
        self._side = side

    def end_partition(self) -> None:
        self._side = None

    def partitioned(self, a: int, b: int) -> bool:
        side = self._side
        return side is not None and side[a] != side[b]

    # transmission
    def send(self, src: int, dst: int, now: int) -> int | None:
        if self.partitioned(src, dst):
            return None
        rng, chain = self._links[(src, dst)]
        regime = self.regime
        loss = regime.loss
        if loss.burst is not None and chain.step_and_drop(loss.burst, rng):
            return None
        if loss.iid > 0 and rng.random() < loss.iid:
            return None
        return now + regime.delay.sample_us(rng) + self.service_us[dst]

    def deliverable(self, src: int, dst: int) -> bool:
        """Checked again at delivery time: the receiver may have crashed or been cut off."""
        return self.alive[dst] and not self.partitioned(src, dst)


def pareto_mean(shape: float, scale: float) -> float:
    return math.inf if shape <= 1 else shape * scale / (shape - 1)
