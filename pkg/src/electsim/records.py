"""Records exchanged between the election state machine and timeout policies."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Any


class Outcome(str, enum.Enum):
    WON = "Won"
    FAILED = "Failed"
    SUPERSEDED = "Superseded"


@dataclass(frozen=True)
class ContextVector:
    """Local, per-node signals at decision time (milliseconds / counts)."""

    hb_interarrival_mean: float
    hb_interarrival_std: float
    time_since_last_hb: float
    consecutive_failures: int
    regime_id: int | None = None  # privileged; only oracle baselines may read it


@dataclass(frozen=True)
class DecisionContext:
    now_us: int
    features: ContextVector
    heartbeat_interval_ms: float
    candidate: bool = False


@dataclass(frozen=True)
class Decision:
    timeout_us: int
    arm: int | None
    lo_ms: float
    hi_ms: float
    forced_safe: bool = False
    token: Any = None  # policy-private feature vector, handed back with the attempt


@dataclass
class ElectionAttempt:
    node: int
    term: int
    started_at: int
    arm: int | None
    sampled_timeout_us: int
    context: ContextVector
    token: Any = None
    outcome: Outcome | None = None
    latency_us: int | None = None
    requestvote_receipts: int = 0

    @property
    def latency_ms(self) -> float:
        """Won: time to leadership. Failed: the attempt's full sampled lifetime."""
        if self.outcome is Outcome.WON:
            return self.latency_us / 1000
        return self.sampled_timeout_us / 1000


@dataclass(frozen=True)
class RewardWeights:
    success: float = 1.0
    latency: float = 0.002
    split_vote: float = 1.0

    def __post_init__(self):
        if min(self.success, self.latency, self.split_vote) < 0:
            raise ValueError("reward weights must be non-negative")


def shaped_reward(won: bool, latency_ms: float, weights: RewardWeights = RewardWeights()) -> float:
    return weights.success * float(won) - weights.latency * latency_ms - weights.split_vote * float(not won)


@dataclass(frozen=True)
class Feedback:
    reward: float | None = None
    safety: str | None = None  # "enter" | "exit" | None
