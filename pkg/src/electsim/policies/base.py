from __future__ import annotations

import json
import math

from ..records import Decision, DecisionContext, ElectionAttempt, Feedback

SNAPSHOT_VERSION = 1


class PolicyError(RuntimeError):
    """Configuration or usage error inside a timeout policy."""


class TimeoutPolicy:
    """Decision interface the election state machine talks to.

    The state machine only calls :meth:`choose` on every deadline reset and
    :meth:`observe_outcome` when one of its candidate attempts completes. The
    ``observe_*`` hooks feed local measurements to adaptive policies.
    """

    name = "abstract"

    def choose(self, ctx: DecisionContext, rng) -> Decision:
        raise NotImplementedError

    def observe_outcome(self, attempt: ElectionAttempt) -> Feedback:
        return Feedback()

    def observe_heartbeat(self, interarrival_ms: float | None, oneway_ms: float) -> None:
        pass

    def observe_rtt(self, rtt_ms: float) -> None:
        pass

    def heartbeat_interval_ms(self) -> float | None:
        """Override for policies that also drive the leader's heartbeat cadence."""
        return None

    @property
    def forced_safe(self) -> bool:
        return False

    def state_dict(self) -> dict:
        return {}

    def load_state_dict(self, d: dict) -> None:
        pass


class SafetyGate:
    """Forces the safe arm for a cooldown after F consecutive failed attempts.

    The cooldown counts elections, not time: it only shrinks when this node
    wins an election.
    """

    def __init__(self, threshold: int = 3, cooldown_elections: int = 2, enabled: bool = True):
        if threshold < 1 or cooldown_elections < 1:
            raise PolicyError("safety threshold and cooldown must be >= 1")
        self.threshold = threshold
        self.cooldown_elections = cooldown_elections
        self.enabled = enabled
        self.consecutive_failures = 0
        self.cooldown_remaining = 0

    @property
    def forced(self) -> bool:
        return self.cooldown_remaining > 0

    def on_failure(self) -> str | None:
        self.consecutive_failures += 1
        if self.enabled and self.consecutive_failures >= self.threshold:
            entering = self.cooldown_remaining == 0
            self.cooldown_remaining = self.cooldown_elections
            return "enter" if entering else None
        return None

    def on_success(self) -> str | None:
        self.consecutive_failures = 0
        if self.cooldown_remaining > 0:
            self.cooldown_remaining -= 1
            if self.cooldown_remaining == 0:
                return "exit"
        return None

    def state_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "cooldown_elections": self.cooldown_elections,
            "enabled": self.enabled,
            "consecutive_failures": self.consecutive_failures,
            "cooldown_remaining": self.cooldown_remaining,
        }

    def load_state_dict(self, d: dict) -> None:
        for k, v in d.items():
            setattr(self, k, v)


def snapshot(policy: TimeoutPolicy) -> str:
    """Serialise policy state to a versioned JSON document."""
    doc = {"format_version": SNAPSHOT_VERSION, "policy": policy.name, "state": policy.state_dict()}
    return json.dumps(doc, sort_keys=True, allow_nan=False, default=_non_finite)


def restore(policy: TimeoutPolicy, data: str) -> TimeoutPolicy:
    doc = json.loads(data)
    if doc.get("format_version") != SNAPSHOT_VERSION:
        raise PolicyError(f"snapshot format_version {doc.get('format_version')!r} != {SNAPSHOT_VERSION}")
    if doc.get("policy") != policy.name:
        raise PolicyError(f"snapshot is for policy {doc.get('policy')!r}, not {policy.name!r}")
    policy.load_state_dict(doc["state"])
    return policy


def _non_finite(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    raise TypeError(f"cannot serialise {type(obj).__name__}")
