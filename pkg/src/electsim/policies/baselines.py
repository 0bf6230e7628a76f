"""Non-learning timeout policies used as comparison points."""

from __future__ import annotations

import math

from ..records import Decision, DecisionContext, Feedback, Outcome
from .arms import ArmSet, sample_timeout
from .base import PolicyError, TimeoutPolicy
from .estimators import DelayEstimator, Ewma, QuantileEstimator, phi


class _RangePolicy(TimeoutPolicy):
    def __init__(self, arms: ArmSet, min_jitter_ms: float = 0.0):
        self.arms = arms
        self.min_jitter_ms = min_jitter_ms

    def _decide(self, rng, lo: float, hi: float, arm: int | None) -> Decision:
        t, lo, hi = sample_timeout(rng, lo, hi, self.min_jitter_ms)
        return Decision(t, arm, lo, hi)


class RandomPolicy(_RangePolicy):
    name = "random"

    def __init__(self, arms: ArmSet, range_ms=(150.0, 300.0), min_jitter_ms: float = 0.0):
        super().__init__(arms, min_jitter_ms)
        self.range_ms = tuple(range_ms)

    def choose(self, ctx, rng):
        return self._decide(rng, *self.range_ms, None)


class StaticPolicy(_RangePolicy):
    """Always the most conservative arm of the configured set."""

    name = "static_conservative"

    def choose(self, ctx, rng):
        i = self.arms.safe_index
        return self._decide(rng, *self.arms[i], i)


class BackoffPolicy(_RangePolicy):
    """Doubles both range endpoints per consecutive local failure; success resets.

    The upper endpoint is capped at twice the conservative arm's T_max.
    """

    name = "backoff"

    def __init__(self, arms: ArmSet, min_jitter_ms: float = 0.0, cap_factor: float = 2.0):
        super().__init__(arms, min_jitter_ms)
        self.cap_ms = arms[arms.safe_index][1] * cap_factor
        self.failures = 0

    def current_range(self) -> tuple[float, float]:
        lo, hi = self.arms[0]
        k_max = max(0, int(math.floor(math.log2(self.cap_ms / hi))))
        k = min(self.failures, k_max)
        return lo * 2**k, hi * 2**k

    def choose(self, ctx, rng):
        return self._decide(rng, *self.current_range(), None)

    def observe_outcome(self, attempt):
        if attempt.outcome is Outcome.WON:
            self.failures = 0
        elif attempt.outcome is Outcome.FAILED:
            self.failures += 1
        return Feedback()

    def state_dict(self):
        return {"failures": self.failures}

    def load_state_dict(self, d):
        self.failures = d["failures"]


def threshold_level(value: float, thresholds: tuple[float, float]) -> int:
    """0 below the low threshold, 1 between, 2 at or above the high threshold."""
    lo, hi = thresholds
    if value < lo:
        return 0
    if value < hi:
        return 1
    return 2


class RttHeuristicPolicy(_RangePolicy):
    name = "rtt_heuristic"

    def __init__(self, arms: ArmSet, thr=(50.0, 200.0), oneway_factor: float = 2.0, min_jitter_ms: float = 0.0):
        super().__init__(arms, min_jitter_ms)
        self.thr = tuple(thr)
        self.oneway_factor = oneway_factor
        self.delays = DelayEstimator()

    def arm_for(self, estimate_ms: float | None) -> int:
        levels = self.arms.pick3()
        if estimate_ms is None:
            return levels[1]
        return levels[threshold_level(estimate_ms, self.thr)]

    def choose(self, ctx, rng):
        arm = self.arm_for(self.delays.estimate(self.oneway_factor))
        return self._decide(rng, *self.arms[arm], arm)

    def observe_heartbeat(self, interarrival_ms, oneway_ms):
        self.delays.oneway.update(oneway_ms)

    def observe_rtt(self, rtt_ms):
        self.delays.rtt.update(rtt_ms)

    def state_dict(self):
        return {"delays": self.delays.state_dict()}

    def load_state_dict(self, d):
        self.delays.load_state_dict(d["delays"])


class PhiAccrualPolicy(_RangePolicy):
    """Maps accrual suspicion onto three arms: more suspicion, longer timeout.

    Suspicion is evaluated for the larger of the last observed inter-arrival
    gap and the time elapsed since the last heartbeat.
    """

    name = "phi_accrual"

    def __init__(self, arms: ArmSet, phi=(2.0, 3.0), ewma_alpha: float = 0.125, min_jitter_ms: float = 0.0):
        super().__init__(arms, min_jitter_ms)
        self.thr = tuple(phi)
        self.stats = Ewma(ewma_alpha)
        self.last_gap: float | None = None

    def suspicion(self, since_ms: float) -> float | None:
        if self.stats.mean is None:
            return None
        elapsed = max(self.last_gap or 0.0, since_ms)
        return phi(elapsed, self.stats.mean, self.stats.std)

    def arm_for(self, level: float | None) -> int:
        levels = self.arms.pick3()
        if level is None:
            return levels[1]
        return levels[threshold_level(level, self.thr)]

    def choose(self, ctx, rng):
        arm = self.arm_for(self.suspicion(ctx.features.time_since_last_hb))
        return self._decide(rng, *self.arms[arm], arm)

    def observe_heartbeat(self, interarrival_ms, oneway_ms):
        if interarrival_ms is not None:
            self.stats.update(interarrival_ms)
            self.last_gap = interarrival_ms

    def state_dict(self):
        return {"stats": self.stats.state_dict(), "last_gap": self.last_gap}

    def load_state_dict(self, d):
        self.stats.load_state_dict(d["stats"])
        self.last_gap = d["last_gap"]


class QuantileDecayPolicy(_RangePolicy):
    name = "quantile_decay"

    def __init__(self, arms: ArmSet, p: float = 0.9, mult=(3.0, 10.0), decay: float = 0.99, min_jitter_ms: float = 0.0):
        super().__init__(arms, min_jitter_ms)
        self.mult = tuple(mult)
        self.quantile = QuantileEstimator(p, decay)

    def timeout_range(self) -> tuple[float, float]:
        q = self.quantile.estimate
        if q is None:
            return self.arms[self.arms.pick3()[1]]
        return self.mult[0] * q, self.mult[1] * q

    def choose(self, ctx, rng):
        return self._decide(rng, *self.timeout_range(), None)

    def observe_heartbeat(self, interarrival_ms, oneway_ms):
        if interarrival_ms is not None:
            self.quantile.update(interarrival_ms)

    def state_dict(self):
        return {"quantile": self.quantile.state_dict()}

    def load_state_dict(self, d):
        self.quantile.load_state_dict(d["quantile"])


def dynatune_et_timeout(rtt_ms: float, heartbeat_ms: float, safety_factor=4.0, min_hb_ratio=5.0, clamp_max_ms=2400.0) -> float:
    return min(max(safety_factor * rtt_ms, min_hb_ratio * heartbeat_ms), clamp_max_ms)


def dynatune_joint_adjust(
    rtt_ms: float,
    safety_factor=2.0,
    heartbeat_ratio=4.0,
    hb_min_ms=20.0,
    hb_max_ms=1000.0,
    min_hb_ratio=4.0,
    clamp_max_ms=2400.0,
) -> tuple[float, float]:
    """Returns (heartbeat_interval_ms, timeout_ms) derived from one base."""
    base = safety_factor * rtt_ms
    hb = min(max(base / heartbeat_ratio, hb_min_ms), hb_max_ms)
    return hb, min(max(base, min_hb_ratio * hb), clamp_max_ms)


class DynatunePolicy(_RangePolicy):
    """RTT-driven timeout; ``joint=True`` also retunes the heartbeat cadence.

    The computed timeout T is randomised uniformly over [T, T*(1+jitter_ratio)].
    Until a delay sample exists the moderate arm is used.
    """

    def __init__(
        self,
        arms: ArmSet,
        joint: bool = False,
        safety_factor: float | None = None,
        oneway_factor: float = 2.0,
        min_hb_ratio: float | None = None,
        clamp_max_ms: float = 2400.0,
        heartbeat_ratio: float = 4.0,
        hb_min_ms: float = 20.0,
        hb_max_ms: float = 1000.0,
        jitter_ratio: float = 0.5,
        min_jitter_ms: float = 0.0,
    ):
        super().__init__(arms, min_jitter_ms)
        self.joint = joint
        self.name = "dynatune_joint" if joint else "dynatune_et"
        self.safety_factor = safety_factor if safety_factor is not None else (2.0 if joint else 4.0)
        self.min_hb_ratio = min_hb_ratio if min_hb_ratio is not None else (4.0 if joint else 5.0)
        self.oneway_factor = oneway_factor
        self.clamp_max_ms = clamp_max_ms
        self.heartbeat_ratio = heartbeat_ratio
        self.hb_min_ms = hb_min_ms
        self.hb_max_ms = hb_max_ms
        self.jitter_ratio = jitter_ratio
        self.delays = DelayEstimator()
        self._hb_ms: float | None = None

    def target(self, heartbeat_ms: float) -> float | None:
        est = self.delays.estimate(self.oneway_factor)
        if est is None:
            return None
        if self.joint:
            self._hb_ms, t = dynatune_joint_adjust(
                est, self.safety_factor, self.heartbeat_ratio, self.hb_min_ms,
                self.hb_max_ms, self.min_hb_ratio, self.clamp_max_ms,
            )
            return t
        return dynatune_et_timeout(est, heartbeat_ms, self.safety_factor, self.min_hb_ratio, self.clamp_max_ms)

    def choose(self, ctx, rng):
        t = self.target(ctx.heartbeat_interval_ms)
        if t is None:
            mid = self.arms.pick3()[1]
            return self._decide(rng, *self.arms[mid], mid)
        return self._decide(rng, t, t * (1 + self.jitter_ratio), None)

    def heartbeat_interval_ms(self):
        return self._hb_ms if self.joint else None

    def observe_heartbeat(self, interarrival_ms, oneway_ms):
        self.delays.oneway.update(oneway_ms)

    def observe_rtt(self, rtt_ms):
        self.delays.rtt.update(rtt_ms)

    def state_dict(self):
        return {"delays": self.delays.state_dict(), "hb_ms": self._hb_ms}

    def load_state_dict(self, d):
        self.delays.load_state_dict(d["delays"])
        self._hb_ms = d["hb_ms"]


class OraclePolicy(_RangePolicy):
    """Privileged baseline: reads the injected regime id and maps it to an arm."""

    def __init__(self, arms: ArmSet, mapping: dict, name: str = "oracle_hint", min_jitter_ms: float = 0.0):
        super().__init__(arms, min_jitter_ms)
        self.name = name
        self.mapping = {int(k): int(v) for k, v in dict(mapping).items()}
        for k, v in self.mapping.items():
            if not 0 <= v < len(arms):
                raise PolicyError(f"regime {k} mapped to unknown arm {v}")

    def choose(self, ctx: DecisionContext, rng) -> Decision:
        regime = ctx.features.regime_id
        try:
            arm = self.mapping[regime]
        except KeyError:
            raise PolicyError(f"regime {regime!r} has no arm in the oracle mapping") from None
        return self._decide(rng, *self.arms[arm], arm)


def oracle_timeout(mapping: dict, regime_id: int, arms: ArmSet, rng, min_jitter_ms: float = 0.0) -> int:
    if regime_id not in mapping:
        raise PolicyError(f"regime {regime_id!r} has no arm in the oracle mapping")
    return sample_timeout(rng, *arms[mapping[regime_id]], min_jitter_ms)[0]


def enumerate_mappings(n_arms: int, regimes: list[int]) -> list[dict[int, int]]:
    """All |arms|^|regimes| regime->arm assignments, in lexicographic order."""
    out: list[dict[int, int]] = [{}]
    for r in regimes:
        out = [{**m, r: a} for m in out for a in range(n_arms)]
    return out
