"""Contextual-bandit timeout policies (LinUCB / linear TS + safety gate)."""

from __future__ import annotations

import numpy as np

from ..records import ContextVector, Decision, DecisionContext, ElectionAttempt, Feedback, Outcome, RewardWeights, shaped_reward
from .arms import RELATIVE_ARMS, ArmSet, sample_timeout
from .base import PolicyError, SafetyGate, TimeoutPolicy
from .estimators import QuantileEstimator, RunningZ
from .linucb import LinearArms

FEATURE_NORMS = ("raw", "z", "z_clip3")


class BanditPolicy(TimeoutPolicy):
    """Per-node learner choosing a timeout arm for every deadline reset.

    Only candidate-attempt outcomes update the model, and only the arm that
    was chosen for that attempt.
    """

    name = "bandit_safe"

    def __init__(
        self,
        arms: ArmSet,
        *,
        learner: str = "ucb",
        alpha: float = 1.0,
        l2: float = 1.0,
        nonstationary: str = "discount",
        discount: float = 0.98,
        window: int = 200,
        ts_scale: float = 1.5,
        safety: bool = True,
        safe_F: int = 3,
        safe_cooldown: int = 2,
        reward_weights: tuple[float, float, float] = (1.0, 0.002, 1.0),
        features: str = "full",
        feature_norm: str = "raw",
        min_jitter_ms: float = 0.0,
        relative_arms: tuple | None = None,
        quantile_p: float = 0.95,
        quantile_decay: float = 0.99,
        name: str | None = None,
    ):
        if learner not in ("ucb", "ts"):
            raise PolicyError(f"unknown learner {learner!r}")
        if features not in ("full", "hb_only"):
            raise PolicyError(f"unknown feature set {features!r}")
        if feature_norm not in FEATURE_NORMS:
            raise PolicyError(f"unknown feature_norm {feature_norm!r}")
        if alpha < 0 or ts_scale < 0:
            raise PolicyError("alpha and ts_scale must be non-negative")
        if l2 <= 0:
            raise PolicyError("l2 must be positive")
        if not 0 < discount <= 1:
            raise PolicyError("discount must be in (0, 1]")
        if window < 1:
            raise PolicyError("window must be >= 1")
        if name:
            self.name = name
        self.arms = arms
        self.relative = tuple(tuple(m) for m in relative_arms) if relative_arms else None
        self.n_arms = len(self.relative) if self.relative else len(arms)
        self.safe_arm = self.n_arms - 1
        self.learner = learner
        self.alpha = alpha
        self.ts_scale = ts_scale
        self.weights = RewardWeights(*reward_weights)
        self.features = features
        self.feature_norm = feature_norm
        self.min_jitter_ms = min_jitter_ms
        self.dim = 5 if features == "full" else 4
        mode = {"none": "plain", "discount": "discount", "window": "window"}.get(nonstationary)
        if mode is None:
            raise PolicyError(f"unknown nonstationary mode {nonstationary!r}")
        self.model = LinearArms(self.n_arms, self.dim, l2=l2, mode=mode, gamma=discount, window=window)
        self.gate = SafetyGate(safe_F, safe_cooldown, enabled=safety)
        self.norm = RunningZ(self.dim - 1) if feature_norm != "raw" else None
        self.quantile = QuantileEstimator(quantile_p, quantile_decay) if self.relative else None

    # -- features -----------------------------------------------------------
    def featurize(self, c: ContextVector) -> np.ndarray:
        if self.features == "full":
            raw = [c.hb_interarrival_mean, c.hb_interarrival_std, c.time_since_last_hb, float(c.consecutive_failures)]
        else:
            raw = [c.hb_interarrival_mean, c.hb_interarrival_std, c.time_since_last_hb]
        v = np.array(raw, dtype=float)
        if self.norm is not None:
            self.norm.update(v)
            v = self.norm.transform(v, clip=3.0 if self.feature_norm == "z_clip3" else None)
        return np.append(v, 1.0)

    # -- arm geometry ---------------------------------------------------------
    def base_ms(self, fallback: float) -> float:
        est = self.quantile.estimate if self.quantile is not None else None
        return fallback if est is None else est

    def arm_range(self, arm: int, ctx: DecisionContext | None = None) -> tuple[float, float]:
        if self.relative is None:
            return self.arms[arm]
        base = self.base_ms(ctx.heartbeat_interval_ms if ctx else 50.0)
        lo, hi = self.relative[arm]
        return base * lo, base * hi

    # -- decisions ----------------------------------------------------------
    @property
    def forced_safe(self) -> bool:
        return self.gate.forced

    def select_arm(self, x: np.ndarray, rng) -> int:
        if self.gate.forced:
            return self.safe_arm
        if self.learner == "ucb":
            return self.model.ucb_choose(x, self.alpha)
        return self.model.ts_choose(x, self.ts_scale, rng.np)

    def choose(self, ctx: DecisionContext, rng) -> Decision:
        x = self.featurize(ctx.features)
        forced = self.gate.forced
        arm = self.select_arm(x, rng)
        lo, hi = self.arm_range(arm, ctx)
        t, lo, hi = sample_timeout(rng, lo, hi, self.min_jitter_ms)
        return Decision(t, arm, lo, hi, forced, token=x)

    def observe_outcome(self, attempt: ElectionAttempt) -> Feedback:
        if attempt.outcome is Outcome.SUPERSEDED or attempt.outcome is None or attempt.arm is None:
            return Feedback()
        won = attempt.outcome is Outcome.WON
        r = shaped_reward(won, attempt.latency_ms, self.weights)
        self.model.update(attempt.arm, attempt.token, r)
        transition = self.gate.on_success() if won else self.gate.on_failure()
        return Feedback(r, transition)

    def observe_heartbeat(self, interarrival_ms: float | None, oneway_ms: float) -> None:
        if self.quantile is not None and interarrival_ms is not None:
            self.quantile.update(interarrival_ms)

    # -- persistence ----------------------------------------------------------
    def state_dict(self) -> dict:
        d = {"model": self.model.state_dict(), "gate": self.gate.state_dict()}
        if self.norm is not None:
            d["norm"] = self.norm.state_dict()
        if self.quantile is not None:
            d["quantile"] = self.quantile.state_dict()
        return d

    def load_state_dict(self, d: dict) -> None:
        self.model = LinearArms.from_state_dict(d["model"])
        self.gate.load_state_dict(d["gate"])
        if self.norm is not None:
            self.norm.load_state_dict(d["norm"])
        if self.quantile is not None:
            self.quantile.load_state_dict(d["quantile"])


def bandit_qdecay(arms: ArmSet, **kw) -> BanditPolicy:
    kw.setdefault("relative_arms", RELATIVE_ARMS)
    kw.setdefault("quantile_p", 0.95)
    return BanditPolicy(arms, name="bandit_qdecay", **kw)
