"""Election-timeout policies behind a single decision interface."""

from __future__ import annotations

from typing import Callable

from .arms import ARM_SETS, RELATIVE_ARMS, ArmSet, sample_timeout, widen
from .bandit import BanditPolicy, bandit_qdecay
from .base import PolicyError, SafetyGate, TimeoutPolicy, restore, snapshot
from .baselines import (
    BackoffPolicy,
    DynatunePolicy,
    OraclePolicy,
    PhiAccrualPolicy,
    QuantileDecayPolicy,
    RandomPolicy,
    RttHeuristicPolicy,
    StaticPolicy,
    dynatune_et_timeout,
    dynatune_joint_adjust,
    enumerate_mappings,
    oracle_timeout,
)
from .linucb import LinearArms

# methods evaluated in the main comparison, in table order
MAIN_METHODS = (
    "random",
    "static_conservative",
    "backoff",
    "rtt_heuristic",
    "phi_accrual",
    "quantile_decay",
    "bandit_qdecay",
    "dynatune_et",
    "dynatune_joint",
    "bandit_safe",
    "bandit_ts_safe",
    "oracle_hint",
    "oracle_best_per_regime",
)

METHODS = MAIN_METHODS + ("bandit", "bandit_safe_ln")

_BANDITS = {"bandit_safe", "bandit", "bandit_ts_safe", "bandit_qdecay", "bandit_safe_ln"}


def _coerce_arms(value) -> ArmSet:
    if isinstance(value, ArmSet):
        return value
    if isinstance(value, str):
        return ArmSet.named(value)
    return ArmSet(tuple((float(lo), float(hi)) for lo, hi in value))


def default_mapping(method: str, arms: ArmSet, regimes) -> dict[int, int]:
    _, mid, _ = arms.pick3()
    if method == "oracle_hint":
        # calm first regime -> aggressive arm, anything later -> moderate
        return {r: (0 if r == 0 else mid) for r in regimes}
    return {r: mid for r in regimes}


def make_policy(
    method: str,
    arms: ArmSet,
    params: dict | None = None,
    *,
    min_jitter_ms: float = 0.0,
    regimes=(0,),
) -> TimeoutPolicy:
    """Build one node's policy instance for ``method`` with ``params`` overrides."""
    if method not in METHODS:
        raise PolicyError(f"unknown policy id {method!r}")
    p = dict(params or {})
    if method == "bandit_safe_ln":
        p.setdefault("arm_set", "shifted3")
        p.setdefault("min_jitter_ms", 40.0)
    if "arm_set" in p:
        arms = _coerce_arms(p.pop("arm_set"))
    jitter = max(min_jitter_ms, float(p.pop("min_jitter_ms", 0.0)))

    if method in _BANDITS:
        if "reward_weights" in p:
            p["reward_weights"] = tuple(p["reward_weights"])
        if method == "bandit":
            p.setdefault("safety", False)
        if method == "bandit_ts_safe":
            p.setdefault("learner", "ts")
        if method == "bandit_qdecay":
            return bandit_qdecay(arms, min_jitter_ms=jitter, **p)
        return BanditPolicy(arms, min_jitter_ms=jitter, name=method, **p)
    if method == "random":
        return RandomPolicy(arms, min_jitter_ms=jitter, **p)
    if method == "static_conservative":
        return StaticPolicy(arms, min_jitter_ms=jitter, **p)
    if method == "backoff":
        return BackoffPolicy(arms, min_jitter_ms=jitter, **p)
    if method == "rtt_heuristic":
        return RttHeuristicPolicy(arms, min_jitter_ms=jitter, **p)
    if method == "phi_accrual":
        return PhiAccrualPolicy(arms, min_jitter_ms=jitter, **p)
    if method == "quantile_decay":
        return QuantileDecayPolicy(arms, min_jitter_ms=jitter, **p)
    if method in ("dynatune_et", "dynatune_joint"):
        return DynatunePolicy(arms, joint=method == "dynatune_joint", min_jitter_ms=jitter, **p)
    mapping = p.pop("mapping", None) or default_mapping(method, arms, regimes)
    return OraclePolicy(arms, mapping, name=method, min_jitter_ms=jitter, **p)


def policy_factory(method: str, arms: ArmSet, params: dict | None = None, **kw) -> Callable[[], TimeoutPolicy]:
    make_policy(method, arms, params, **kw)  # fail fast on bad parameters
    return lambda: make_policy(method, arms, params, **kw)


__all__ = [
    "ARM_SETS", "RELATIVE_ARMS", "ArmSet", "BackoffPolicy", "BanditPolicy", "DynatunePolicy",
    "LinearArms", "MAIN_METHODS", "METHODS", "OraclePolicy", "PhiAccrualPolicy", "PolicyError",
    "QuantileDecayPolicy", "RandomPolicy", "RttHeuristicPolicy", "SafetyGate", "StaticPolicy",
    "TimeoutPolicy", "dynatune_et_timeout", "dynatune_joint_adjust", "enumerate_mappings",
    "make_policy", "oracle_timeout", "policy_factory", "restore", "sample_timeout", "snapshot", "widen",
]
