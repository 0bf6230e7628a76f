"""Scenario configuration: YAML schema, validation and shipped presets.

All validation problems are collected and reported together, each prefixed
with the path of the offending field (``network.regimes[1].delay.base_ms``).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any

import yaml

from .engine import RngStream, ms
from .net import (
    LEADER,
    BurstModel,
    Crash,
    DelayModel,
    FaultSchedule,
    LossModel,
    Network,
    Partition,
    Regime,
    RegimeSchedule,
    TailModel,
)
from .policies import ARM_SETS, METHODS, ArmSet

FORMAT_VERSION = 1
PRESETS = ("main-hard-wan", "partition-turbulence", "stable-wan", "lan", "alignment-stress")


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        super().__init__("invalid scenario config:\n  " + "\n  ".join(errors))
        self.errors = errors


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    n: int
    horizon_ms: float
    heartbeat_interval_ms: float = 50.0
    tick_ms: float = 10.0
    reset_on_restart: bool = False
    arm_set: str | None = "standard3"
    arms: tuple[tuple[float, float], ...] = ARM_SETS["standard3"]
    arm_width_ms: float | None = None
    min_jitter_width_ms: float = 0.0
    regimes: tuple[Regime, ...] = (Regime(0),)
    schedule: RegimeSchedule = RegimeSchedule()
    service_delay_ms: tuple[float, ...] = ()
    faults: FaultSchedule = FaultSchedule()
    policy_id: str = "bandit_safe"
    policy_params: dict = field(default_factory=dict)
    tuning_seeds: tuple[int, ...] = tuple(range(1000, 1010))
    report_seeds: tuple[int, ...] = tuple(range(10))

    @property
    def horizon_us(self) -> int:
        return ms(self.horizon_ms)

    def arm_set_obj(self) -> ArmSet:
        arms = ArmSet(self.arms)
        return arms.narrowed(self.arm_width_ms) if self.arm_width_ms else arms

    def with_policy(self, policy_id: str, params: dict | None = None) -> "ScenarioConfig":
        return replace(self, policy_id=policy_id, policy_params=dict(params or {}))

    def replace(self, **kw) -> "ScenarioConfig":
        return replace(self, **kw)

    def build_network(self, rng: RngStream) -> Network:
        regimes = {r.id: r for r in self.regimes}
        service = list(self.service_delay_ms) or None
        return Network(self.n, regimes, self.schedule, rng, service)

    def to_dict(self) -> dict:
        return to_dict(self)


# ---------------------------------------------------------------------------
# parsing


class _Reader:
    """Pulls typed fields out of nested dicts, recording errors instead of raising."""

    def __init__(self):
        self.errors: list[str] = []

    def err(self, path: str, msg: str) -> None:
        self.errors.append(f"{path}: {msg}")

    def get(self, d: dict, key: str, path: str, kind, default=..., check=None):
        where = f"{path}.{key}" if path else key
        if not isinstance(d, dict) or key not in d or d[key] is None:
            if default is ...:
                self.err(where, "missing required field")
                return None
            return default
        v = d[key]
        if kind is float and isinstance(v, (int, float)) and not isinstance(v, bool):
            v = float(v)
        elif kind is int and isinstance(v, int) and not isinstance(v, bool):
            pass
        elif kind in (str, bool, list, dict) and isinstance(v, kind):
            pass
        else:
            self.err(where, f"expected {kind.__name__}, got {type(v).__name__}")
            return None if default is ... else default
        if check is not None:
            msg = check(v)
            if msg:
                self.err(where, msg)
        return v


def _nonneg(v):
    return "must be >= 0" if v < 0 else None


def _positive(v):
    return "must be > 0" if v <= 0 else None


def _prob(v):
    return "must be in [0, 1]" if not 0 <= v <= 1 else None


def _parse_regime(rd: _Reader, d: dict, path: str) -> Regime | None:
    rid = rd.get(d, "id", path, int, check=_nonneg)
    dd = rd.get(d, "delay", path, dict, {})
    dp = f"{path}.delay"
    tail = None
    td = rd.get(dd, "tail", dp, dict, None)
    if td is not None:
        tp = f"{dp}.tail"
        tail = TailModel(
            rd.get(td, "shape", tp, float, 2.0, _positive),
            rd.get(td, "scale_ms", tp, float, 100.0, _positive),
            rd.get(td, "mix_probability", tp, float, 0.0, _prob),
        )
    delay = DelayModel(
        rd.get(dd, "base_ms", dp, float, 1.0, _nonneg),
        rd.get(dd, "jitter_std_ms", dp, float, 0.0, _nonneg),
        tail,
    )
    ld = rd.get(d, "loss", path, dict, {})
    lp = f"{path}.loss"
    burst = None
    bd = rd.get(ld, "burst", lp, dict, None)
    if bd is not None:
        bp = f"{lp}.burst"
        burst = BurstModel(
            rd.get(bd, "p_good_bad", bp, float, check=_prob),
            rd.get(bd, "p_bad_good", bp, float, check=_prob),
            rd.get(bd, "loss_in_bad", bp, float, 1.0, _prob),
        )
    loss = LossModel(rd.get(ld, "iid", lp, float, 0.0, _prob), burst)
    if rid is None:
        return None
    return Regime(rid, delay, loss)


def parse_config(doc: dict) -> ScenarioConfig:
    """Validate a parsed YAML document. Raises :class:`ConfigError` listing every problem."""
    rd = _Reader()
    if not isinstance(doc, dict):
        raise ConfigError(["<root>: expected a mapping"])
    version = rd.get(doc, "format_version", "", int)
    if version is not None and version != FORMAT_VERSION:
        rd.err("format_version", f"unsupported version {version} (expected {FORMAT_VERSION})")
    name = rd.get(doc, "name", "", str, "unnamed")

    cl = rd.get(doc, "cluster", "", dict, {})
    n = rd.get(cl, "n", "cluster", int, check=lambda v: "must be >= 1" if v < 1 else None)
    horizon = rd.get(cl, "horizon_ms", "cluster", float, check=_positive)
    hb = rd.get(cl, "heartbeat_interval_ms", "cluster", float, 50.0, _positive)
    tick = rd.get(cl, "tick_ms", "cluster", float, 10.0, _positive)
    reset = rd.get(cl, "reset_on_restart", "cluster", bool, False)

    ad = rd.get(doc, "arms", "", dict, {})
    arm_set_name = None
    arms_raw = ad.get("set", "standard3") if isinstance(ad, dict) else "standard3"
    arms: tuple = ARM_SETS["standard3"]
    if isinstance(arms_raw, str):
        if arms_raw not in ARM_SETS:
            rd.err("arms.set", f"unknown arm set {arms_raw!r} (known: {', '.join(ARM_SETS)})")
        else:
            arm_set_name, arms = arms_raw, ARM_SETS[arms_raw]
    elif isinstance(arms_raw, list) and all(isinstance(a, (list, tuple)) and len(a) == 2 for a in arms_raw):
        arms = tuple((float(lo), float(hi)) for lo, hi in arms_raw)
    else:
        rd.err("arms.set", "expected an arm-set name or a list of [T_min, T_max] pairs")
    width = rd.get(ad, "width_ms", "arms", float, None, _positive)
    jitter = rd.get(ad, "min_jitter_width_ms", "arms", float, 0.0, _nonneg)
    try:
        arm_obj = ArmSet(arms)
        if width:
            arm_obj.narrowed(width)
    except ValueError as e:
        rd.err("arms.set", str(e))

    nd = rd.get(doc, "network", "", dict, {})
    regimes = []
    for i, r in enumerate(rd.get(nd, "regimes", "network", list, [{"id": 0}])):
        reg = _parse_regime(rd, r, f"network.regimes[{i}]")
        if reg is not None:
            regimes.append(reg)
    ids = [r.id for r in regimes]
    if len(set(ids)) != len(ids):
        rd.err("network.regimes", "duplicate regime ids")
    switches = []
    for i, s in enumerate(rd.get(nd, "schedule", "network", list, [{"at_ms": 0, "regime": 0}])):
        sp = f"network.schedule[{i}]"
        at = rd.get(s, "at_ms", sp, float, check=_nonneg)
        reg = rd.get(s, "regime", sp, int)
        if reg is not None and reg not in ids:
            rd.err(f"{sp}.regime", f"references undefined regime {reg}")
        if at is not None and reg is not None:
            switches.append((ms(at), reg))
    schedule = RegimeSchedule()
    try:
        schedule = RegimeSchedule(tuple(switches))
    except ValueError as e:
        rd.err("network.schedule", str(e))
    if horizon is not None and any(t >= ms(horizon) for t, _ in switches[1:]):
        rd.err("network.schedule", "regime switch at or after the horizon")
    service = rd.get(nd, "service_delay_ms", "network", list, [])
    if service and n is not None and len(service) != n:
        rd.err("network.service_delay_ms", f"expected {n} entries, got {len(service)}")
    if any(not isinstance(s, (int, float)) or s < 0 for s in service):
        rd.err("network.service_delay_ms", "entries must be non-negative numbers")

    fd = rd.get(doc, "faults", "", dict, {})
    crashes = []
    for i, c in enumerate(rd.get(fd, "crashes", "faults", list, [])):
        cp = f"faults.crashes[{i}]"
        node = c.get("node") if isinstance(c, dict) else None
        if not (node == LEADER or (isinstance(node, int) and not isinstance(node, bool))):
            rd.err(f"{cp}.node", "expected a node id or 'leader'")
            node = None
        down = rd.get(c, "down_ms", cp, float, check=_nonneg)
        up = rd.get(c, "up_ms", cp, float, check=_nonneg)
        if node is not None and down is not None and up is not None:
            crashes.append(Crash(node, ms(down), ms(up)))
    partitions = []
    for i, p in enumerate(rd.get(fd, "partitions", "faults", list, [])):
        pp = f"faults.partitions[{i}]"
        groups = rd.get(p, "groups", pp, list)
        start = rd.get(p, "start_ms", pp, float, check=_nonneg)
        end = rd.get(p, "end_ms", pp, float, check=_nonneg)
        if groups is not None and (len(groups) != 2 or not all(isinstance(g, list) for g in groups)):
            rd.err(f"{pp}.groups", "expected two lists of node ids")
            groups = None
        if groups is not None and start is not None and end is not None:
            partitions.append(Partition((frozenset(groups[0]), frozenset(groups[1])), ms(start), ms(end)))
    faults = FaultSchedule(tuple(crashes), tuple(partitions))
    if n is not None:
        rd.errors.extend(faults.validate(n))

    pd = rd.get(doc, "policy", "", dict, {})
    pid = rd.get(pd, "id", "policy", str, "bandit_safe")
    if pid not in METHODS:
        rd.err("policy.id", f"unknown policy id {pid!r}")
    params = rd.get(pd, "params", "policy", dict, {})

    sd = rd.get(doc, "seeds", "", dict, {})
    tuning = tuple(rd.get(sd, "tuning", "seeds", list, list(range(1000, 1010))))
    report = tuple(rd.get(sd, "report", "seeds", list, list(range(10))))
    if set(tuning) & set(report):
        rd.err("seeds", "tuning and report seeds must be disjoint")

    if rd.errors:
        raise ConfigError(rd.errors)
    cfg = ScenarioConfig(
        name=name, n=n, horizon_ms=horizon, heartbeat_interval_ms=hb, tick_ms=tick,
        reset_on_restart=reset, arm_set=arm_set_name, arms=arms, arm_width_ms=width,
        min_jitter_width_ms=jitter, regimes=tuple(sorted(regimes, key=lambda r: r.id)),
        schedule=schedule, service_delay_ms=tuple(float(s) for s in service), faults=faults,
        policy_id=pid, policy_params=params, tuning_seeds=tuning, report_seeds=report,
    )
    # surface unusable policy parameters at load time
    from .policies import PolicyError, make_policy

    try:
        make_policy(pid, cfg.arm_set_obj(), params, min_jitter_ms=jitter, regimes=ids)
    except (PolicyError, TypeError, ValueError) as e:
        raise ConfigError([f"policy.params: {e}"]) from None
    return cfg


# ---------------------------------------------------------------------------
# canonical serialisation


def _num(v: float):
    return int(v) if float(v).is_integer() else v


def _us_to_ms(t: int):
    return _num(t / 1000)


def to_dict(cfg: ScenarioConfig) -> dict[str, Any]:
    def regime(r: Regime) -> dict:
        delay: dict[str, Any] = {"base_ms": _num(r.delay.base_ms), "jitter_std_ms": _num(r.delay.jitter_std_ms)}
        if r.delay.tail is not None:
            t = r.delay.tail
            delay["tail"] = {"shape": _num(t.shape), "scale_ms": _num(t.scale_ms), "mix_probability": t.mix_probability}
        loss: dict[str, Any] = {"iid": r.loss.iid}
        if r.loss.burst is not None:
            b = r.loss.burst
            loss["burst"] = {"p_good_bad": b.p_good_bad, "p_bad_good": b.p_bad_good, "loss_in_bad": b.loss_in_bad}
        return {"id": r.id, "delay": delay, "loss": loss}

    arms: dict[str, Any] = {
        "set": cfg.arm_set if cfg.arm_set else [[_num(lo), _num(hi)] for lo, hi in cfg.arms],
        "min_jitter_width_ms": _num(cfg.min_jitter_width_ms),
    }
    if cfg.arm_width_ms:
        arms["width_ms"] = _num(cfg.arm_width_ms)
    network: dict[str, Any] = {
        "regimes": [regime(r) for r in cfg.regimes],
        "schedule": [{"at_ms": _us_to_ms(t), "regime": r} for t, r in cfg.schedule.switches],
    }
    if cfg.service_delay_ms:
        network["service_delay_ms"] = [_num(s) for s in cfg.service_delay_ms]
    return {
        "format_version": FORMAT_VERSION,
        "name": cfg.name,
        "cluster": {
            "n": cfg.n,
            "horizon_ms": _num(cfg.horizon_ms),
            "heartbeat_interval_ms": _num(cfg.heartbeat_interval_ms),
            "tick_ms": _num(cfg.tick_ms),
            "reset_on_restart": cfg.reset_on_restart,
        },
        "arms": arms,
        "network": network,
        "faults": {
            "crashes": [
                {"node": c.node, "down_ms": _us_to_ms(c.down_us), "up_ms": _us_to_ms(c.up_us)}
                for c in cfg.faults.crashes
            ],
            "partitions": [
                {"groups": [sorted(g) for g in p.groups], "start_ms": _us_to_ms(p.start_us), "end_ms": _us_to_ms(p.end_us)}
                for p in cfg.faults.partitions
            ],
        },
        "policy": {"id": cfg.policy_id, "params": copy.deepcopy(cfg.policy_params)},
        "seeds": {"tuning": list(cfg.tuning_seeds), "report": list(cfg.report_seeds)},
    }


def dumps_config(cfg: ScenarioConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False, default_flow_style=None)


# ---------------------------------------------------------------------------
# loading


def preset_text(name: str) -> str:
    if name not in PRESETS:
        raise ConfigError([f"<preset>: unknown preset {name!r} (known: {', '.join(PRESETS)})"])
    return resources.files("electsim.presets").joinpath(f"{name}.yaml").read_text()


def loads_config(text: str) -> ScenarioConfig:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError([f"<yaml>: {e}"]) from None
    return parse_config(doc)


def load_config(ref: str | Path) -> ScenarioConfig:
    """Load a preset by name or a scenario file by path."""
    if isinstance(ref, str) and ref in PRESETS:
        return loads_config(preset_text(ref))
    path = Path(ref)
    if not path.exists():
        raise ConfigError([f"<file>: no preset or file named {str(ref)!r}"])
    return loads_config(path.read_text())
