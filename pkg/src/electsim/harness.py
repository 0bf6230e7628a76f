"""Experiment orchestration: single runs, seed sweeps, baseline tuning,
ablation self-checks, overhead benchmarks and cross-method aggregation."""

from __future__ import annotations

import csv
import json
import logging
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import yaml

from .config import ConfigError, ScenarioConfig, load_config, parse_config
from .engine import RngStream, TraceSink, trace_digest, write_trace
from .metrics import MetricsSummary, bootstrap_ci, summarize
from .policies import METHODS, PolicyError, enumerate_mappings, make_policy, policy_factory
from .raft import Cluster

log = logging.getLogger(__name__)


@dataclass
class RunResult:
    scenario: str
    method: str
    seed: int
    params: dict
    digest: str
    metrics: MetricsSummary
    trace: bytes | None = None
    wall_s: float = 0.0

    def record(self) -> dict:
        return {
            "scenario": self.scenario, "method": self.method, "seed": self.seed, "params": self.params,
            "digest": self.digest, "wall_s": round(self.wall_s, 3), "metrics": self.metrics.to_dict(),
        }


def simulate(cfg: ScenarioConfig, seed: int) -> TraceSink:
    """Run one scenario with its configured policy and return the raw trace."""
    root = RngStream(seed)
    net = cfg.build_network(root.fork("net"))
    factory = policy_factory(
        cfg.policy_id, cfg.arm_set_obj(), cfg.policy_params,
        min_jitter_ms=cfg.min_jitter_width_ms, regimes=[r.id for r in cfg.regimes],
    )
    cluster = Cluster(
        cfg.n, net, factory, root,
        heartbeat_interval_ms=cfg.heartbeat_interval_ms, faults=cfg.faults,
        reset_on_restart=cfg.reset_on_restart,
    )
    cluster.run(cfg.horizon_us)
    return cluster.trace


def run_single(
    cfg: ScenarioConfig, method: str | None = None, seed: int = 0, params: dict | None = None, keep_trace: bool = False
) -> RunResult:
    if method is not None:
        cfg = cfg.with_policy(method, params if params is not None else {})
    t0 = time.perf_counter()
    sink = simulate(cfg, seed)
    data = sink.to_bytes()
    metrics = summarize(sink.events, cfg.n, cfg.horizon_us, cfg.heartbeat_interval_ms, cfg.tick_ms)
    return RunResult(
        cfg.name, cfg.policy_id, seed, dict(cfg.policy_params), trace_digest(data), metrics,
        data if keep_trace else None, time.perf_counter() - t0,
    )


# ---------------------------------------------------------------------------
# sweeps


class HarnessError(RuntimeError):
    pass


def _job(cfg: ScenarioConfig, method: str, seed: int, params: dict, keep_trace: bool) -> dict:
    """Worker entry point; never raises so one bad run cannot sink a sweep."""
    try:
        res = run_single(cfg, method, seed, params, keep_trace)
        out = {"ok": True, "record": res.record()}
        if keep_trace:
            out["trace"] = res.trace
        return out
    except Exception as exc:  # recorded, not propagated
        return {
            "ok": False, "method": method, "seed": seed, "params": params,
            "error": f"{type(exc).__name__}: {exc}", "traceback": traceback.format_exc(),
        }


def run_jobs(cfg: ScenarioConfig, jobs: Sequence[tuple[str, int, dict]], workers: int = 1, keep_trace: bool = False) -> list[dict]:
    """Execute (method, seed, params) jobs, preserving input order in the output."""
    if workers <= 1 or len(jobs) <= 1:
        return [_job(cfg, m, s, p, keep_trace) for m, s, p in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_job, cfg, m, s, p, keep_trace) for m, s, p in jobs]
        return [f.result() for f in futures]


@dataclass
class ExperimentPlan:
    scenario: str
    methods: list[str]
    report_seeds: list[int]
    tuning_seeds: list[int]
    params: dict = field(default_factory=dict)  # method -> fixed params
    grids: dict = field(default_factory=dict)  # method -> grid to tune over
    workers: int = 1
    keep_traces: bool = False
    overrides: dict = field(default_factory=dict)  # ScenarioConfig field overrides

    def problems(self) -> list[str]:
        errs = []
        for m in self.methods:
            if m not in METHODS:
                errs.append(f"methods: unknown policy id {m!r}")
        for m in list(self.params) + list(self.grids):
            if m not in self.methods:
                errs.append(f"params/tune: {m!r} is not in the method list")
        overlap = set(self.report_seeds) & set(self.tuning_seeds)
        if overlap:
            errs.append(f"seeds: tuning and report seeds overlap on {sorted(overlap)}")
        if not self.report_seeds:
            errs.append("seeds.report: empty")
        if self.workers < 1:
            errs.append("workers: must be >= 1")
        return errs


def load_plan(path: str | Path) -> ExperimentPlan:
    doc = yaml.safe_load(Path(path).read_text())
    if not isinstance(doc, dict) or "scenario" not in doc:
        raise ConfigError(["plan: expected a mapping with a 'scenario' field"])
    cfg = load_config(doc["scenario"])
    seeds = doc.get("seeds") or {}
    plan = ExperimentPlan(
        scenario=doc["scenario"],
        methods=list(doc.get("methods") or [cfg.policy_id]),
        report_seeds=list(seeds.get("report", cfg.report_seeds)),
        tuning_seeds=list(seeds.get("tuning", cfg.tuning_seeds)),
        params=dict(doc.get("params") or {}),
        grids=dict(doc.get("tune") or {}),
        workers=int(doc.get("workers", 1)),
        keep_traces=bool(doc.get("keep_traces", False)),
        overrides=dict(doc.get("overrides") or {}),
    )
    errs = plan.problems()
    if errs:
        raise ConfigError(errs)
    return plan


def plan_config(plan: ExperimentPlan) -> ScenarioConfig:
    cfg = load_config(plan.scenario)
    if plan.overrides:
        doc = cfg.to_dict()
        for dotted, value in plan.overrides.items():
            node = doc
            *head, last = dotted.split(".")
            for key in head:
                node = node.setdefault(key, {})
            node[last] = value
        cfg = parse_config(doc)
    return cfg


def _run_dir(out: Path, method: str) -> Path:
    d = out / "runs" / method
    d.mkdir(parents=True, exist_ok=True)
    return d


def run_sweep(plan: ExperimentPlan, out_dir: str | Path | None = None) -> dict:
    """Tune (where a grid is given), then run every method on every report seed.

    Network and fault streams are keyed by seed alone, so all methods see the
    same injected realisations. Per-run artifacts land in ``out_dir/runs``.
    """
    errs = plan.problems()
    if errs:
        raise ConfigError(errs)
    cfg = plan_config(plan)
    out = Path(out_dir) if out_dir is not None else None
    chosen: dict[str, dict] = {}
    tuning: dict[str, dict] = {}
    for method in plan.methods:
        base = dict(plan.params.get(method, {}))
        grid = plan.grids.get(method)
        if grid is None and method == "oracle_best_per_regime" and "mapping" not in base:
            grid = {"mapping": enumerate_mappings(len(cfg.arm_set_obj()), [r.id for r in cfg.regimes])}
        if grid is not None:
            best, table = tune_baseline(cfg, method, grid, plan.tuning_seeds, base, plan.workers)
            chosen[method] = best
            tuning[method] = {"best": best, "table": table}
        else:
            chosen[method] = base
    jobs = [(m, s, chosen[m]) for m in plan.methods for s in plan.report_seeds]
    results = run_jobs(cfg, jobs, plan.workers, plan.keep_traces)
    records, failures = [], []
    for res in results:
        if not res["ok"]:
            failures.append({k: res[k] for k in ("method", "seed", "params", "error")})
            log.warning("run failed: %s seed=%s: %s", res["method"], res["seed"], res["error"])
            continue
        rec = res["record"]
        records.append(rec)
        if out is not None:
            d = _run_dir(out, rec["method"])
            (d / f"seed-{rec['seed']}.json").write_text(json.dumps(rec, sort_keys=True))
            if plan.keep_traces:
                write_trace(d / f"seed-{rec['seed']}.jsonl.gz", res["trace"])
    manifest = {
        "scenario": cfg.name,
        "config": cfg.to_dict(),
        "methods": plan.methods,
        "report_seeds": plan.report_seeds,
        "tuning_seeds": plan.tuning_seeds,
        "params": chosen,
        "tuning": tuning,
        "failures": failures,
    }
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))
    return {"manifest": manifest, "records": records}


# ---------------------------------------------------------------------------
# tuning


def expand_grid(grid) -> list[dict]:
    """A list of points is used as-is; a mapping of lists expands to its product in key order."""
    if isinstance(grid, list):
        return [dict(p) for p in grid]
    if not isinstance(grid, dict) or not grid:
        raise HarnessError("grid must be a non-empty mapping of parameter -> values, or a list of points")
    points: list[dict] = [{}]
    for key, values in grid.items():
        if not isinstance(values, list) or not values:
            raise HarnessError(f"grid[{key!r}]: expected a non-empty list of values")
        points = [{**p, key: v} for p in points for v in values]
    return points


def tune_baseline(
    cfg: ScenarioConfig,
    method: str,
    grid,
    tuning_seeds: Sequence[int],
    base_params: dict | None = None,
    workers: int = 1,
) -> tuple[dict, list[dict]]:
    """Lexicographic selection: lowest mean unwritable fraction, then lowest mean
    recovery time; remaining ties go to the earliest grid point."""
    points = expand_grid(grid)
    if not points:
        raise HarnessError("empty tuning grid")
    if not tuning_seeds:
        raise HarnessError("no tuning seeds")
    candidates = [{**(base_params or {}), **p} for p in points]
    if len(candidates) == 1:
        return candidates[0], [{"params": candidates[0], "skipped": True}]
    jobs = [(method, s, p) for p in candidates for s in tuning_seeds]
    results = run_jobs(cfg, jobs, workers)
    table = []
    k = len(tuning_seeds)
    for i, params in enumerate(candidates):
        chunk = results[i * k:(i + 1) * k]
        ok = [r["record"]["metrics"] for r in chunk if r["ok"]]
        if len(ok) < k:
            table.append({"params": params, "failed": k - len(ok)})
            continue
        table.append({
            "params": params,
            "unwritable": float(np.mean([m["unwritable_fraction"] for m in ok])),
            "recovery": float(np.mean([m["recovery_mean"] for m in ok])),
        })
    scored = [(row["unwritable"], row["recovery"], i) for i, row in enumerate(table) if "unwritable" in row]
    if not scored:
        raise HarnessError(f"every grid point failed for {method}")
    best = min(scored)[2]
    return table[best]["params"], table


# ---------------------------------------------------------------------------
# ablations

# single-component deviations from the default bandit_safe configuration
ABLATIONS: dict[str, dict] = {
    "no_safe_exploration": {"safety": False},
    "nonstationary_sliding": {"nonstationary": "window"},
    "explore_low_alpha": {"alpha": 0.2},
    "explore_high_alpha": {"alpha": 2.0},
    "reward_success_only": {"reward_weights": [1.0, 0.0, 0.0]},
    "ctx_hb_only": {"features": "hb_only"},
}

SENSITIVITY: dict[str, dict] = {
    "discount_0.95": {"discount": 0.95},
    "discount_0.995": {"discount": 0.995},
    "alpha_0.2": {"alpha": 0.2},
    "alpha_2.0": {"alpha": 2.0},
    "reward_beta_0.001": {"reward_weights": [1.0, 0.001, 1.0]},
    "reward_beta_0.004": {"reward_weights": [1.0, 0.004, 1.0]},
    "reward_gamma_0.5": {"reward_weights": [1.0, 0.002, 0.5]},
    "reward_gamma_2.0": {"reward_weights": [1.0, 0.002, 2.0]},
    "safe_F_2": {"safe_F": 2},
    "safe_F_4": {"safe_F": 4},
    "safe_cd_1": {"safe_cooldown": 1},
    "safe_cd_4": {"safe_cooldown": 4},
    "window_100": {"nonstationary": "window", "window": 100},
    "window_400": {"nonstationary": "window", "window": 400},
    "feat_norm_z": {"feature_norm": "z"},
    "feat_norm_z_clip3": {"feature_norm": "z_clip3"},
}

DELTA_METRICS = ("recovery_mean", "unwritable_fraction", "split_vote_rate")


@dataclass
class AblationVariant:
    id: str
    params: dict
    validity: str = "unknown"  # valid | invalid_no_op


def pct_delta(variant: float, base: float) -> float | None:
    if base == 0:
        return None
    return 100.0 * (variant - base) / base


def ablation_self_check(
    base_cfg: ScenarioConfig, variants: Sequence[AblationVariant], seeds: Sequence[int], workers: int = 1
) -> dict:
    """Compare each variant's per-seed traces against the base policy's.

    A variant whose every trace is byte-identical to the base is ``invalid_no_op``
    and kept out of the delta table.
    """
    method, base_params = base_cfg.policy_id, dict(base_cfg.policy_params)
    jobs = [(method, s, base_params) for s in seeds]
    for v in variants:
        jobs += [(method, s, {**base_params, **v.params}) for s in seeds]
    results = run_jobs(base_cfg, jobs, workers)
    failed = [r for r in results if not r["ok"]]
    if failed:
        raise HarnessError(f"{len(failed)} ablation run(s) failed: {failed[0]['error']}")
    k = len(seeds)
    base = [r["record"] for r in results[:k]]
    base_means = {m: float(np.mean([r["metrics"][m] for r in base])) for m in DELTA_METRICS}
    rows, invalid = [], []
    for i, v in enumerate(variants):
        recs = [r["record"] for r in results[(i + 1) * k:(i + 2) * k]]
        same = [a["digest"] == b["digest"] for a, b in zip(base, recs)]
        v.validity = "invalid_no_op" if all(same) else "valid"
        if v.validity == "invalid_no_op":
            invalid.append({"id": v.id, "params": v.params})
            continue
        means = {m: float(np.mean([r["metrics"][m] for r in recs])) for m in DELTA_METRICS}
        rows.append({
            "id": v.id, "params": v.params, "identical_seeds": sum(same),
            **{f"delta_{m}": pct_delta(means[m], base_means[m]) for m in DELTA_METRICS},
            **means,
        })
    return {"base": {"method": method, "params": base_params, **base_means}, "valid": rows, "invalid_no_op": invalid}


def load_variants(path: str | Path) -> list[AblationVariant]:
    doc = yaml.safe_load(Path(path).read_text())
    items = doc.get("variants", doc) if isinstance(doc, dict) else doc
    if isinstance(items, dict):
        items = [{"id": k, "params": v} for k, v in items.items()]
    out = []
    for i, item in enumerate(items or []):
        if isinstance(item, str):
            table = ABLATIONS if item in ABLATIONS else SENSITIVITY
            if item not in table:
                raise ConfigError([f"variants[{i}]: unknown named variant {item!r}"])
            out.append(AblationVariant(item, dict(table[item])))
        elif isinstance(item, dict) and "id" in item:
            out.append(AblationVariant(str(item["id"]), dict(item.get("params") or {})))
        else:
            raise ConfigError([f"variants[{i}]: expected a name or a mapping with 'id' and 'params'"])
    if not out:
        raise ConfigError(["variants: none given"])
    return out


# ---------------------------------------------------------------------------
# overhead microbenchmark


@dataclass
class BenchStats:
    mean: float
    p50: float
    p95: float
    p99: float

    @classmethod
    def from_ns(cls, samples: np.ndarray) -> "BenchStats":
        us = samples / 1000.0
        p50, p95, p99 = np.percentile(us, [50, 95, 99])
        return cls(float(us.mean()), float(p50), float(p95), float(p99))


def overhead_bench(policy_id: str = "bandit_safe", iterations: int = 50_000, seed: int = 0, params: dict | None = None, warmup: int = 200) -> dict:
    """Time ``choose`` and outcome updates separately on synthetic contexts (microseconds)."""
    from .policies import ArmSet
    from .records import ContextVector, DecisionContext, ElectionAttempt, Outcome

    if iterations <= 0:
        raise HarnessError("iterations must be positive")
    policy = make_policy(policy_id, ArmSet.named("standard3"), params or {})
    rng = RngStream(seed).fork("bench")
    gen = np.random.default_rng(seed)
    feats = np.column_stack([
        gen.normal(50, 5, iterations + warmup), np.abs(gen.normal(5, 2, iterations + warmup)),
        gen.uniform(0, 300, iterations + warmup), gen.integers(0, 3, iterations + warmup),
    ])
    wins = gen.random(iterations + warmup) < 0.8
    lat = gen.uniform(150, 1200, iterations + warmup)
    choose_ns = np.empty(iterations, dtype=np.int64)
    update_ns = np.empty(iterations, dtype=np.int64)
    clock = time.perf_counter_ns
    for i in range(iterations + warmup):
        f = feats[i]
        ctx = DecisionContext(0, ContextVector(float(f[0]), float(f[1]), float(f[2]), int(f[3])), 50.0, True)
        t0 = clock()
        d = policy.choose(ctx, rng)
        t1 = clock()
        attempt = ElectionAttempt(0, i, 0, d.arm, d.timeout_us, ctx.features, d.token)
        attempt.outcome = Outcome.WON if wins[i] else Outcome.FAILED
        attempt.latency_us = int(lat[i] * 1000)
        t2 = clock()
        policy.observe_outcome(attempt)
        t3 = clock()
        if i >= warmup:
            choose_ns[i - warmup] = t1 - t0
            update_ns[i - warmup] = t3 - t2
    return {
        "policy": policy_id, "iterations": iterations,
        "choose_us": BenchStats.from_ns(choose_ns).__dict__,
        "update_us": BenchStats.from_ns(update_ns).__dict__,
    }


# ---------------------------------------------------------------------------
# aggregation

AGG_METRICS = (
    "recovery_mean", "recovery_p95", "recovery_p99", "recovery_max", "unwritable_fraction",
    "split_vote_rate", "term_churn", "safety_episodes", "safety_mean_duration_ms",
    "safety_overlap2", "safety_overlap3", "cause_no_quorum", "cause_low_reach", "cause_contention",
)


def load_records(in_dir: str | Path) -> list[dict]:
    root = Path(in_dir)
    if not root.is_dir():
        raise HarnessError(f"{root}: not a directory")
    files = sorted(root.glob("runs/*/seed-*.json"))
    if not files:
        raise HarnessError(f"{root}: no run artifacts found under runs/")
    return [json.loads(f.read_text()) for f in files]


def aggregate(in_dir: str | Path, out_dir: str | Path, seed: int = 0, resamples: int = 10_000) -> dict:
    """Cross-method tables with bootstrap CIs over seeds, plus per-seed maxima and
    time-to-leader CDF points. Missing runs are reported, never filled in."""
    from .metrics import MetricsSummary, ecdf

    records = load_records(in_dir)
    manifest_path = Path(in_dir) / "manifest.json"
    manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else None
    by_method: dict[str, list[dict]] = {}
    for rec in records:
        by_method.setdefault(rec["method"], []).append(rec)
    order = manifest["methods"] if manifest else sorted(by_method)
    order = [m for m in order if m in by_method] + sorted(set(by_method) - set(order))
    missing = []
    if manifest:
        for m in manifest["methods"]:
            have = {r["seed"] for r in by_method.get(m, [])}
            missing += [{"method": m, "seed": s} for s in manifest["report_seeds"] if s not in have]

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    summary_rows, maxima_rows, cdf_rows = [], [], []
    for m in order:
        runs = sorted(by_method[m], key=lambda r: r["seed"])
        ms_ = [MetricsSummary.from_dict(r["metrics"]) for r in runs]
        for metric in AGG_METRICS:
            vals = [s.scalar(metric) for s in ms_]
            point, lo, hi = bootstrap_ci(vals, 0.95, resamples, rng)
            summary_rows.append({"method": m, "metric": metric, "point": point, "ci_lo": lo, "ci_hi": hi})
        maxima_rows.append({
            "method": m, "seeds": len(runs),
            "recovery_p99_max": max(s.recovery_p99 for s in ms_),
            "recovery_max_max": max(s.recovery_max for s in ms_),
            "unwritable_max": max(s.unwritable_fraction for s in ms_),
        })
        ttl = [v for s in ms_ for v in s.time_to_leader_ms]
        cdf_rows += [{"method": m, "time_to_leader_ms": v, "cdf": c} for v, c in ecdf(ttl)]

    def write(name: str, rows: list[dict], fields: list[str]) -> None:
        with open(out / name, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=fields)
            w.writeheader()
            w.writerows(rows)

    write("summary.csv", summary_rows, ["method", "metric", "point", "ci_lo", "ci_hi"])
    write("maxima.csv", maxima_rows, ["method", "seeds", "recovery_p99_max", "recovery_max_max", "unwritable_max"])
    write("time_to_leader_cdf.csv", cdf_rows, ["method", "time_to_leader_ms", "cdf"])
    report = {"methods": order, "summary": summary_rows, "maxima": maxima_rows, "missing": missing, "runs": len(records)}
    (out / "summary.json").write_text(json.dumps(report, indent=2))
    return report
