"""Command-line entry point: ``electsim <command> ...``.

Every command exits 0 on success. Failures exit non-zero and print a single
JSON error record on stderr: ``{"error": <type>, "message": ..., "details": [...]}``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from . import harness
from .config import ConfigError, dumps_config, load_config
from .engine import write_trace
from .policies import METHODS, PolicyError


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=str)


def _params(text: str | None) -> dict:
    if not text:
        return {}
    val = yaml.safe_load(text)
    if not isinstance(val, dict):
        raise ConfigError(["--params: expected a mapping"])
    return val


def cmd_run(args) -> int:
    cfg = load_config(args.scenario)
    method = args.method or cfg.policy_id
    params = _params(args.params) if args.params is not None else (cfg.policy_params if method == cfg.policy_id else {})
    res = harness.run_single(cfg, method, args.seed, params, keep_trace=args.out is not None)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        stem = f"{cfg.name}-{method}-seed{args.seed}"
        write_trace(out / f"{stem}.jsonl.gz", res.trace)
        (out / f"{stem}.json").write_text(_json(res.record()))
    print(_json(res.record()))
    return 0


def cmd_sweep(args) -> int:
    plan = harness.load_plan(args.plan)
    if args.workers:
        plan.workers = args.workers
    result = harness.run_sweep(plan, args.out)
    failures = result["manifest"]["failures"]
    print(_json({"runs": len(result["records"]), "failures": failures, "params": result["manifest"]["params"]}))
    return 0 if not failures else 3


def cmd_tune(args) -> int:
    cfg = load_config(args.scenario)
    grid = yaml.safe_load(Path(args.grid).read_text())
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else list(cfg.tuning_seeds)
    if set(seeds) & set(cfg.report_seeds):
        raise ConfigError(["--seeds: tuning seeds must not overlap the scenario's report seeds"])
    best, table = harness.tune_baseline(cfg, args.method, grid, seeds, workers=args.workers)
    print(_json({"method": args.method, "best": best, "table": table}))
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args.base)
    if args.method:
        cfg = cfg.with_policy(args.method, cfg.policy_params if args.method == cfg.policy_id else {})
    variants = harness.load_variants(args.variants)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else list(cfg.report_seeds)
    report = harness.ablation_self_check(cfg, variants, seeds, args.workers)
    if args.out:
        Path(args.out).write_text(_json(report))
    print(_json(report))
    return 0


def cmd_bench(args) -> int:
    print(_json(harness.overhead_bench(args.policy, args.iters, args.seed, _params(args.params))))
    return 0


def cmd_aggregate(args) -> int:
    report = harness.aggregate(args.inp, args.out, seed=args.seed)
    print(_json({"methods": report["methods"], "runs": report["runs"], "missing": report["missing"]}))
    return 0 if not report["missing"] else 3


def cmd_show(args) -> int:
    sys.stdout.write(dumps_config(load_config(args.scenario)))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="electsim", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="simulate one (scenario, method, seed)")
    r.add_argument("--scenario", required=True, help="preset name or scenario YAML path")
    r.add_argument("--method", choices=METHODS, help="policy id (default: the scenario's policy)")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--params", help="policy parameters as inline YAML/JSON mapping")
    r.add_argument("--out", help="directory for the gzipped trace and metrics record")
    r.set_defaults(fn=cmd_run)

    s = sub.add_parser("sweep", help="run a full experiment plan")
    s.add_argument("--plan", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--workers", type=int)
    s.set_defaults(fn=cmd_sweep)

    t = sub.add_parser("tune", help="lexicographic grid search on tuning seeds")
    t.add_argument("--method", required=True, choices=METHODS)
    t.add_argument("--scenario", required=True)
    t.add_argument("--grid", required=True, help="YAML grid: {param: [values]} or a list of points")
    t.add_argument("--seeds", help="comma-separated tuning seeds (default: scenario tuning seeds)")
    t.add_argument("--workers", type=int, default=1)
    t.set_defaults(fn=cmd_tune)

    a = sub.add_parser("ablate", help="ablation self-check against the base policy")
    a.add_argument("--base", required=True, help="base scenario (preset or file); its policy block is the base")
    a.add_argument("--variants", required=True, help="YAML list of variant names or {id, params} entries")
    a.add_argument("--method", choices=METHODS, help="override the base policy id")
    a.add_argument("--seeds", help="comma-separated seeds (default: scenario report seeds)")
    a.add_argument("--workers", type=int, default=1)
    a.add_argument("--out", help="write the JSON report here as well")
    a.set_defaults(fn=cmd_ablate)

    b = sub.add_parser("bench", help="policy choose/update microbenchmark")
    b.add_argument("--policy", default="bandit_safe", choices=METHODS)
    b.add_argument("--iters", type=int, default=50_000)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--params")
    b.set_defaults(fn=cmd_bench)

    g = sub.add_parser("aggregate", help="cross-method CSV/JSON tables with bootstrap CIs")
    g.add_argument("--in", dest="inp", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0, help="bootstrap seed")
    g.set_defaults(fn=cmd_aggregate)

    c = sub.add_parser("show", help="print a scenario in canonical form")
    c.add_argument("--scenario", required=True)
    c.set_defaults(fn=cmd_show)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as e:
        err = {"error": "ConfigError", "message": "invalid configuration", "details": e.errors}
    except (PolicyError, harness.HarnessError, FileNotFoundError, ValueError) as e:
        err = {"error": type(e).__name__, "message": str(e), "details": []}
    print(json.dumps(err), file=sys.stderr)
    return 2


if __name__ == "__main__":
    sys.exit(main())
