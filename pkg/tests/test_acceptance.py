"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The preset sweep behind criteria 2, 4, 10, 11, 12 and 13 runs once per session
(module fixture); every run is checked against the trace invariants as it
completes so no trace has to be kept in memory.
"""

from __future__ import annotations

import time
from collections import defaultdict

import numpy as np
import pytest

import invariants
from electsim.config import load_config, loads_config
from electsim.engine import Kind, loads_trace
from electsim.harness import AblationVariant, ablation_self_check, overhead_bench, simulate
from electsim.metrics import bootstrap_ci, compute_writability, grace_window_ms, summarize
from electsim.policies import MAIN_METHODS, LinearArms

# (preset, seeds) for the election-safety sweep; 13 methods each
SWEEP = {
    "main-hard-wan": range(10),
    "partition-turbulence": range(10),
    "stable-wan": range(5),
    "lan": range(5),
    "alignment-stress": range(2),
}
GUARD_MS = 20.0


def _check_run(cfg, seed):
    sink = simulate(cfg, seed)
    data = sink.to_bytes()
    events = loads_trace(data)  # check what was logged, not the in-memory objects
    safe_arm = 2
    viol = invariants.all_violations(events, cfg.policy_id, safe_arm, cfg.min_jitter_width_ms)
    checked, _ = invariants.reward_mismatches(events)
    forced, _ = invariants.safety_discipline(events, safe_arm)
    m = summarize(events, cfg.n, cfg.horizon_us, cfg.heartbeat_interval_ms, cfg.tick_ms)
    return {"violations": viol, "rewards_checked": checked, "forced": forced, "metrics": m}


@pytest.fixture(scope="module")
def sweep():
    t0 = time.perf_counter()
    runs = defaultdict(list)  # (preset, method) -> results
    for preset, seeds in SWEEP.items():
        base = load_config(preset)
        for method in MAIN_METHODS:
            cfg = base.with_policy(method, {})
            for seed in seeds:
                runs[(preset, method)].append(_check_run(cfg, seed))
    # criterion 12 needs >= 10 seeds of the two alignment-stress configurations
    align = load_config("alignment-stress")
    static = align.with_policy("static_conservative", {})
    for seed in range(len(SWEEP["alignment-stress"]), 10):
        runs[("alignment-stress", "static_conservative")].append(_check_run(static, seed))
    guarded = align.with_policy("bandit_safe", {}).replace(min_jitter_width_ms=GUARD_MS)
    for seed in range(10):
        runs[("alignment-stress-guard", "bandit_safe")].append(_check_run(guarded, seed))
    return {"runs": runs, "wall_s": time.perf_counter() - t0}


def _mean(runs, key):
    return float(np.mean([getattr(r["metrics"], key) for r in runs]))


# ---------------------------------------------------------------------------


def test_c01_determinism(criterion):
    mismatched = []
    total = 0
    for preset in SWEEP:
        base = load_config(preset)
        methods = MAIN_METHODS if preset == "main-hard-wan" else ("random", "bandit_safe", "dynatune_joint")
        for method in methods:
            cfg = base.with_policy(method, {})
            a = simulate(cfg, 7).to_bytes()
            b = simulate(cfg, 7).to_bytes()
            total += 1
            if a != b:
                mismatched.append(f"{preset}/{method}")
    criterion(1, not mismatched, f"{total} (scenario, method, seed) pairs run twice; byte mismatches: {mismatched or 'none'}")


def test_c02_election_safety(sweep, criterion):
    runs = sweep["runs"]
    n_runs = sum(len(v) for v in runs.values())
    bad = defaultdict(int)
    for results in runs.values():
        for r in results:
            for name in ("election_safety", "vote_uniqueness", "term_monotonicity", "timeout_bounds"):
                bad[name] += len(r["violations"][name])
    ok = n_runs >= 400 and not any(bad.values())
    criterion(
        2, ok,
        f"{n_runs} preset runs ({sweep['wall_s']:.0f} s); duplicate-leader terms={bad['election_safety']}, "
        f"duplicate votes={bad['vote_uniqueness']}, term regressions={bad['term_monotonicity']}, "
        f"timeout-bound breaches={bad['timeout_bounds']}",
    )


def test_c03_linucb_ridge_oracle(criterion):
    gen = np.random.default_rng(20240917)
    worst = 0.0
    isolation_breaks = 0
    decision_diffs = 0
    for _ in range(1000):
        d = int(gen.integers(1, 7))
        k = int(gen.integers(3, 8))
        steps = int(gen.integers(5, 60))
        l2 = float(gen.choice([0.5, 1.0, 2.0]))
        plain = LinearArms(k, d, l2=l2, mode="plain")
        disc = LinearArms(k, d, l2=l2, mode="discount", gamma=1.0)
        win = LinearArms(k, d, l2=l2, mode="window", window=steps + 1)
        true_theta = gen.normal(size=(k, d))
        hist = defaultdict(list)
        for _ in range(steps):
            x = gen.normal(size=d)
            arms = [m.ucb_choose(x, 1.0) for m in (plain, disc, win)]
            if len(set(arms)) != 1:
                decision_diffs += 1
            a = arms[0]
            r = float(true_theta[a] @ x + gen.normal(scale=0.1))
            before_A, before_b = plain.A.copy(), plain.b.copy()
            for m in (plain, disc, win):
                m.update(a, x, r)
            others = [i for i in range(k) if i != a]
            if not (np.array_equal(before_A[others], plain.A[others]) and np.array_equal(before_b[others], plain.b[others])):
                isolation_breaks += 1
            hist[a].append((x, r))
        for a in range(k):
            X = np.array([h[0] for h in hist[a]]).reshape(-1, d)
            y = np.array([h[1] for h in hist[a]])
            oracle = np.linalg.solve(l2 * np.eye(d) + X.T @ X, X.T @ y)
            worst = max(worst, float(np.max(np.abs(plain.theta(a) - oracle))))
    ok = worst <= 1e-9 and isolation_breaks == 0 and decision_diffs == 0
    criterion(
        3, ok,
        f"1000 replays: max |theta - ridge| = {worst:.2e} (tol 1e-9); non-chosen arm changes={isolation_breaks}; "
        f"gamma=1 / full-window decision differences={decision_diffs}",
    )


def test_c04_reward_formula(sweep, criterion):
    checked = 0
    mismatches = 0
    for results in sweep["runs"].values():
        for r in results:
            checked += r["rewards_checked"]
            mismatches += len(r["violations"]["reward"])
    examples = invariants.expected_reward(True, 500.0) == 0.0 and invariants.expected_reward(False, 1200.0) == pytest.approx(-3.4)
    ok = checked > 0 and mismatches == 0 and examples
    criterion(4, ok, f"{checked} logged rewarded attempts recomputed with (1, 0.002, 1); mismatches={mismatches}; Won@500ms -> 0.0")


FORCED_FAILURE = """
format_version: 1
name: forced-failure
cluster: {n: 5, horizon_ms: 40000, heartbeat_interval_ms: 50, tick_ms: 10}
arms: {set: standard3}
network:
  regimes:
    - id: 0
      delay: {base_ms: 2, jitter_std_ms: 0.5}
    - id: 1
      delay: {base_ms: 2, jitter_std_ms: 0.5}
      loss: {iid: 1.0}
  schedule: [{at_ms: 0, regime: 0}, {at_ms: 1000, regime: 1}, {at_ms: 8000, regime: 0}]
faults:
  crashes:
    - {node: leader, down_ms: 12000, up_ms: 12500}
    - {node: leader, down_ms: 15000, up_ms: 15500}
    - {node: leader, down_ms: 18000, up_ms: 18500}
    - {node: leader, down_ms: 21000, up_ms: 21500}
    - {node: leader, down_ms: 24000, up_ms: 24500}
    - {node: leader, down_ms: 27000, up_ms: 27500}
    - {node: leader, down_ms: 30000, up_ms: 30500}
    - {node: leader, down_ms: 33000, up_ms: 33500}
policy: {id: bandit_safe}
seeds: {tuning: [1000], report: [0]}
"""


def test_c05_safety_wrapper(criterion):
    cfg = loads_config(FORCED_FAILURE)
    forced_total = 0
    enters = exits = 0
    violations = []
    for seed in range(5):
        events = simulate(cfg, seed).events
        forced, bad = invariants.safety_discipline(events, safe_arm=2, threshold=3, cooldown=2)
        forced_total += forced
        violations += bad
        enters += sum(1 for ev in events if ev.kind is Kind.SAFETY_ENTER)
        exits += sum(1 for ev in events if ev.kind is Kind.SAFETY_EXIT)
    ok = forced_total > 0 and enters > 0 and exits > 0 and not violations
    criterion(
        5, ok,
        f"total-loss window then repeated leader crashes, 5 seeds: {forced_total} forced decisions, {enters} SafetyEnter / {exits} SafetyExit, "
        f"discipline violations={len(violations)}",
    )


def test_c06_grace_and_writability_oracle(criterion):
    grace_ok = grace_window_ms(50, 10) == 150
    gen = np.random.default_rng(6)
    mismatches = 0
    trials = 300
    for _ in range(trials):
        n = int(gen.choice([3, 5]))
        events = invariants.random_hb_trace(gen, n)
        horizon = 1_600_000
        timeline = compute_writability(events, n, horizon, 50, 10)
        oracle = invariants.brute_force_writable(events, n, horizon, 50, 10)
        got = []
        for iv in timeline.intervals:
            got += [iv.writable] * ((iv.end_us - iv.start_us + 9_999) // 10_000)
        frac = sum(10_000 for w in oracle if not w) / horizon
        if got != oracle or abs(timeline.unwritable_fraction - frac) > 1e-12:
            mismatches += 1
    ok = grace_ok and mismatches == 0
    criterion(6, ok, f"grace(50 ms, 10 ms) = {grace_window_ms(50, 10)} ms; {trials} random traces (<=200 events) vs brute-force oracle: {mismatches} mismatches")


def test_c07_bootstrap_coverage(criterion):
    t0 = time.perf_counter()
    gen = np.random.default_rng(7)
    covered = 0
    experiments = 2000
    for _ in range(experiments):
        x = gen.standard_normal(30)
        _, lo, hi = bootstrap_ci(x, 0.95, 10_000, gen)
        covered += lo <= 0.0 <= hi
    rate = covered / experiments
    elapsed = time.perf_counter() - t0
    ok = abs(rate - 0.95) <= 0.03 and elapsed < 60
    criterion(7, ok, f"coverage {rate:.4f} over {experiments} N(0,1) samples of 30 (target 0.95 +/- 0.03), {elapsed:.1f} s")


def test_c08_ablation_self_check(criterion):
    cfg = load_config("partition-turbulence").with_policy("bandit_safe", {})
    seeds = list(cfg.report_seeds)
    inert = AblationVariant("inert_ts_scale", {"ts_scale": 3.0})  # ts_scale is unused by the UCB learner
    nse = AblationVariant("no_safe_exploration", {"safety": False})
    report = ablation_self_check(cfg, [inert, nse], seeds)
    row = next((r for r in report["valid"] if r["id"] == "no_safe_exploration"), None)
    ok = inert.validity == "invalid_no_op" and nse.validity == "valid"
    detail = f"inert variant -> {inert.validity} on {len(seeds)} seeds; no_safe_exploration -> {nse.validity}"
    if row is not None:
        detail += f" ({len(seeds) - row['identical_seeds']}/{len(seeds)} seeds differ, split-vote delta {row['delta_split_vote_rate']:+.1f}%)"
    criterion(8, ok, detail)


def test_c09_overhead(criterion):
    res = overhead_bench("bandit_safe", 50_000, seed=0)
    c, u = res["choose_us"]["mean"], res["update_us"]["mean"]
    criterion(9, c < 100 and u < 50, f"choose mean {c:.1f} us (< 100), update mean {u:.1f} us (< 50), 50000 iterations, d=5, 3 arms")


def test_c10_recovery_vs_random(sweep, criterion):
    runs = sweep["runs"]
    b = _mean(runs[("main-hard-wan", "bandit_safe")], "recovery_mean")
    r = _mean(runs[("main-hard-wan", "random")], "recovery_mean")
    criterion(10, b < 0.5 * r, f"main-hard-wan, 10 seeds: bandit_safe recovery {b:.1f} ms vs random {r:.1f} ms (need < {0.5 * r:.1f})")


def test_c11_unwritable_and_static(sweep, criterion):
    runs = sweep["runs"]
    ru = _mean(runs[("main-hard-wan", "random")], "unwritable_fraction")
    su = _mean(runs[("main-hard-wan", "static_conservative")], "unwritable_fraction")
    sr = _mean(runs[("main-hard-wan", "static_conservative")], "recovery_mean")
    br = _mean(runs[("main-hard-wan", "bandit_safe")], "recovery_mean")
    ok = ru >= 2 * su and sr > br
    criterion(
        11, ok,
        f"unwritable random {ru:.3f} vs static {su:.3f} (ratio {ru / su if su else float('inf'):.1f}x, need >= 2); "
        f"recovery static {sr:.1f} ms > bandit_safe {br:.1f} ms",
    )


def test_c12_alignment_stress(sweep, criterion):
    runs = sweep["runs"]
    static = runs[("alignment-stress", "static_conservative")]
    guarded = runs[("alignment-stress-guard", "bandit_safe")]
    ss = _mean(static, "split_vote_rate")
    su = _mean(static, "unwritable_fraction")
    bs = _mean(guarded, "split_vote_rate")
    ok = len(static) >= 10 and len(guarded) >= 10 and ss > 0.9 and su > 0.5 and bs < 0.15
    criterion(
        12, ok,
        f"1 ms arms, 10 seeds: static split-vote {ss:.3f} (> 0.9), unwritable {su:.3f} (> 0.5); "
        f"bandit_safe with {GUARD_MS:.0f} ms guard split-vote {bs:.3f} (< 0.15)",
    )


def test_c13_safety_overlap_stats(sweep, criterion):
    runs = sweep["runs"][("main-hard-wan", "bandit_safe")]
    episodes = [r["metrics"].safety.episodes for r in runs]
    o2 = [r["metrics"].safety.overlap2 for r in runs]
    ok = sum(episodes) > 0 and all(np.isfinite(o2))
    criterion(
        13, ok,
        f"bandit_safe main-hard-wan: {np.mean(episodes):.2f} forced-safe episodes/run over {len(runs)} seeds, "
        f"mean overlap>=2 fraction {np.mean(o2):.4f}",
    )
