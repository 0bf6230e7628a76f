import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from electsim.engine import RngStream
from electsim.policies import (
    ARM_SETS,
    METHODS,
    RELATIVE_ARMS,
    ArmSet,
    BackoffPolicy,
    LinearArms,
    PolicyError,
    SafetyGate,
    dynatune_et_timeout,
    dynatune_joint_adjust,
    enumerate_mappings,
    make_policy,
    oracle_timeout,
    restore,
    sample_timeout,
    snapshot,
    widen,
)
from electsim.policies.estimators import QuantileEstimator, phi
from electsim.records import ContextVector, DecisionContext, ElectionAttempt, Outcome, RewardWeights, shaped_reward

STD3 = ArmSet.named("standard3")


def ctx(mean=50.0, std=5.0, since=20.0, fails=0, regime=0, hb=50.0, candidate=False):
    return DecisionContext(0, ContextVector(mean, std, since, fails, regime), hb, candidate)


def attempt(decision, outcome, latency_ms=None, features=None):
    a = ElectionAttempt(0, 1, 0, decision.arm, decision.timeout_us, features or ctx().features, decision.token)
    a.outcome = outcome
    if outcome is Outcome.WON:
        a.latency_us = int(latency_ms * 1000)
    return a


# -- arms ----------------------------------------------------------------------


def test_standard_arm_ranges():
    assert STD3.arms == ((150, 300), (300, 600), (600, 1200))
    assert STD3.safe_index == 2
    assert len(ArmSet.named("broad5")) == 5 and ArmSet.named("broad5")[4][1] == 2400
    assert len(ArmSet.named("fine7")) == 7
    assert ArmSet.named("shifted3")[0] == (300, 600)


@pytest.mark.parametrize("arms", [((300, 150),), ((150, 300), (100, 600)), ((0, 10),), ()])
def test_invalid_arm_sets_rejected(arms):
    with pytest.raises(ValueError):
        ArmSet(arms)


def test_unknown_named_arm_set():
    with pytest.raises(ValueError):
        ArmSet.named("nope")


def test_a1_and_static_sample_within_ranges():
    rng = random.Random(0)
    a1 = [sample_timeout(rng, 150, 300)[0] for _ in range(5000)]
    assert min(a1) >= 150_000 and max(a1) <= 300_000
    assert np.mean(a1) == pytest.approx(225_000, rel=0.01)
    policy = make_policy("static_conservative", STD3)
    rs = RngStream(1)
    ts = [policy.choose(ctx(), rs).timeout_us for _ in range(2000)]
    assert min(ts) >= 600_000 and max(ts) <= 1_200_000


def test_min_jitter_guard_widens_narrow_arms():
    narrow = STD3.narrowed(1.0)
    assert all(hi - lo == pytest.approx(1.0) for lo, hi in narrow.arms)
    lo, hi = widen(*narrow[2], 20.0)
    assert hi - lo == pytest.approx(20.0)
    assert (lo + hi) / 2 == pytest.approx(900.0)
    policy = make_policy("bandit_safe", narrow, min_jitter_ms=20.0)
    d = policy.choose(ctx(), RngStream(2))
    assert d.hi_ms - d.lo_ms >= 20.0 - 1e-9


@given(lo=st.floats(1, 5000), width=st.floats(0.001, 3000), floor=st.floats(0, 100), seed=st.integers(0, 2**32))
def test_timeout_bounds_property(lo, width, floor, seed):
    t, elo, ehi = sample_timeout(random.Random(seed), lo, lo + width, floor)
    assert round(elo * 1000) <= t <= round(ehi * 1000)
    assert ehi - elo >= min(floor, width) - 1e-9 and ehi - elo >= floor - 1e-6


# -- LinUCB ----------------------------------------------------------------------


def test_fresh_linucb_picks_first_arm():
    policy = make_policy("bandit_safe", STD3)
    for c in (ctx(), ctx(mean=300, std=100, since=900, fails=4)):
        assert policy.choose(c, RngStream(0)).arm == 0


def test_forced_safe_arm_regardless_of_scores():
    policy = make_policy("bandit_safe", STD3)
    policy.gate.cooldown_remaining = 1
    d = policy.choose(ctx(), RngStream(0))
    assert d.arm == 2 and d.forced_safe


def test_two_by_two_hand_example():
    m = LinearArms(2, 2, l2=1.0)
    x = np.array([1.0, 1.0])
    m.update(0, x, 1.0)
    assert np.allclose(m.A[0], [[2, 1], [1, 2]])
    assert np.allclose(m.b[0], [1, 1])
    assert np.allclose(m.theta(0), [1 / 3, 1 / 3])
    scores = m.ucb_scores(x, 1.0)
    assert scores[0] == pytest.approx(2 / 3 + math.sqrt(2 / 3))
    assert scores[0] == pytest.approx(1.483, abs=5e-4)
    assert scores[1] == pytest.approx(math.sqrt(2))
    assert m.ucb_choose(x, 1.0) == 0


def test_discount_gamma_one_matches_plain():
    gen = np.random.default_rng(0)
    plain = LinearArms(3, 4)
    disc = LinearArms(3, 4, mode="discount", gamma=1.0)
    for _ in range(300):
        x = gen.normal(size=4)
        a = plain.ucb_choose(x, 1.0)
        assert disc.ucb_choose(x, 1.0) == a
        r = float(gen.normal())
        plain.update(a, x, r)
        disc.update(a, x, r)
    assert np.allclose(plain.A, disc.A, atol=1e-9)
    assert np.allclose(plain.theta(), disc.theta(), atol=1e-9)


def test_null_updates_decay_back_to_prior():
    m = LinearArms(3, 2, l2=1.0, mode="discount", gamma=0.98)
    x = np.array([1.0, 2.0])
    m.update(1, x, 1.0)
    a0 = m.A[1].copy()
    for _ in range(200):
        m.decay_only(1)
    closed = np.eye(2) + 0.98**200 * (a0 - np.eye(2))
    assert np.allclose(m.A[1], closed, atol=1e-9)
    assert np.allclose(m.b[1], 0.98**200 * x, atol=1e-9)
    assert np.max(np.abs(m.A[1] - np.eye(2))) < 0.1


def test_full_decay_returns_to_prior_tie_break():
    m = LinearArms(3, 2, l2=1.0, mode="discount", gamma=0.98)
    x = np.array([1.0, 1.0])
    m.update(1, x, 1.0)
    assert m.ucb_choose(x, 1.0) == 1
    while max(np.max(np.abs(m.A[1] - np.eye(2))), np.max(np.abs(m.b[1]))) >= 1e-6:
        m.decay_only(1)
    assert np.ptp(m.ucb_scores(x, 1.0)) < 1e-5
    for _ in range(40_000):
        m.decay_only(1)
    assert m.ucb_choose(x, 1.0) == 0


def test_window_larger_than_history_matches_plain():
    gen = np.random.default_rng(1)
    plain = LinearArms(3, 3)
    win = LinearArms(3, 3, mode="window", window=500)
    for _ in range(200):
        x = gen.normal(size=3)
        a = plain.ucb_choose(x, 0.5)
        assert win.ucb_choose(x, 0.5) == a
        r = float(gen.normal())
        plain.update(a, x, r)
        win.update(a, x, r)
    assert np.allclose(plain.theta(), win.theta(), atol=1e-9)


def test_window_of_one_keeps_only_latest_sample():
    m = LinearArms(2, 2, l2=1.0, mode="window", window=1)
    m.update(0, np.array([1.0, 0.0]), 5.0)
    m.update(0, np.array([0.0, 2.0]), 3.0)
    assert np.allclose(m.A[0], np.eye(2) + np.outer([0, 2], [0, 2]))
    assert np.allclose(m.b[0], [0, 6])


def test_window_matches_brute_force_recomputation():
    gen = np.random.default_rng(2)
    m = LinearArms(2, 4, l2=1.5, mode="window", window=100)
    seen = {0: [], 1: []}
    for _ in range(450):
        a = int(gen.integers(0, 2))
        x = gen.normal(size=4)
        r = float(gen.normal())
        m.update(a, x, r)
        seen[a].append((x, r))
    for a in (0, 1):
        recent = seen[a][-100:]
        X = np.array([x for x, _ in recent])
        y = np.array([r for _, r in recent])
        oracle = np.linalg.solve(1.5 * np.eye(4) + X.T @ X, X.T @ y)
        assert np.allclose(m.theta(a), oracle, atol=1e-9, rtol=0)


@settings(max_examples=40)
@given(st.integers(0, 10**6), st.sampled_from(["plain", "discount", "window"]))
def test_update_isolation(seed, mode):
    gen = np.random.default_rng(seed)
    m = LinearArms(4, 3, mode=mode, gamma=0.95, window=5)
    for _ in range(30):
        a = int(gen.integers(0, 4))
        A, b = m.A.copy(), m.b.copy()
        m.update(a, gen.normal(size=3), float(gen.normal()))
        others = [i for i in range(4) if i != a]
        assert np.array_equal(A[others], m.A[others]) and np.array_equal(b[others], m.b[others])


@pytest.mark.parametrize("mode", ["plain", "discount", "window"])
def test_positive_definiteness_over_many_updates(mode):
    gen = np.random.default_rng(3)
    m = LinearArms(3, 5, l2=1.0, mode=mode, gamma=0.98, window=50)
    X = gen.normal(scale=3.0, size=(100_000, 5))
    arms = gen.integers(0, 3, size=100_000)
    rs = gen.normal(size=100_000)
    worst = np.inf
    for i in range(100_000):
        m.update(int(arms[i]), X[i], float(rs[i]))
        if i % 97 == 0:
            worst = min(worst, float(np.linalg.eigvalsh(m.A).min()))
    worst = min(worst, float(np.linalg.eigvalsh(m.A).min()))
    assert worst >= 1.0 - 1e-6
    assert np.allclose(m.A, np.transpose(m.A, (0, 2, 1)))


def test_sherman_morrison_inverse_stays_accurate():
    gen = np.random.default_rng(4)
    m = LinearArms(2, 5)
    for _ in range(5000):
        m.update(int(gen.integers(0, 2)), gen.normal(size=5), 1.0)
    for a in range(2):
        assert np.allclose(m.A_inv[a] @ m.A[a], np.eye(5), atol=1e-8)


# -- Thompson sampling ----------------------------------------------------------------


def test_ts_zero_scale_is_greedy():
    m = LinearArms(3, 2)
    m.update(2, np.array([1.0, 0.0]), 3.0)
    m.update(1, np.array([1.0, 0.0]), 1.0)
    x = np.array([1.0, 0.5])
    expected = int(np.argmax(m.theta() @ x))
    gen = np.random.default_rng(0)
    assert all(m.ts_choose(x, 0.0, gen) == expected for _ in range(20))
    assert expected == 2


def test_ts_symmetric_prior_chooses_arms_uniformly():
    m = LinearArms(3, 5)
    gen = np.random.default_rng(11)
    x = np.array([50.0, 5.0, 20.0, 0.0, 1.0])
    counts = np.bincount([m.ts_choose(x, 1.5, gen) for _ in range(10_000)], minlength=3) / 10_000
    assert np.all(np.abs(counts - 1 / 3) <= 0.02)


def test_ts_forced_safe_overrides_samples():
    policy = make_policy("bandit_ts_safe", STD3)
    policy.gate.cooldown_remaining = 2
    rs = RngStream(0)
    assert all(policy.choose(ctx(), rs).arm == 2 for _ in range(50))


# -- reward and safety gate -------------------------------------------------------------


def test_reward_examples():
    assert RewardWeights() == RewardWeights(1.0, 0.002, 1.0)
    assert shaped_reward(True, 500.0) == 0.0
    assert shaped_reward(False, 1200.0) == pytest.approx(-3.4)
    with pytest.raises(ValueError):
        RewardWeights(1.0, -0.1, 1.0)


def test_failed_attempt_latency_is_sampled_timeout():
    policy = make_policy("bandit_safe", STD3)
    d = policy.choose(ctx(candidate=True), RngStream(0))
    fb = policy.observe_outcome(attempt(d, Outcome.FAILED))
    assert fb.reward == pytest.approx(-0.002 * d.timeout_us / 1000 - 1.0)
    d = policy.choose(ctx(candidate=True), RngStream(1))
    fb = policy.observe_outcome(attempt(d, Outcome.WON, latency_ms=500.0))
    assert fb.reward == 0.0


def test_superseded_attempt_produces_no_update():
    policy = make_policy("bandit_safe", STD3)
    d = policy.choose(ctx(candidate=True), RngStream(0))
    A = policy.model.A.copy()
    fb = policy.observe_outcome(attempt(d, Outcome.SUPERSEDED))
    assert fb.reward is None and fb.safety is None
    assert np.array_equal(A, policy.model.A)
    assert policy.gate.consecutive_failures == 0


def test_third_consecutive_failure_enters_cooldown():
    gate = SafetyGate()
    assert gate.on_failure() is None
    assert gate.on_failure() is None
    assert gate.on_failure() == "enter"
    assert gate.cooldown_remaining == 2 and gate.forced
    assert gate.on_failure() is None  # re-arms without a second enter
    assert gate.cooldown_remaining == 2
    assert gate.on_success() is None and gate.cooldown_remaining == 1
    assert gate.on_success() == "exit" and not gate.forced
    assert gate.consecutive_failures == 0


def test_disabled_gate_never_forces():
    gate = SafetyGate(enabled=False)
    for _ in range(10):
        assert gate.on_failure() is None
    assert not gate.forced


def test_gate_rejects_bad_parameters():
    with pytest.raises(PolicyError):
        SafetyGate(threshold=0)


def test_policy_gate_through_outcomes():
    policy = make_policy("bandit_safe", STD3)
    rs = RngStream(0)
    transitions = []
    for _ in range(3):
        d = policy.choose(ctx(candidate=True), rs)
        transitions.append(policy.observe_outcome(attempt(d, Outcome.FAILED)).safety)
    assert transitions == [None, None, "enter"]
    for _ in range(5):
        assert policy.choose(ctx(), rs).arm == 2
    for expected in (None, "exit"):
        d = policy.choose(ctx(candidate=True), rs)
        assert policy.observe_outcome(attempt(d, Outcome.WON, latency_ms=900)).safety == expected
    assert not policy.forced_safe


# -- adaptive baselines ----------------------------------------------------------------


def test_quantile_decay_examples():
    policy = make_policy("quantile_decay", STD3)
    assert policy.timeout_range() == (300, 600)  # cold start: moderate arm
    for _ in range(100):
        policy.observe_heartbeat(50.0, 10.0)
    assert policy.timeout_range() == pytest.approx((150.0, 500.0))
    d = policy.choose(ctx(), RngStream(0))
    assert 150_000 <= d.timeout_us <= 500_000


def test_quantile_estimator_converges_on_constant_stream():
    q = QuantileEstimator(0.9, 0.99)
    assert q.estimate is None
    for _ in range(300):
        q.update(40.0)
    assert q.estimate == 40.0


def test_quantile_estimator_matches_exact_quantile_without_decay():
    q = QuantileEstimator(0.9, decay=1.0, window=1000)
    vals = np.random.default_rng(0).exponential(20, 1000)
    for v in vals:
        q.update(v)
    s = np.sort(vals)
    assert q.estimate == s[math.ceil(0.9 * 1000) - 1]


def test_bandit_qdecay_scales_with_base():
    policy = make_policy("bandit_qdecay", STD3)
    assert policy.relative == RELATIVE_ARMS
    for _ in range(50):
        policy.observe_heartbeat(60.0, 20.0)
    assert policy.arm_range(0) == pytest.approx((180.0, 300.0))
    ranges60 = [policy.arm_range(a) for a in range(3)]
    for _ in range(400):
        policy.observe_heartbeat(120.0, 20.0)
    ranges120 = [policy.arm_range(a) for a in range(3)]
    assert ranges120 == pytest.approx([(2 * lo, 2 * hi) for lo, hi in ranges60])
    policy.gate.cooldown_remaining = 1
    d = policy.choose(ctx(), RngStream(0))
    assert d.arm == 2 and (d.lo_ms, d.hi_ms) == pytest.approx((7 * 120, 9 * 120))


def test_bandit_qdecay_falls_back_to_heartbeat_interval():
    policy = make_policy("bandit_qdecay", STD3)
    d = policy.choose(ctx(hb=50.0), RngStream(0))
    assert (d.lo_ms, d.hi_ms) == pytest.approx((150.0, 250.0))


def test_dynatune_et_examples():
    assert dynatune_et_timeout(100, 50) == 400
    assert dynatune_et_timeout(10, 50) == 250
    assert dynatune_et_timeout(1000, 50) == 2400


def test_dynatune_joint_examples():
    hb, t = dynatune_joint_adjust(200.0)  # base = 2 * 200 = 400
    assert hb == 100.0 and t == 400.0
    hb, t = dynatune_joint_adjust(1.0)
    assert hb == 20.0 and t == 80.0
    hb, t = dynatune_joint_adjust(10_000.0)
    assert hb == 1000.0 and t == 2400.0


def test_dynatune_policies_use_rtt_then_drive_heartbeat():
    et = make_policy("dynatune_et", STD3)
    assert et.choose(ctx(), RngStream(0)).arm == 1  # no estimate yet
    et.observe_rtt(100.0)
    d = et.choose(ctx(), RngStream(0))
    assert (d.lo_ms, d.hi_ms) == pytest.approx((400.0, 600.0))
    assert et.heartbeat_interval_ms() is None
    joint = make_policy("dynatune_joint", STD3)
    joint.observe_heartbeat(None, 100.0)  # one-way 100 ms -> rtt estimate 200 ms
    d = joint.choose(ctx(), RngStream(0))
    assert joint.heartbeat_interval_ms() == 100.0
    assert d.lo_ms == pytest.approx(400.0)


def test_rtt_heuristic_and_phi_mappings():
    rtt = make_policy("rtt_heuristic", STD3)
    assert rtt.arm_for(None) == 1
    assert rtt.arm_for(30.0) == 0
    assert rtt.arm_for(120.0) == 1
    assert rtt.arm_for(250.0) == 2
    ph = make_policy("phi_accrual", STD3)
    assert ph.arm_for(2.5) == 1
    assert ph.arm_for(1.0) == 0
    assert ph.arm_for(3.0) == 2


def test_phi_suspicion_grows_with_silence():
    assert phi(50, 50, 5) == pytest.approx(-math.log10(0.5))
    assert phi(100, 50, 5) > phi(60, 50, 5) > phi(50, 50, 5)
    ph = make_policy("phi_accrual", STD3)
    for gap in (50, 52, 48, 51, 49):
        ph.observe_heartbeat(gap, 10)
    assert ph.choose(ctx(since=10), RngStream(0)).arm == 0
    assert ph.choose(ctx(since=400), RngStream(0)).arm == 2


def test_backoff_doubles_per_failure_and_resets():
    policy = BackoffPolicy(STD3)
    d = make_policy("static_conservative", STD3).choose(ctx(), RngStream(0))
    for _ in range(2):
        policy.observe_outcome(attempt(d, Outcome.FAILED))
    assert policy.current_range() == (600, 1200)
    for _ in range(5):
        policy.observe_outcome(attempt(d, Outcome.FAILED))
    assert policy.current_range() == (1200, 2400)  # capped at 2 x conservative T_max
    policy.observe_outcome(attempt(d, Outcome.WON, latency_ms=10))
    assert policy.current_range() == (150, 300)


def test_random_baseline_default_range():
    policy = make_policy("random", STD3)
    rs = RngStream(3)
    ts = [policy.choose(ctx(), rs).timeout_us for _ in range(1000)]
    assert min(ts) >= 150_000 and max(ts) <= 300_000


def test_oracle_mapping_and_enumeration():
    policy = make_policy("oracle_best_per_regime", STD3, {"mapping": {0: 1, 1: 1}})
    d = policy.choose(ctx(regime=1), RngStream(0))
    assert d.arm == 1 and (d.lo_ms, d.hi_ms) == (300, 600)
    with pytest.raises(PolicyError):
        policy.choose(ctx(regime=7), RngStream(0))
    t = oracle_timeout({0: 1, 1: 1}, 1, STD3, random.Random(0))
    assert 300_000 <= t <= 600_000
    assert len(enumerate_mappings(3, [0, 1])) == 9
    assert len(enumerate_mappings(5, [0, 1])) == 25
    assert len({tuple(sorted(m.items())) for m in enumerate_mappings(3, [0, 1])}) == 9


def test_oracle_hint_default_mapping():
    policy = make_policy("oracle_hint", STD3, regimes=[0, 1])
    assert policy.mapping == {0: 0, 1: 1}


def test_learners_never_see_regime_id():
    policy = make_policy("bandit_safe", STD3)
    a = policy.featurize(ctx(regime=0).features)
    b = policy.featurize(ctx(regime=1).features)
    assert np.array_equal(a, b) and a.shape == (5,) and a[-1] == 1.0


def test_feature_variants():
    hb_only = make_policy("bandit_safe", STD3, {"features": "hb_only"})
    assert hb_only.featurize(ctx(fails=3).features).shape == (4,)
    z = make_policy("bandit_safe", STD3, {"feature_norm": "z_clip3"})
    for i in range(20):
        x = z.featurize(ctx(mean=50 + i, since=i * 10.0).features)
    assert np.all(np.abs(x[:-1]) <= 3.0)


# -- construction and persistence ---------------------------------------------------------


def test_unknown_policy_and_bad_params():
    with pytest.raises(PolicyError):
        make_policy("nope", STD3)
    with pytest.raises(PolicyError):
        make_policy("bandit_safe", STD3, {"learner": "eps"})
    with pytest.raises(PolicyError):
        make_policy("bandit_safe", STD3, {"nonstationary": "forever"})
    with pytest.raises(TypeError):
        make_policy("static_conservative", STD3, {"alpha": 1.0})


def _exercise(policy, seed=0):
    rs = RngStream(seed)
    for i in range(30):
        d = policy.choose(ctx(mean=40 + i, since=i * 7.0, candidate=True), rs)
        policy.observe_heartbeat(45.0 + i % 5, 12.0)
        policy.observe_rtt(20.0 + i)
        policy.observe_outcome(attempt(d, Outcome.WON if i % 3 else Outcome.FAILED, latency_ms=100 + i))


@pytest.mark.parametrize("method", METHODS)
def test_snapshot_round_trip_preserves_decisions(method):
    a = make_policy(method, STD3, regimes=[0, 1])
    _exercise(a)
    b = restore(make_policy(method, STD3, regimes=[0, 1]), snapshot(a))
    assert snapshot(b) == snapshot(a)
    ra, rb = RngStream(99), RngStream(99)
    for i in range(10):
        c = ctx(mean=30 + 5 * i, since=3.0 * i)
        assert _key(a.choose(c, ra)) == _key(b.choose(c, rb))


def _key(d):
    return d.timeout_us, d.arm, d.lo_ms, d.hi_ms, d.forced_safe


def test_snapshot_continues_learning_curve():
    a = make_policy("bandit_safe", STD3)
    _exercise(a)
    b = restore(make_policy("bandit_safe", STD3), snapshot(a))
    _exercise(a, seed=5)
    _exercise(b, seed=5)
    assert np.array_equal(a.model.A, b.model.A) and np.array_equal(a.model.b, b.model.b)


def test_snapshot_version_and_policy_checked():
    a = make_policy("bandit_safe", STD3)
    doc = snapshot(a).replace('"format_version": 1', '"format_version": 99')
    with pytest.raises(PolicyError):
        restore(make_policy("bandit_safe", STD3), doc)
    with pytest.raises(PolicyError):
        restore(make_policy("bandit_ts_safe", STD3), snapshot(a))


def test_every_method_builds_for_every_arm_set():
    for name in ARM_SETS:
        arms = ArmSet.named(name)
        for method in METHODS:
            d = make_policy(method, arms, regimes=[0]).choose(ctx(), RngStream(0))
            assert d.timeout_us > 0
