"""Raft leader election and heartbeats over the simulated network.

Logs are empty, so only election liveness is modelled. Every election
deadline comes from the node's timeout policy; the state machine never looks
inside the policy beyond :class:`~electsim.policies.TimeoutPolicy`.
"""

from __future__ import annotations

import enum
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

from .engine import EventKind, Kind, RngStream, Simulator, TraceSink, ms
from .net import LEADER, FaultSchedule, Network
from .policies.base import TimeoutPolicy
from .records import ContextVector, Decision, DecisionContext, ElectionAttempt, Outcome

HB_WINDOW = 20  # inter-arrival samples kept for context features


class Role(str, enum.Enum):
    FOLLOWER = "Follower"
    CANDIDATE = "Candidate"
    LEADER = "Leader"


class PolicyBug(RuntimeError):
    """A policy returned an unusable timeout; the run is halted."""


def majority(n: int) -> int:
    return n // 2 + 1


def log_up_to_date(candidate_last: tuple[int, int], voter_last: tuple[int, int]) -> bool:
    """Raft's RequestVote log check. Logs are empty here so this is always true."""
    return candidate_last >= voter_last


@dataclass
class NodeState:
    id: int
    policy: TimeoutPolicy
    rng: RngStream
    role: Role = Role.FOLLOWER
    current_term: int = 0
    voted_for: int | None = None
    election_deadline: int | None = None
    votes_received: set = field(default_factory=set)
    last_heartbeat_from_leader: tuple[int, int] | None = None
    alive: bool = True
    # local observations feeding the context vector
    hb_gaps: deque = field(default_factory=lambda: deque(maxlen=HB_WINDOW))
    view_since: int = 0
    consecutive_failures: int = 0
    attempt: ElectionAttempt | None = None
    timer: object = None
    hb_timer: object = None


class Cluster:
    def __init__(
        self,
        n: int,
        network: Network,
        policy_factory: Callable[[], TimeoutPolicy],
        rng: RngStream,
        *,
        heartbeat_interval_ms: float = 50.0,
        faults: FaultSchedule = FaultSchedule(),
        reset_on_restart: bool = False,
        trace: TraceSink | None = None,
        sim: Simulator | None = None,
    ):
        self.n = n
        self.quorum = majority(n)
        self.net = network
        self.sim = sim or Simulator()
        self.trace = trace if trace is not None else TraceSink()
        self.hb_ms = heartbeat_interval_ms
        self.hb_us = ms(heartbeat_interval_ms)
        self.faults = faults
        self.reset_on_restart = reset_on_restart
        self.policy_factory = policy_factory
        prng = rng.fork("policy")
        self.nodes = [NodeState(i, policy_factory(), prng.fork(f"node-{i}")) for i in range(n)]
        self._crash_target: dict[int, int] = {}
        self.attempts: list[ElectionAttempt] = []

    # -- setup ------------------------------------------------------------------
    def start(self) -> None:
        sched = self.sim.schedule
        for t, regime in self.net.schedule.switches[1:]:
            sched(t, EventKind.FAULT_ACTION, self._switch_regime, regime)
        for i, c in enumerate(self.faults.crashes):
            sched(c.down_us, EventKind.FAULT_ACTION, self._crash, i)
            sched(c.up_us, EventKind.FAULT_ACTION, self._restart, i)
        for p in self.faults.partitions:
            sched(p.start_us, EventKind.FAULT_ACTION, self._partition_start, p)
            sched(p.end_us, EventKind.FAULT_ACTION, self._partition_end, p)
        for node in self.nodes:
            self.deadline_reset(node)

    def run(self, horizon_us: int) -> int:
        self.start()
        return self.sim.run_until(horizon_us, self.trace)

    # -- helpers ----------------------------------------------------------------
    @property
    def now(self) -> int:
        return self.sim.clock

    def emit(self, node: int | None, kind: Kind, term: int | None = None, **detail) -> None:
        self.trace.emit(self.sim.clock, node, kind, term, **detail)

    def context(self, node: NodeState) -> ContextVector:
        now = self.sim.clock
        gaps = node.hb_gaps
        if gaps:
            k = len(gaps)
            mean = sum(gaps) / k
            var = sum((g - mean) ** 2 for g in gaps) / k
            std = math.sqrt(var)
        else:
            mean = std = 0.0
        last = node.last_heartbeat_from_leader
        since_us = now - (last[1] if last is not None else node.view_since)
        return ContextVector(mean, std, since_us / 1000, node.consecutive_failures, self.net.active_regime(now))

    def _send(self, src: int, dst: int, msg: tuple) -> None:
        at = self.net.send(src, dst, self.sim.clock)
        if at is not None:
            self.sim.schedule(at, EventKind.MESSAGE_DELIVER, self._deliver, src, dst, msg)

    def _broadcast(self, src: int, msg: tuple) -> None:
        for dst in range(self.n):
            if dst != src:
                self._send(src, dst, msg)

    def _deliver(self, src: int, dst: int, msg: tuple) -> None:
        if not self.net.deliverable(src, dst):
            return
        node = self.nodes[dst]
        kind = msg[0]
        if kind == "hb":
            self.on_heartbeat(node, msg[2], msg[1], msg[3])
        elif kind == "rv":
            self.on_request_vote(node, msg[2], msg[1], msg[3])
        else:
            self._on_vote_response(node, *msg[1:])

    # -- deadlines ----------------------------------------------------------------
    def deadline_reset(self, node: NodeState, candidate: bool = False) -> tuple[Decision, ContextVector]:
        now = self.sim.clock
        features = self.context(node)
        ctx = DecisionContext(now, features, self.hb_ms, candidate)
        d = node.policy.choose(ctx, node.rng)
        if not isinstance(d.timeout_us, int) or d.timeout_us <= 0:
            raise PolicyBug(f"node {node.id}: policy {node.policy.name} returned timeout {d.timeout_us!r}")
        node.election_deadline = now + d.timeout_us
        self.emit(
            node.id, Kind.POLICY_DECISION, node.current_term,
            arm=d.arm, timeout_us=d.timeout_us, lo_ms=d.lo_ms, hi_ms=d.hi_ms,
            forced_safe=d.forced_safe, candidate=candidate,
        )
        timer = node.timer
        if timer is None or timer.cancelled or timer.fire_at > node.election_deadline:
            if timer is not None:
                timer.cancel()
            node.timer = self.sim.schedule(node.election_deadline, EventKind.TIMER_FIRE, self._on_timer, node)
        return d, features

    def _on_timer(self, node: NodeState) -> None:
        node.timer = None
        if not node.alive or node.role is Role.LEADER or node.election_deadline is None:
            return
        if self.sim.clock < node.election_deadline:
            node.timer = self.sim.schedule(node.election_deadline, EventKind.TIMER_FIRE, self._on_timer, node)
            return
        self.on_election_timeout(node)

    # -- elections ------------------------------------------------------------------
    def on_election_timeout(self, node: NodeState) -> None:
        self.emit(node.id, Kind.ELECTION_TIMEOUT, node.current_term, role=node.role.value)
        if node.role is Role.CANDIDATE and node.attempt is not None:
            self._finish_attempt(node, Outcome.FAILED)
        self._start_candidacy(node)

    def _start_candidacy(self, node: NodeState) -> None:
        node.current_term += 1
        node.role = Role.CANDIDATE
        node.voted_for = node.id
        node.votes_received = {node.id}
        d, features = self.deadline_reset(node, candidate=True)
        node.attempt = ElectionAttempt(node.id, node.current_term, self.sim.clock, d.arm, d.timeout_us, features, d.token)
        self.emit(node.id, Kind.BECAME_CANDIDATE, node.current_term, arm=d.arm, timeout_us=d.timeout_us)
        self.emit(node.id, Kind.REQUEST_VOTE_SENT, node.current_term, peers=self.n - 1)
        self._broadcast(node.id, ("rv", node.current_term, node.id, self.sim.clock))
        if len(node.votes_received) >= self.quorum:
            self.on_majority(node)

    def _finish_attempt(self, node: NodeState, outcome: Outcome) -> None:
        attempt = node.attempt
        node.attempt = None
        if attempt is None:
            return
        attempt.outcome = outcome
        if outcome is Outcome.WON:
            attempt.latency_us = self.sim.clock - attempt.started_at
            node.consecutive_failures = 0
        elif outcome is Outcome.FAILED:
            node.consecutive_failures += 1
        self.attempts.append(attempt)
        fb = node.policy.observe_outcome(attempt)
        common = dict(
            arm=attempt.arm, started_at=attempt.started_at,
            timeout_us=attempt.sampled_timeout_us, reward=fb.reward,
        )
        if outcome is Outcome.WON:
            self.emit(node.id, Kind.LEADER_ELECTED, attempt.term, latency_ms=attempt.latency_ms, **common)
        elif outcome is Outcome.FAILED:
            self.emit(node.id, Kind.ELECTION_FAILED, attempt.term, latency_ms=attempt.latency_ms, **common)
        if fb.safety == "enter":
            self.emit(node.id, Kind.SAFETY_ENTER, node.current_term)
        elif fb.safety == "exit":
            self.emit(node.id, Kind.SAFETY_EXIT, node.current_term, reason="cooldown")

    def _step_down(self, node: NodeState, term: int) -> None:
        """Adopt a higher term as follower."""
        if node.role is Role.CANDIDATE:
            self._finish_attempt(node, Outcome.SUPERSEDED)
        was_leader = node.role is Role.LEADER
        node.current_term = term
        node.voted_for = None
        node.role = Role.FOLLOWER
        node.votes_received = set()
        if was_leader:
            if node.hb_timer is not None:
                node.hb_timer.cancel()
                node.hb_timer = None
            self.deadline_reset(node)

    def on_request_vote(self, node: NodeState, candidate: int, term: int, sent_at: int) -> None:
        self.emit(node.id, Kind.REQUEST_VOTE_RECEIVED, term, candidate=candidate)
        attempt = self.nodes[candidate].attempt
        if attempt is not None and attempt.term == term:
            attempt.requestvote_receipts += 1
        if term > node.current_term:
            self._step_down(node, term)
        grant = (
            term == node.current_term
            and node.voted_for in (None, candidate)
            and log_up_to_date((0, 0), (0, 0))
        )
        if grant and node.voted_for is None:
            node.voted_for = candidate
            self.emit(node.id, Kind.VOTE_GRANTED, term, candidate=candidate)
            self.deadline_reset(node)
        self._send(node.id, candidate, ("rvr", node.current_term, grant, node.id, sent_at))

    def _on_vote_response(self, node: NodeState, term: int, granted: bool, voter: int, sent_at: int) -> None:
        if term > node.current_term:
            self._step_down(node, term)
            return
        if node.role is not Role.CANDIDATE or term != node.current_term:
            return
        node.policy.observe_rtt((self.sim.clock - sent_at) / 1000)
        if granted:
            node.votes_received.add(voter)
            if len(node.votes_received) >= self.quorum:
                self.on_majority(node)

    def on_majority(self, node: NodeState) -> None:
        self._finish_attempt(node, Outcome.WON)
        node.role = Role.LEADER
        node.election_deadline = None
        if node.timer is not None:
            node.timer.cancel()
            node.timer = None
        self._send_heartbeats(node, node.current_term)

    # -- heartbeats ---------------------------------------------------------------
    def _send_heartbeats(self, node: NodeState, term: int) -> None:
        node.hb_timer = None
        if not node.alive or node.role is not Role.LEADER or node.current_term != term:
            return
        self.emit(node.id, Kind.HEARTBEAT_SENT, term)
        self._broadcast(node.id, ("hb", term, node.id, self.sim.clock))
        interval = node.policy.heartbeat_interval_ms()
        step = ms(interval) if interval else self.hb_us
        node.hb_timer = self.sim.schedule(self.sim.clock + step, EventKind.TIMER_FIRE, self._send_heartbeats, node, term)

    def on_heartbeat(self, node: NodeState, leader: int, term: int, sent_at: int) -> None:
        if term < node.current_term:
            return
        if term > node.current_term:
            self._step_down(node, term)
        elif node.role is Role.CANDIDATE:
            self._finish_attempt(node, Outcome.SUPERSEDED)
        node.role = Role.FOLLOWER
        node.votes_received = set()
        now = self.sim.clock
        last = node.last_heartbeat_from_leader
        gap_ms = (now - last[1]) / 1000 if last is not None else None
        if gap_ms is not None:
            node.hb_gaps.append(gap_ms)
        node.last_heartbeat_from_leader = (leader, now)
        delay_ms = (now - sent_at) / 1000
        node.policy.observe_heartbeat(gap_ms, delay_ms)
        self.emit(node.id, Kind.HEARTBEAT_RECEIVED, term, leader=leader, delay_us=now - sent_at)
        self.deadline_reset(node)

    # -- faults -------------------------------------------------------------------
    def _switch_regime(self, regime: int) -> None:
        self.net.switch_regime(regime)
        self.emit(None, Kind.REGIME_SWITCH, None, regime=regime)

    def _resolve_target(self, ref) -> int:
        if ref != LEADER:
            return ref
        leaders = [nd for nd in self.nodes if nd.alive and nd.role is Role.LEADER]
        if leaders:
            return max(leaders, key=lambda nd: (nd.current_term, -nd.id)).id
        return min(nd.id for nd in self.nodes if nd.alive)

    def _crash(self, idx: int) -> None:
        target = self._resolve_target(self.faults.crashes[idx].node)
        self._crash_target[idx] = target
        node = self.nodes[target]
        if not node.alive:
            return
        node.alive = False
        self.net.alive[target] = False
        for attr in ("timer", "hb_timer"):
            h = getattr(node, attr)
            if h is not None:
                h.cancel()
                setattr(node, attr, None)
        node.attempt = None  # in-flight attempt never completes; no reward sample
        node.role = Role.FOLLOWER
        node.votes_received = set()
        node.election_deadline = None
        self.emit(target, Kind.NODE_CRASHED, node.current_term)

    def _restart(self, idx: int) -> None:
        target = self._crash_target.get(idx)
        if target is None:
            return
        node = self.nodes[target]
        if node.alive:
            return
        node.alive = True
        self.net.alive[target] = True
        node.hb_gaps.clear()
        node.last_heartbeat_from_leader = None
        node.view_since = self.sim.clock
        node.consecutive_failures = 0
        self.emit(target, Kind.NODE_RESTARTED, node.current_term, reset_policy=self.reset_on_restart)
        if self.reset_on_restart:
            if node.policy.forced_safe:
                self.emit(target, Kind.SAFETY_EXIT, node.current_term, reason="reset")
            node.policy = self.policy_factory()
        self.deadline_reset(node)

    def _partition_start(self, p) -> None:
        self.net.start_partition(p.groups)
        self.emit(None, Kind.PARTITION_START, None, groups=[sorted(g) for g in p.groups])

    def _partition_end(self, p) -> None:
        self.net.end_partition()
        self.emit(None, Kind.PARTITION_END, None)
