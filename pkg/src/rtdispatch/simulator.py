"""Discrete-event replay of an incident stream under a dispatch policy."""
import heapq
import time
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from .core import Responder, Status, nearest_euclidean
from .planner import (DispatchAction, DispatchState, Enqueue, EnvironmentSnapshot, Planner,
                      PlannerConfig, SurvivalTheta)
from .survival import IncidentHistory

REPORTED, ARRIVED, SERVICE_DONE, RETURNED = "IncidentReported", "ResponderArrived", \
    "ServiceCompleted", "ResponderReturned"

# labels for deriving independent sub-seeds from the scenario seed
SERVICE_STREAM = 1
PLANNER_STREAM = 2

IMPACT_TOLERANCE = 1e-6


@dataclass
class Scenario:
    grid: object
    depots: list
    responders: list
    router: object
    model: object
    incidents: list
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    service_mean: float = 1200.0
    seed: int = 0
    base_metric: str = "euclidean"
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.responders) < 1:
            raise ValueError("scenario needs at least one responder")
        depot_ids = {d.id for d in self.depots}
        for r in self.responders:
            if r.home_depot not in depot_ids:
                raise ValueError(f"responder {r.id} has unknown depot {r.home_depot}")

    def with_responders(self, k):
        """Copy with ``k`` responders spread round-robin over the depots in order."""
        fleet = [Responder(i, d.id, d.location)
                 for i, d in ((i, self.depots[i % len(self.depots)]) for i in range(k))]
        return replace(self, responders=fleet)

    def with_planner(self, **kw):
        return replace(self, planner=replace(self.planner, **kw))


@dataclass
class ReplayResult:
    policy: str
    response_times: dict
    assignments: dict
    dispatch_times: dict
    travel_times: dict
    decision_times: list
    dispatch_count: int = 0
    serviced_count: int = 0

    def mean_response_time(self):
        v = list(self.response_times.values())
        return float(np.mean(v)) if v else 0.0

    def mean_decision_time(self):
        return float(np.mean(self.decision_times)) if self.decision_times else 0.0


class GreedyPolicy:
    """The base policy: closest free responder, by ``metric``."""

    name = "greedy"

    def __init__(self, metric="euclidean"):
        if metric not in ("euclidean", "travel_time"):
            raise ValueError(f"unknown metric {metric!r}")
        self.metric = metric

    def decide(self, state, rng=None):
        inc = state.pending[0]
        if self.metric == "euclidean":
            rid = nearest_euclidean(state.fleet, inc, state.now)
        else:
            router = state.env.router
            best = min(((router.travel_time(r.location_at(state.now), inc.location, state.now), r.id)
                        for r in state.fleet if r.is_free), default=None)
            rid = None if best is None else best[1]
        return Enqueue if rid is None else DispatchAction(rid, inc.id)


def planner_policy(scenario, trace=None):
    cfg = scenario.planner
    theta = SurvivalTheta(scenario.model, cfg.chain_horizon, max_events=cfg.h + 1)
    policy = Planner(cfg, theta, trace)
    policy.name = "planner"
    return policy


def _service_times(scenario):
    rng = np.random.default_rng([scenario.seed, SERVICE_STREAM])
    return {inc.id: float(x) for inc, x in
            zip(scenario.incidents, rng.exponential(scenario.service_mean, len(scenario.incidents)))}


def _planner_view(r, now, service_mean):
    """What the planner may know: service end is only an estimate."""
    if r.status is Status.SERVICING:
        return replace(r, busy_until=max(r.since + service_mean, now))
    return r


def run_replay(scenario, policy="greedy", trace=None):
    """Simulate the scenario's incident stream and return per-incident metrics.

    ``policy`` is ``"greedy"``, ``"planner"`` or an object with
    ``decide(state, rng)``.
    """
    if policy == "greedy":
        policy = GreedyPolicy(scenario.base_metric)
    elif policy == "planner":
        policy = planner_policy(scenario, trace)
    name = getattr(policy, "name", type(policy).__name__)
    router = scenario.router
    incidents = sorted(scenario.incidents, key=lambda i: (i.occurred_at, i.id))
    service = _service_times(scenario)
    fleet = {r.id: r for r in scenario.responders}
    version = {rid: 0 for rid in fleet}
    queue = deque()
    history = IncidentHistory()
    weather = None
    offset = scenario.planner.dispatch_offset

    heap, seq = [], 0

    def push(t, kind, payload):
        nonlocal seq
        heapq.heappush(heap, (t, seq, kind, payload))
        seq += 1

    result = ReplayResult(name, {}, {}, {}, {}, [])

    def dispatch(rid, inc, now):
        r = fleet[rid]
        travel = router.travel_time(r.location_at(now), inc.location, now) + offset
        fleet[rid] = r.moved(Status.EN_ROUTE, now, now + travel, target=inc.location)
        version[rid] += 1
        result.assignments[inc.id] = rid
        result.dispatch_times[inc.id] = now
        result.travel_times[inc.id] = travel
        result.dispatch_count += 1
        push(now + travel, ARRIVED, (rid, inc))

    for inc in incidents:
        push(inc.occurred_at, REPORTED, inc)

    while heap:
        now, _, kind, payload = heapq.heappop(heap)
        if kind == REPORTED:
            inc = payload
            history.add(inc.grid_id, inc.occurred_at)
            if inc.weather is not None:
                weather = inc.weather
            if not any(r.is_free for r in fleet.values()):
                queue.append(inc)
                continue
            env = EnvironmentSnapshot(now, router, history, weather, scenario.service_mean, offset)
            view = tuple(_planner_view(fleet[k], now, scenario.service_mean) for k in sorted(fleet))
            state = DispatchState(now, (inc,), view, env)
            rng = np.random.default_rng([scenario.seed, PLANNER_STREAM, inc.id])
            t0 = time.perf_counter()
            action = policy.decide(state, rng)
            result.decision_times.append(time.perf_counter() - t0)
            if action is Enqueue:
                raise RuntimeError("policy enqueued an incident while a responder was free")
            dispatch(action.responder_id, inc, now)
        elif kind == ARRIVED:
            rid, inc = payload
            result.response_times[inc.id] = now - inc.occurred_at
            fleet[rid] = fleet[rid].moved(Status.SERVICING, now, now + service[inc.id],
                                          location=inc.location)
            push(now + service[inc.id], SERVICE_DONE, rid)
        elif kind == SERVICE_DONE:
            rid = payload
            result.serviced_count += 1
            if queue:
                dispatch(rid, queue.popleft(), now)
                continue
            r = fleet[rid]
            back = router.travel_time(r.location, r.depot_location, now)
            fleet[rid] = r.moved(Status.RETURNING, now, now + back, target=r.depot_location)
            version[rid] += 1
            push(now + back, RETURNED, (rid, version[rid]))
        elif kind == RETURNED:
            rid, ver = payload
            if ver == version[rid] and fleet[rid].status is Status.RETURNING:
                fleet[rid] = fleet[rid].moved(Status.IDLE, now, now)
    return result


@dataclass
class ComparisonReport:
    rows: list                   # (incident_id, base_seconds, policy_seconds)
    impacted_count: int
    mean_savings_on_impacted: float
    mean_decision_compute_time: float
    mean_response_base: float
    mean_response_policy: float
    savings: list                # base - policy, positive where the planner helped
    losses: list                 # policy - base, positive where the planner hurt
    base_decision_time: float = 0.0
    config: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "config": self.config,
            "incidents": len(self.rows),
            "impacted_count": self.impacted_count,
            "positively_impacted": len(self.savings),
            "negatively_impacted": len(self.losses),
            "mean_savings_on_impacted_s": self.mean_savings_on_impacted,
            "mean_decision_compute_time_s": self.mean_decision_compute_time,
            "mean_base_decision_time_s": self.base_decision_time,
            "mean_response_base_s": self.mean_response_base,
            "mean_response_policy_s": self.mean_response_policy,
            "savings_s": self.savings,
            "losses_s": self.losses,
        }


def build_report(base, other, config=None):
    rows = [(iid, base.response_times[iid], other.response_times[iid])
            for iid in sorted(base.response_times)]
    diffs = [(b - p) for _, b, p in rows if abs(b - p) > IMPACT_TOLERANCE]
    return ComparisonReport(
        rows=rows,
        impacted_count=len(diffs),
        mean_savings_on_impacted=float(np.mean(diffs)) if diffs else 0.0,
        mean_decision_compute_time=other.mean_decision_time(),
        mean_response_base=base.mean_response_time(),
        mean_response_policy=other.mean_response_time(),
        savings=sorted(d for d in diffs if d > 0),
        losses=sorted(-d for d in diffs if d < 0),
        base_decision_time=base.mean_decision_time(),
        config=dict(config or {}),
    )


def compare_policies(scenario, trace=None):
    """Replay the same stream under the base policy and the planner."""
    base = run_replay(scenario, "greedy")
    other = run_replay(scenario, "planner", trace)
    return build_report(base, other, scenario.config)
