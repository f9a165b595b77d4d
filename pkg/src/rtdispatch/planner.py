"""Online dispatch by tree search over sampled incident chains.

At a decision state the planner samples ``b`` chains of future incidents,
and for each candidate responder builds a depth-limited tree of follow-up
dispatch decisions along every chain. Branching happens only within the
stochastic horizon; below it the myopic choice is taken. Each candidate's
score is the summed best-leaf cost across chains.
"""
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .core import Status
from .errors import ContractViolation, EmptyActionSet, InfeasibleAction, NoRoute
from .incidents import IncidentChain, generate_chains
from .timeutil import SECONDS_PER_HOUR


@dataclass(frozen=True)
class PlannerConfig:
    """Search hyper-parameters.

    ``discount_time_unit`` is the number of seconds per unit of the
    discount exponent: 60 means gamma is applied per minute of response.
    """
    b: int = 10
    epsilon: float = 1.5
    h_s: int = 1
    h: int = 4
    gamma: float = 0.9
    discount_time_unit: float = 60.0
    chain_horizon: float = 6 * SECONDS_PER_HOUR
    dispatch_offset: float = 0.0
    n_jobs: int = 1

    def __post_init__(self):
        if self.b < 1:
            raise ValueError("b must be >= 1")
        if not self.epsilon >= 1:
            raise ValueError("epsilon must be >= 1")
        if self.h_s < 0 or self.h < self.h_s:
            raise ValueError("need 0 <= h_s <= h")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.discount_time_unit <= 0:
            raise ValueError("discount_time_unit must be positive")


@dataclass(frozen=True)
class EnvironmentSnapshot:
    """Environment as seen by the planner: clock, router and incident context."""
    clock: float
    router: object
    history: object = None
    weather: tuple = None
    service_mean: float = 1200.0
    dispatch_offset: float = 0.0

    @property
    def grid(self):
        return self.router.grid


@dataclass(frozen=True)
class DispatchState:
    """Pending incidents, fleet, and environment at time ``now``.

    ``cursor`` is how many incidents of the chain being rolled out have
    already been revealed; ``response_time`` belongs to the dispatch that
    produced this state.
    """
    now: float
    pending: tuple
    fleet: tuple
    env: EnvironmentSnapshot
    cursor: int = 0
    response_time: float = None
    elapsed: float = 0.0
    terminal: bool = False

    def responder(self, rid):
        for r in self.fleet:
            if r.id == rid:
                return r
        raise KeyError(rid)

    def free_responders(self):
        return [r for r in self.fleet if r.is_free]


@dataclass(frozen=True, order=True)
class DispatchAction:
    responder_id: int
    incident_id: int


class _Enqueue:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "Enqueue"


Enqueue = _Enqueue()


@dataclass
class TreeNode:
    state: DispatchState
    cost: float
    depth: int
    elapsed: float = 0.0


def response_time(state, action):
    """Travel seconds for the action's responder to reach the head incident."""
    inc = state.pending[0]
    if action.incident_id != inc.id:
        raise InfeasibleAction(f"incident {action.incident_id} is not at the head of the queue")
    r = state.responder(action.responder_id)
    if not r.is_free:
        raise InfeasibleAction(f"responder {r.id} is {r.status.value}")
    env = state.env
    try:
        travel = env.router.travel_time(r.location_at(state.now), inc.location, state.now)
    except NoRoute as exc:
        raise InfeasibleAction(str(exc)) from exc
    return travel + env.dispatch_offset


def _ranked_actions(state):
    inc = state.pending[0]
    ranked = []
    for r in state.fleet:
        if r.is_free:
            a = DispatchAction(r.id, inc.id)
            try:
                ranked.append((response_time(state, a), r.id, a))
            except InfeasibleAction:
                continue
    if not ranked:
        raise EmptyActionSet(f"no free responder for incident {inc.id}")
    ranked.sort(key=lambda x: (x[0], x[1]))
    return ranked


def select_candidate_actions(state, d, h_s, epsilon):
    """Myopic best action, plus (within the stochastic horizon) every action
    whose response time is at most ``epsilon`` times the best."""
    if not state.pending:
        raise EmptyActionSet("no pending incident")
    ranked = _ranked_actions(state)
    best_cost, _, best = ranked[0]
    if d >= h_s:
        return [best]
    return [a for c, _, a in ranked if c <= epsilon * best_cost]


def utility_update(u_p, gamma, t, d, time_unit=1.0):
    """Running weighted average of response times: u_p + gamma^t (t - u_p) / (d + 1).

    The exponent is ``t / time_unit``.
    """
    return u_p + gamma ** (t / time_unit) * (t - u_p) / (d + 1)


def update_state(state, action, chain):
    """Apply ``action`` and roll the system forward to the next decision epoch.

    A decision epoch is a chain incident arriving while some responder is
    free, or a responder finishing service while incidents wait. If the
    chain is used up and nothing waits, the returned state is terminal.
    """
    fleet = list(state.fleet)
    pending = list(state.pending)
    now = state.now
    rt = None
    if action is None:
        if pending and any(r.is_free for r in fleet):
            raise ContractViolation("a free responder must be dispatched")
    else:
        travel = response_time(state, action)
        inc = pending.pop(0)
        i = next(k for k, r in enumerate(fleet) if r.id == action.responder_id)
        arrival = now + travel
        fleet[i] = fleet[i].moved(Status.EN_ROUTE, now, arrival, target=inc.location)
        rt = arrival - inc.occurred_at
    return _advance(state, fleet, pending, chain, rt)


def _advance(state, fleet, pending, chain, rt):
    env = state.env
    now = state.now
    cursor = state.cursor
    n_chain = len(chain) if chain is not None else 0
    while True:
        t_resp, i_resp = math.inf, -1
        for k, r in enumerate(fleet):
            if r.status is not Status.IDLE and r.busy_until < t_resp:
                t_resp, i_resp = r.busy_until, k
        t_chain = chain[cursor].occurred_at if cursor < n_chain else math.inf
        if not pending and t_chain == math.inf:
            return DispatchState(now, (), tuple(fleet), env, cursor, rt, now - state.now, True)
        if t_resp <= t_chain:
            now = max(now, t_resp)
            r = fleet[i_resp]
            if r.status is Status.EN_ROUTE:
                fleet[i_resp] = r.moved(Status.SERVICING, now, now + env.service_mean,
                                        location=r.target)
            elif r.status is Status.SERVICING:
                back = env.router.travel_time(r.location, r.depot_location, now)
                fleet[i_resp] = r.moved(Status.RETURNING, now, now + back,
                                        target=r.depot_location)
                if pending:
                    break
            else:
                fleet[i_resp] = r.moved(Status.IDLE, now, now)
        else:
            now = max(now, t_chain)
            pending.append(chain[cursor])
            cursor += 1
            if any(r.is_free for r in fleet):
                break
    return DispatchState(now, tuple(pending), tuple(fleet), env, cursor, rt, now - state.now)


def create_state_tree(node, chain, d, h_s, h, config):
    """Best (lowest) leaf cost below ``node``."""
    if d > h or node.state.terminal:
        return node.cost
    actions = select_candidate_actions(node.state, d, h_s, config.epsilon)
    d += 1
    child_costs = []
    for a in actions:
        s2 = update_state(node.state, a, chain)
        cost = utility_update(node.cost, config.gamma, s2.response_time, d,
                              config.discount_time_unit)
        child = TreeNode(s2, cost, d, node.elapsed + s2.elapsed)
        child_costs.append(create_state_tree(child, chain, d, h_s, h, config))
    return min(child_costs)


def chain_evaluation(chain, state, d, candidates, h_s, h, config):
    """Cost of each candidate action along one chain."""
    scores = {}
    d += 1
    for a in candidates:
        s2 = update_state(state, a, chain)
        root = TreeNode(s2, s2.response_time, d, s2.elapsed)
        scores[a] = create_state_tree(root, chain, d, h_s, h, config)
    return scores


class SurvivalTheta:
    """Generative model: chains from the survival model, starting at the state's clock."""

    def __init__(self, model, chain_horizon=6 * SECONDS_PER_HOUR, max_events=None):
        self.model = model
        self.chain_horizon = chain_horizon
        self.max_events = max_events

    def __call__(self, b, state, seed):
        return generate_chains(b, self.model, state.env, state.now, self.chain_horizon,
                               seed=seed, max_events=self.max_events)


class FixedChains:
    """Generative model that always returns the same chains (for testing)."""

    def __init__(self, chains):
        self.chains = list(chains)

    def __call__(self, b, state, seed):
        return self.chains[:b]


def dispatch_decision(state, config, theta, rng=None, trace=None):
    """Choose a responder for ``state.pending[0]``, or ``Enqueue`` if none is free.

    ``trace``, if a list, receives one dict describing the decision.
    """
    free = state.free_responders()
    if not free:
        return Enqueue
    t0 = time.perf_counter()
    candidates = select_candidate_actions(state, 0, config.h_s, config.epsilon)
    per_chain = []
    if len(candidates) == 1:
        choice = candidates[0]
        totals = {choice: None}
    else:
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        seed = int(rng.integers(2 ** 63))
        chains = theta(config.b, state, seed)

        def evaluate(chain):
            return chain_evaluation(chain, state, 0, candidates, config.h_s, config.h, config)

        if config.n_jobs > 1 and len(chains) > 1:
            with ThreadPoolExecutor(config.n_jobs) as pool:
                per_chain = list(pool.map(evaluate, chains))
        else:
            per_chain = [evaluate(c) for c in chains]
        totals = {a: 0.0 for a in candidates}
        for u in per_chain:
            for a in candidates:
                totals[a] += u[a]
        choice = min(candidates, key=lambda a: (totals[a], a.responder_id))
    if trace is not None:
        trace.append({
            "incident": state.pending[0].id,
            "time": state.now,
            "candidates": [a.responder_id for a in candidates],
            "chain_costs": [[u[a] for a in candidates] for u in per_chain],
            "totals": [totals[a] for a in candidates],
            "chosen": choice.responder_id,
            "wall_us": int((time.perf_counter() - t0) * 1e6),
        })
    return choice


class Planner:
    """Dispatch policy object wrapping :func:`dispatch_decision`."""

    def __init__(self, config, theta, trace=None):
        self.config = config
        self.theta = theta
        self.trace = trace

    def decide(self, state, rng=None):
        return dispatch_decision(state, self.config, self.theta, rng, self.trace)
