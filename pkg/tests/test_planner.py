import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rtdispatch.core import EARTH_RADIUS_M, Incident, Responder, Status, equirectangular_m
from rtdispatch.errors import ContractViolation, EmptyActionSet, InfeasibleAction, NoRoute
from rtdispatch.incidents import IncidentChain
from rtdispatch.planner import (DispatchAction, DispatchState, Enqueue, EnvironmentSnapshot,
                                FixedChains, Planner, PlannerConfig, TreeNode, chain_evaluation,
                                create_state_tree, dispatch_decision, response_time,
                                select_candidate_actions, update_state, utility_update)

SPEED = 10.0      # m/s


class LineRouter:
    """Straight-line travel at a constant speed; enough for hand-traced states."""
    grid = None

    def __init__(self, unreachable=()):
        self.unreachable = set(unreachable)

    def travel_time(self, src, dst, t):
        if (tuple(src), tuple(dst)) in self.unreachable:
            raise NoRoute("blocked")
        return equirectangular_m(src, dst) / SPEED


def at(metres):
    """A point ``metres`` north of the origin."""
    return (36.0 + math.degrees(metres / EARTH_RADIUS_M), -87.0)


def env(service_mean=600.0, router=None):
    return EnvironmentSnapshot(0.0, router or LineRouter(), service_mean=service_mean)


def inc(iid, t, metres):
    return Incident(iid, 0, float(t), at(metres))


def state(responders, pending, now=0.0, service_mean=600.0):
    return DispatchState(now, tuple(pending), tuple(responders), env(service_mean))


def chain(*incidents):
    return IncidentChain(tuple(incidents))


class TestUtilityUpdate:
    def test_examples(self):
        assert utility_update(0, 0.9, 1, 0) == pytest.approx(0.9, abs=1e-9)
        assert utility_update(100, 1.0, 60, 1) == pytest.approx(80.0, abs=1e-9)
        assert utility_update(90, 0.99999, 120, 2) == pytest.approx(90 + 0.99999 ** 120 * 10, abs=1e-9)
        assert utility_update(90, 0.99999, 120, 2) == pytest.approx(99.988, abs=1e-3)

    def test_minutes(self):
        assert utility_update(0, 0.9, 120, 0, time_unit=60) == pytest.approx(0.81 * 120)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(-1e4, 1e4), st.floats(1e-3, 0.999), st.floats(0, 1e4), st.integers(0, 20))
    def test_contraction(self, u, gamma, t, d):
        cost = utility_update(u, gamma, t, d)
        assert math.isfinite(cost)
        assert abs(cost - u) <= (t + abs(u)) / (d + 1) + 1e-9

    def test_gamma_one_is_running_mean(self):
        u = 10.0
        for d, t in enumerate([20.0, 30.0, 40.0], start=1):
            u = utility_update(u, 1.0, t, d)
        assert u == pytest.approx(25.0)


class TestCandidates:
    def setup_method(self):
        self.s = state([Responder(1, 0, at(1000)), Responder(2, 0, at(1400)),
                        Responder(3, 0, at(1600))], [inc(7, 0, 0)])

    def test_within_factor(self):
        got = select_candidate_actions(self.s, 0, 1, 1.5)
        assert [a.responder_id for a in got] == [1, 2]

    def test_below_stochastic_horizon_is_myopic(self):
        assert select_candidate_actions(self.s, 1, 1, 1.5) == [DispatchAction(1, 7)]

    def test_epsilon_one_unique_min(self):
        assert select_candidate_actions(self.s, 0, 3, 1.0) == [DispatchAction(1, 7)]

    def test_best_always_included(self):
        for eps in (1.0, 1.2, 5.0):
            assert DispatchAction(1, 7) in select_candidate_actions(self.s, 0, 2, eps)

    def test_busy_responders_skipped(self):
        busy = Responder(1, 0, at(0)).moved(Status.EN_ROUTE, 0, 50, target=at(500))
        s = state([busy, Responder(2, 0, at(300))], [inc(7, 0, 0)])
        assert select_candidate_actions(s, 0, 1, 10.0) == [DispatchAction(2, 7)]

    def test_nobody_free(self):
        busy = Responder(1, 0, at(0)).moved(Status.EN_ROUTE, 0, 50, target=at(500))
        with pytest.raises(EmptyActionSet):
            select_candidate_actions(state([busy], [inc(7, 0, 0)]), 0, 1, 1.5)


class TestResponseTime:
    def test_colocated(self):
        s = state([Responder(1, 0, at(0))], [inc(7, 0, 0)])
        assert response_time(s, DispatchAction(1, 7)) == 0.0

    def test_distance_over_speed(self):
        s = state([Responder(1, 0, at(500))], [inc(7, 0, 0)])
        assert response_time(s, DispatchAction(1, 7)) == pytest.approx(50.0)

    def test_busy(self):
        busy = Responder(1, 0, at(0)).moved(Status.EN_ROUTE, 0, 50, target=at(500))
        with pytest.raises(InfeasibleAction):
            response_time(state([busy], [inc(7, 0, 0)]), DispatchAction(1, 7))

    def test_no_route(self):
        s = DispatchState(0.0, (inc(7, 0, 0),), (Responder(1, 0, at(500)),),
                          env(router=LineRouter({(at(500), at(0))})))
        with pytest.raises(InfeasibleAction):
            response_time(s, DispatchAction(1, 7))

    def test_returning_responder_uses_current_position(self):
        r = Responder(1, 0, at(0)).moved(Status.EN_ROUTE, 0, 100, target=at(1000))
        r = r.moved(Status.SERVICING, 100, 200, location=at(1000))
        r = r.moved(Status.RETURNING, 200, 300, target=at(0))
        s = state([r], [inc(7, 250, 0)], now=250)
        assert response_time(s, DispatchAction(1, 7)) == pytest.approx(50.0)


class TestUpdateState:
    def test_terminal_when_chain_exhausted(self):
        s = state([Responder(1, 0, at(500))], [inc(7, 0, 0)])
        s2 = update_state(s, DispatchAction(1, 7), chain())
        assert s2.terminal and s2.response_time == pytest.approx(50.0)

    def test_next_incident_arrives_while_busy(self):
        # one responder, dispatched at 0, arrives at 50, serves until 650;
        # the chain incident at 300 must wait for it
        s = state([Responder(1, 0, at(500)), Responder(2, 0, at(9000))], [inc(7, 0, 0)])
        nxt = inc(-1, 300, 100)
        s2 = update_state(s, DispatchAction(1, 7), chain(nxt))
        assert not s2.terminal
        assert s2.now == 300.0 and s2.pending == (nxt,) and s2.cursor == 1
        assert s2.responder(1).status is Status.SERVICING
        assert s2.responder(1).busy_until == pytest.approx(650.0)
        assert s2.elapsed == 300.0

    def test_queue_waits_for_service_end(self):
        s = state([Responder(1, 0, at(500))], [inc(7, 0, 0)])
        s2 = update_state(s, DispatchAction(1, 7), chain(inc(-1, 300, 100)))
        # nobody free at 300: the next epoch is the service end at 650
        assert s2.now == pytest.approx(650.0)
        assert s2.responder(1).status is Status.RETURNING
        assert s2.responder(1).location_at(s2.now) == at(0)
        s3 = update_state(s2, DispatchAction(1, -1), chain(inc(-1, 300, 100)))
        assert s3.response_time == pytest.approx(650.0 + 10.0 - 300.0)

    def test_none_with_free_responder(self):
        s = state([Responder(1, 0, at(500))], [inc(7, 0, 0)])
        with pytest.raises(ContractViolation):
            update_state(s, None, chain())

    def test_input_unchanged(self):
        s = state([Responder(1, 0, at(500))], [inc(7, 0, 0)])
        update_state(s, DispatchAction(1, 7), chain(inc(-1, 10, 0)))
        assert s.responder(1).status is Status.IDLE and len(s.pending) == 1


class TestTree:
    def test_base_case(self):
        s = state([Responder(1, 0, at(500))], [inc(7, 0, 0)])
        node = TreeNode(s, 42.0, 5)
        assert create_state_tree(node, chain(), 5, 1, 4, PlannerConfig()) == 42.0

    def test_empty_chain_costs_are_response_times(self):
        s = state([Responder(1, 0, at(500)), Responder(2, 0, at(800))], [inc(7, 0, 0)])
        acts = [DispatchAction(1, 7), DispatchAction(2, 7)]
        got = chain_evaluation(chain(), s, 0, acts, 1, 4, PlannerConfig())
        assert got == {acts[0]: pytest.approx(50.0), acts[1]: pytest.approx(80.0)}

    def test_single_candidate(self):
        s = state([Responder(1, 0, at(500))], [inc(7, 0, 0)])
        got = chain_evaluation(chain(inc(-1, 60, 10)), s, 0, [DispatchAction(1, 7)], 1, 4,
                               PlannerConfig())
        assert list(got) == [DispatchAction(1, 7)]

    def test_symmetric_responders_cost_the_same(self):
        s = state([Responder(1, 0, at(500)), Responder(2, 0, at(-500))], [inc(7, 0, 0)])
        acts = select_candidate_actions(s, 0, 1, 1.5)
        got = chain_evaluation(chain(inc(-1, 30, 0), inc(-2, 90, 0)), s, 0, acts, 1, 4,
                               PlannerConfig())
        assert len(acts) == 2 and got[acts[0]] == got[acts[1]]

    def test_lookahead_keeps_the_closer_unit_for_later(self):
        # responder 1 is slightly closer to the first incident, but is the only
        # one anywhere near the second, which comes right after
        s = state([Responder(1, 0, at(1000)), Responder(2, 0, at(-1100))], [inc(7, 0, 0)])
        acts = select_candidate_actions(s, 0, 1, 1.5)
        cfg = PlannerConfig(gamma=1.0, h_s=1, h=2)
        got = chain_evaluation(chain(inc(-1, 5, 3000)), s, 0, acts, 1, 2, cfg)
        assert got[DispatchAction(2, 7)] < got[DispatchAction(1, 7)]


def brute_force(root, first_actions, ch, config):
    """Explicit enumeration of dispatch sequences, minimum per first action."""
    h, h_s, eps = config.h, config.h_s, config.epsilon

    def candidates(s, depth):
        head = s.pending[0]
        opts = []
        for r in s.fleet:
            if r.is_free:
                t = s.env.router.travel_time(r.location_at(s.now), head.location, s.now)
                opts.append((t, r.id))
        opts.sort()
        best = opts[0][0]
        if depth >= h_s:
            return [DispatchAction(opts[0][1], head.id)]
        return [DispatchAction(rid, head.id) for t, rid in opts if t <= eps * best]

    out = {}
    for a in first_actions:
        s1 = update_state(root, a, ch)
        frontier = [(s1, s1.response_time, 1)]
        leaves = []
        while frontier:
            s, u, depth = frontier.pop()
            if depth > h or s.terminal:
                leaves.append(u)
                continue
            for b in candidates(s, depth):
                s2 = update_state(s, b, ch)
                t = s2.response_time
                u2 = u + config.gamma ** (t / config.discount_time_unit) * (t - u) / (depth + 2)
                frontier.append((s2, u2, depth + 1))
        out[a] = min(leaves)
    return out


def micro_instance(rng):
    n_resp = int(rng.integers(1, 4))
    fleet = []
    for i in range(n_resp):
        r = Responder(i, i, at(float(rng.uniform(-3000, 3000))))
        if i > 0 and rng.random() < 0.3:
            r = r.moved(Status.EN_ROUTE, 0, float(rng.uniform(1, 400)), target=at(rng.uniform(-3000, 3000)))
        fleet.append(r)
    n_chain = int(rng.integers(0, 3))
    times = np.sort(rng.uniform(1, 1500, n_chain))
    ch = chain(*[inc(-(k + 1), t, float(rng.uniform(-3000, 3000))) for k, t in enumerate(times)])
    s = state(fleet, [inc(100, 0, float(rng.uniform(-3000, 3000)))],
              service_mean=float(rng.uniform(100, 900)))
    cfg = PlannerConfig(b=1, epsilon=float(rng.uniform(1, 4)), h_s=int(rng.integers(0, 4)),
                        h=3, gamma=float(rng.uniform(0.5, 1.0)))
    return s, ch, cfg


class TestBruteForceOracle:
    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_tree_equals_enumeration(self, seed):
        s, ch, cfg = micro_instance(np.random.default_rng(seed))
        cands = select_candidate_actions(s, 0, cfg.h_s, cfg.epsilon)
        got = chain_evaluation(ch, s, 0, cands, cfg.h_s, cfg.h, cfg)
        assert got == brute_force(s, cands, ch, cfg)

    def test_two_incidents_two_responders(self):
        s = state([Responder(1, 0, at(1000)), Responder(2, 0, at(-1100))], [inc(7, 0, 0)])
        cfg = PlannerConfig(epsilon=2.0, h_s=2, h=3, gamma=0.95)
        ch = chain(inc(-1, 5, 3000))
        cands = select_candidate_actions(s, 0, cfg.h_s, cfg.epsilon)
        assert len(cands) == 2
        assert chain_evaluation(ch, s, 0, cands, cfg.h_s, cfg.h, cfg) == brute_force(s, cands, ch, cfg)


class TestDecision:
    def test_one_free_responder_is_forced(self):
        busy = Responder(1, 0, at(0)).moved(Status.EN_ROUTE, 0, 50, target=at(500))
        s = state([busy, Responder(2, 0, at(5000))], [inc(7, 0, 0)])
        theta = FixedChains([chain(inc(-1, 10, 4000))])
        assert dispatch_decision(s, PlannerConfig(b=1), theta, 0) == DispatchAction(2, 7)

    def test_enqueue_when_nobody_free(self):
        busy = Responder(1, 0, at(0)).moved(Status.EN_ROUTE, 0, 50, target=at(500))
        s = state([busy], [inc(7, 0, 0)])
        assert dispatch_decision(s, PlannerConfig(), FixedChains([]), 0) is Enqueue

    def test_tie_goes_to_lowest_id(self):
        s = state([Responder(4, 0, at(500)), Responder(2, 0, at(-500))], [inc(7, 0, 0)])
        theta = FixedChains([chain()])
        assert dispatch_decision(s, PlannerConfig(b=1), theta, 0) == DispatchAction(2, 7)

    def test_lookahead_changes_the_decision(self):
        s = state([Responder(1, 0, at(1000)), Responder(2, 0, at(-1100))], [inc(7, 0, 0)])
        theta = FixedChains([chain(inc(-1, 5, 3000))])
        cfg = PlannerConfig(b=1, gamma=1.0)
        assert dispatch_decision(s, cfg, theta, 0) == DispatchAction(2, 7)
        greedy = PlannerConfig(b=1, epsilon=1.0, h_s=0)
        assert dispatch_decision(s, greedy, theta, 0) == DispatchAction(1, 7)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_greedy_degeneracy(self, seed):
        rng = np.random.default_rng(seed)
        s, ch, _ = micro_instance(rng)
        cfg = PlannerConfig(b=3, epsilon=float(rng.uniform(1, 5)), h_s=0)
        got = dispatch_decision(s, cfg, FixedChains([ch] * 3), seed)
        best = min((LineRouter().travel_time(r.location_at(0), s.pending[0].location, 0), r.id)
                   for r in s.fleet if r.is_free)
        assert got == DispatchAction(best[1], 100)

    def test_trace_and_parallel_agree(self):
        s = state([Responder(1, 0, at(1000)), Responder(2, 0, at(-1100)),
                   Responder(3, 0, at(1200))], [inc(7, 0, 0)])
        chains = [chain(inc(-1, 5, 3000)), chain(inc(-1, 40, -2500), inc(-2, 90, 200))]
        serial, parallel = [], []
        a = Planner(PlannerConfig(b=2), FixedChains(chains), serial).decide(s, 1)
        b = Planner(PlannerConfig(b=2, n_jobs=2), FixedChains(chains), parallel).decide(s, 1)
        assert a == b
        assert serial[0]["chain_costs"] == parallel[0]["chain_costs"]
        assert serial[0]["chosen"] == a.responder_id
        assert set(serial[0]) >= {"incident", "candidates", "chain_costs", "totals", "wall_us"}


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(b=0), dict(epsilon=0.5), dict(h_s=3, h=2),
                                    dict(gamma=0.0), dict(gamma=1.5), dict(h_s=-1)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            PlannerConfig(**kw)
