"""Sampling chains of future incidents from the survival model.

Every grid cell runs its own exponential clock; the earliest clock fires,
its cell records an incident and redraws with refreshed covariates.
"""
import heapq
import math
from dataclasses import dataclass, field

import numpy as np

from .core import Incident
from .survival import build_features, sample_interarrival
from .timeutil import SECONDS_PER_HOUR


class _OverlayHistory:
    """Read-through view of a base history plus incidents sampled in-chain."""

    def __init__(self, base):
        self.base = base
        self.local = {}

    def add(self, cell, t):
        self.local.setdefault(cell, []).append(t)

    def count(self, cell, start, end):
        n = self.base.count(cell, start, end) if self.base is not None else 0
        for t in self.local.get(cell, ()):
            if start < t <= end:
                n += 1
        return n


@dataclass(frozen=True)
class IncidentChain:
    incidents: tuple = ()
    start: float = 0.0
    horizon_time: float = 0.0

    def __len__(self):
        return len(self.incidents)

    def __iter__(self):
        return iter(self.incidents)

    def __getitem__(self, i):
        return self.incidents[i]

    def times(self):
        return np.array([inc.occurred_at for inc in self.incidents])


def _as_rng(rng):
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def generate_chain(model, env, start, horizon_time, rng=None, max_events=None,
                   time_unit=SECONDS_PER_HOUR):
    """Sample incidents in ``(start, start + horizon_time]``.

    ``env`` must expose ``grid``, ``history`` (an IncidentHistory or None)
    and ``weather``; ``time_unit`` converts model time to seconds.
    """
    if horizon_time < 0:
        raise ValueError("horizon_time must be non-negative")
    rng = _as_rng(rng)
    end = start + horizon_time
    if horizon_time == 0 or max_events == 0:
        return IncidentChain((), start, horizon_time)
    grid = env.grid
    weather = getattr(env, "weather", None)
    history = _OverlayHistory(getattr(env, "history", None))

    clocks = []
    for cell in grid:
        w = build_features(history, cell, start, weather)
        tau = sample_interarrival(model, w, rng) * time_unit
        clocks.append((start + tau, cell.id))
    heapq.heapify(clocks)

    out = []
    last = start
    while clocks:
        t, cid = heapq.heappop(clocks)
        if t > end:
            break
        if t <= last:
            t = math.nextafter(last, math.inf)
        last = t
        cell = grid[cid]
        history.add(cid, t)
        w = build_features(history, cell, t, weather)
        out.append(Incident(-(len(out) + 1), cid, t, cell.centroid, w.values, weather))
        if max_events is not None and len(out) >= max_events:
            break
        heapq.heappush(clocks, (t + sample_interarrival(model, w, rng) * time_unit, cid))
    return IncidentChain(tuple(out), start, horizon_time)


def generate_chains(b, model, env, start, horizon_time, seed=None, max_events=None,
                    time_unit=SECONDS_PER_HOUR):
    """``b`` independent chains, chain ``i`` seeded by the ``i``-th child of ``seed``."""
    if b < 1:
        raise ValueError("b must be at least 1")
    children = np.random.SeedSequence(seed).spawn(b)
    return [generate_chain(model, env, start, horizon_time, np.random.default_rng(c),
                           max_events, time_unit) for c in children]


@dataclass
class ChainEnvironment:
    """Minimal environment for standalone chain generation."""
    grid: object
    history: object = None
    weather: tuple = None
    clock: float = 0.0
    extra: dict = field(default_factory=dict)
