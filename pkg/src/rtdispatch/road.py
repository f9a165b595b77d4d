"""Road graph, landmark tables, A* with landmarks, and the grid travel-time cache."""
import heapq
import json
import math
import threading
from dataclasses import dataclass

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra as _cs_dijkstra
from scipy.spatial import cKDTree

from .errors import FormatError, IntegrityError, NoRoute, UnknownSegment
from .timeutil import bin_start, weekly_bin

MPH_TO_MPS = 1609.344 / 3600.0
CACHE_BIN_MINUTES = 30
# keeps floating-point rounding from making potentials overestimate
_POTENTIAL_SHRINK = 1.0 - 1e-9


class RoadGraph:
    """Directed road network with nodes indexed ``0..n-1`` internally."""

    def __init__(self, nodes, edges):
        if len(nodes) == 0:
            raise FormatError("graph has no nodes")
        self.node_ids = np.array([int(n[0]) for n in nodes], dtype=np.int64)
        if len(set(self.node_ids.tolist())) != len(self.node_ids):
            raise IntegrityError("duplicate node ids")
        self.coords = np.array([[float(n[1]), float(n[2])] for n in nodes])
        self.index = {int(n): i for i, n in enumerate(self.node_ids)}
        src, dst, length, lanes, freeflow, seg = [], [], [], [], [], []
        for e in edges:
            a, b = int(e[0]), int(e[1])
            if a not in self.index or b not in self.index:
                raise IntegrityError(f"edge ({a}, {b}) references a missing node")
            if float(e[2]) <= 0 or float(e[4]) <= 0:
                raise IntegrityError(f"edge ({a}, {b}) needs positive length and freeflow")
            src.append(self.index[a])
            dst.append(self.index[b])
            length.append(float(e[2]))
            lanes.append(int(e[3]))
            freeflow.append(float(e[4]))
            seg.append(int(e[5]))
        self.src = np.array(src, dtype=np.int64)
        self.dst = np.array(dst, dtype=np.int64)
        self.length = np.array(length, dtype=float)
        self.lanes = np.array(lanes, dtype=np.int64)
        self.freeflow = np.array(freeflow, dtype=float)
        self.segment = np.array(seg, dtype=np.int64)
        self.out = [[] for _ in range(self.n_nodes)]
        self.inc = [[] for _ in range(self.n_nodes)]
        for k, (a, b) in enumerate(zip(src, dst)):
            self.out[a].append((b, k))
            self.inc[b].append((a, k))
        self._kdtree = None
        self._proj = None

    @property
    def n_nodes(self):
        return len(self.node_ids)

    @property
    def n_edges(self):
        return len(self.src)

    def freeflow_times(self):
        return self.length / (self.freeflow * MPH_TO_MPS)

    def segment_freeflow(self):
        out = {}
        for s, f in zip(self.segment.tolist(), self.freeflow.tolist()):
            out.setdefault(s, f)
        return out

    def edge_times(self, speeds, t):
        """Edge traversal seconds with speeds frozen at time ``t``."""
        if speeds is None:
            return self.freeflow_times()
        rows = _segment_rows(self, speeds)
        mph = speeds.speeds[rows, speeds.bin_of(t)]
        return self.length / (mph * MPH_TO_MPS)

    def nearest_node(self, point):
        """Internal index of the node nearest to ``(lat, lon)``."""
        if self._kdtree is None:
            lat0 = float(np.mean(self.coords[:, 0]))
            self._proj = math.cos(math.radians(lat0))
            xy = np.column_stack([self.coords[:, 1] * self._proj, self.coords[:, 0]])
            self._kdtree = cKDTree(xy)
        _, i = self._kdtree.query([point[1] * self._proj, point[0]])
        return int(i)

    def matrix(self, weights):
        n = self.n_nodes
        # parallel edges: keep the cheapest
        order = np.lexsort((weights, self.dst, self.src))
        s, d, w = self.src[order], self.dst[order], weights[order]
        keep = np.ones(len(s), dtype=bool)
        keep[1:] = (s[1:] != s[:-1]) | (d[1:] != d[:-1])
        return csr_matrix((w[keep], (s[keep], d[keep])), shape=(n, n))

    def to_dict(self):
        return {
            "nodes": [[int(i), float(a), float(b)] for i, (a, b) in zip(self.node_ids, self.coords)],
            "edges": [[int(self.node_ids[a]), int(self.node_ids[b]), float(l), int(n), float(f), int(s)]
                      for a, b, l, n, f, s in zip(self.src, self.dst, self.length,
                                                   self.lanes, self.freeflow, self.segment)],
        }


def _segment_rows(graph, speeds):
    cache = getattr(graph, "_rows_cache", None)
    if cache is not None and cache[0] is speeds:
        return cache[1]
    rows = speeds.rows_for(graph.segment)
    graph._rows_cache = (speeds, rows)
    return rows


def load_graph(path):
    """Read a graph file: JSON with ``nodes`` ``[id, lat, lon]`` and
    ``edges`` ``[from, to, length_m, lanes, freeflow_mph, segment_id]``."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if not isinstance(doc, dict) or "nodes" not in doc or "edges" not in doc:
        raise FormatError(f"{path}: expected 'nodes' and 'edges' sections")
    nodes, edges = doc["nodes"], doc["edges"]
    if not nodes:
        raise FormatError(f"{path}: empty node section")
    try:
        for n in nodes:
            if len(n) != 3:
                raise ValueError(f"bad node row {n}")
        for e in edges:
            if len(e) != 6:
                raise ValueError(f"bad edge row {e}")
        return RoadGraph(nodes, edges)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, (IntegrityError, FormatError)):
            raise
        raise FormatError(f"{path}: {exc}") from exc


def save_graph(graph, path):
    with open(path, "w") as fh:
        json.dump(graph.to_dict(), fh)


@dataclass
class LandmarkTable:
    landmarks: np.ndarray   # internal node indices
    forward: np.ndarray     # (k, n): freeflow seconds landmark -> node
    backward: np.ndarray    # (k, n): freeflow seconds node -> landmark

    def save(self, path, graph):
        np.savez(path, landmark_ids=graph.node_ids[self.landmarks],
                 forward=self.forward, backward=self.backward)

    @classmethod
    def load(cls, path, graph):
        with np.load(path) as z:
            try:
                idx = np.array([graph.index[int(i)] for i in z["landmark_ids"]], dtype=np.int64)
            except KeyError as exc:
                raise IntegrityError(f"landmark {exc.args[0]} not in graph") from None
            fwd, bwd = z["forward"], z["backward"]
        if fwd.shape != (len(idx), graph.n_nodes) or bwd.shape != fwd.shape:
            raise IntegrityError("landmark table does not match graph")
        return cls(idx, fwd, bwd)


def select_landmarks(graph, k=16, seed=None, start=None):
    """Farthest-point landmarks under freeflow time.

    The first landmark is ``start`` (internal index) or a seeded random
    node; each next one maximizes its distance to the chosen set.
    """
    n = graph.n_nodes
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}]")
    mat = graph.matrix(graph.freeflow_times())
    first = int(np.random.default_rng(seed).integers(n)) if start is None else int(start)
    chosen = [first]
    fwd = [_cs_dijkstra(mat, indices=first)]
    bwd = [_cs_dijkstra(mat.T.tocsr(), indices=first)]
    mind = np.minimum(_finite(fwd[0]), _finite(bwd[0]))
    mind[first] = -1.0
    while len(chosen) < k:
        nxt = int(np.argmax(mind))
        if mind[nxt] < 0:
            break
        chosen.append(nxt)
        fwd.append(_cs_dijkstra(mat, indices=nxt))
        bwd.append(_cs_dijkstra(mat.T.tocsr(), indices=nxt))
        mind = np.minimum(mind, np.minimum(_finite(fwd[-1]), _finite(bwd[-1])))
        mind[chosen] = -1.0
    return LandmarkTable(np.array(chosen, dtype=np.int64), np.array(fwd), np.array(bwd))


def _finite(d):
    # unreachable nodes rank as maximally far
    return np.where(np.isfinite(d), d, np.finfo(float).max / 4)


def landmark_potential(landmarks, dst, scale=1.0):
    """Lower bound on remaining freeflow time to ``dst`` for every node."""
    fwd, bwd = landmarks.forward, landmarks.backward
    with np.errstate(invalid="ignore"):
        a = fwd[:, dst][:, None] - fwd
        b = bwd - bwd[:, dst][:, None]
    a = np.where(np.isnan(a), -np.inf, a)
    b = np.where(np.isnan(b), -np.inf, b)
    pi = np.max(np.maximum(a, b), axis=0)
    return np.maximum(pi, 0.0) * (scale * _POTENTIAL_SHRINK)


def _search(graph, weights, src, dst, potential):
    n = graph.n_nodes
    g = [math.inf] * n
    parent = [-1] * n
    g[src] = 0.0
    heap = [(potential[src], 0.0, src)]
    settled = 0
    out = graph.out
    while heap:
        f, gu, u = heapq.heappop(heap)
        if gu > g[u]:
            continue
        settled += 1
        if u == dst:
            break
        for v, k in out[u]:
            nd = gu + weights[k]
            if nd < g[v]:
                g[v] = nd
                parent[v] = u
                pv = potential[v]
                if pv != math.inf:
                    heapq.heappush(heap, (nd + pv, nd, v))
    if g[dst] == math.inf:
        raise NoRoute(f"no route from {graph.node_ids[src]} to {graph.node_ids[dst]}")
    path = [dst]
    while path[-1] != src:
        path.append(parent[path[-1]])
    path.reverse()
    return path, g[dst], settled


def dijkstra(graph, weights, src, dst):
    """Plain early-exit Dijkstra on internal indices: ``(path, cost, settled)``."""
    return _search(graph, list(weights), src, dst, [0.0] * graph.n_nodes)


def alt_shortest_path(graph, landmarks, speeds, src, dst, depart_time, scale=None,
                      weights=None, return_settled=False):
    """Fastest route between internal node indices with frozen departure-time speeds.

    Returns ``(path, seconds)`` with ``path`` in external node ids.
    """
    if src == dst:
        out = ([int(graph.node_ids[src])], 0.0)
        return out + (1,) if return_settled else out
    if weights is None:
        weights = graph.edge_times(speeds, depart_time)
    if scale is None:
        scale = 1.0 if speeds is None else min(1.0, speeds.max_slowdown())
    pot = landmark_potential(landmarks, dst, scale).tolist()
    path, cost, settled = _search(graph, weights.tolist(), src, dst, pot)
    ids = [int(graph.node_ids[i]) for i in path]
    return (ids, cost, settled) if return_settled else (ids, cost)


class TravelTimeCache:
    """``(src_cell, dst_cell, weekly 30-min bin) -> seconds``.

    Reads are lock-free; writes go through one lock. A racing reader that
    misses simply recomputes the same deterministic value.
    """

    def __init__(self):
        self._data = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def __len__(self):
        return len(self._data)

    def __contains__(self, key):
        return key in self._data

    def get(self, key):
        return self._data.get(key)

    def put(self, key, value):
        with self._lock:
            self._data.setdefault(key, value)

    def items(self):
        return list(self._data.items())

    def save(self, path):
        with open(path, "w") as fh:
            fh.write("src_grid,dst_grid,bin,seconds\n")
            for (a, b, k), v in sorted(self._data.items()):
                fh.write(f"{a},{b},{k},{v!r}\n")

    @classmethod
    def load(cls, path):
        cache = cls()
        with open(path) as fh:
            header = fh.readline().strip()
            if header != "src_grid,dst_grid,bin,seconds":
                raise FormatError(f"{path}: unexpected header {header!r}")
            for lineno, line in enumerate(fh, start=2):
                try:
                    a, b, k, v = line.strip().split(",")
                    cache._data[(int(a), int(b), int(k))] = float(v)
                except ValueError as exc:
                    raise FormatError(f"{path}:{lineno}: {exc}") from exc
        return cache


class Router:
    """Bundles graph, landmarks, speed profiles, grid and cache."""

    def __init__(self, graph, speeds=None, grid=None, landmarks=None, cache=None,
                 n_landmarks=16, seed=0):
        self.graph = graph
        self.speeds = speeds
        self.grid = grid
        if landmarks is None:
            landmarks = select_landmarks(graph, min(n_landmarks, graph.n_nodes), seed)
        self.landmarks = landmarks
        self.cache = cache if cache is not None else TravelTimeCache()
        self.scale = 1.0 if speeds is None else min(1.0, speeds.max_slowdown())
        self._weights = {}
        self._cell_nodes = None
        if speeds is not None:
            missing = set(graph.segment.tolist()) - set(speeds.index)
            if missing:
                raise UnknownSegment(min(missing))

    def weights(self, t):
        key = weekly_bin(t, self.speeds.bin_width) if self.speeds is not None else 0
        w = self._weights.get(key)
        if w is None:
            w = self.graph.edge_times(self.speeds, t)
            self._weights[key] = w
        return w

    def route_nodes(self, src, dst, t):
        """Route between internal node indices departing at ``t``."""
        if src == dst:
            return [int(self.graph.node_ids[src])], 0.0
        return alt_shortest_path(self.graph, self.landmarks, self.speeds, src, dst, t,
                                 scale=self.scale, weights=self.weights(t))

    def route_points(self, src, dst, t):
        return self.route_nodes(self.graph.nearest_node(src), self.graph.nearest_node(dst), t)

    def cell_node(self, cell_id):
        if self._cell_nodes is None:
            self._cell_nodes = [self.graph.nearest_node(c.centroid) for c in self.grid]
        return self._cell_nodes[cell_id]

    def cell_travel_time(self, a, b, t):
        if a == b:
            return 0.0
        key = (a, b, weekly_bin(t, CACHE_BIN_MINUTES))
        v = self.cache.get(key)
        if v is not None:
            self.cache.hits += 1
            return v
        self.cache.misses += 1
        _, v = self.route_nodes(self.cell_node(a), self.cell_node(b), bin_start(t, CACHE_BIN_MINUTES))
        self.cache.put(key, v)
        return v

    def travel_time(self, src, dst, t):
        """Seconds between two (lat, lon) points via their grid-cell centroids."""
        return self.cell_travel_time(self.grid.cell_of(src), self.grid.cell_of(dst), t)

    def warm(self, cells=None, bins=None):
        """Fill the cache for all cell pairs in the given weekly bins."""
        cells = range(len(self.grid)) if cells is None else cells
        bins = range(7 * 24 * 60 // CACHE_BIN_MINUTES) if bins is None else bins
        anchor = 4 * 86400.0
        for k in bins:
            t = anchor + k * CACHE_BIN_MINUTES * 60.0
            for a in cells:
                for b in cells:
                    try:
                        self.cell_travel_time(a, b, t)
                    except NoRoute:
                        pass


def travel_time(cache, graph, speeds, src, dst, time, grid=None, landmarks=None, router=None):
    """Functional form of :meth:`Router.travel_time`."""
    if router is None:
        router = Router(graph, speeds, grid, landmarks=landmarks, cache=cache)
    return router.travel_time(src, dst, time)
