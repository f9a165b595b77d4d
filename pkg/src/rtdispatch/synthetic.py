"""Synthetic cities and incident streams standing in for private city data."""
import json
import math
import os

import numpy as np
from scipy.spatial import Delaunay

from .core import EARTH_RADIUS_M, BBox, Depot, Incident, Responder, build_grid, write_fleet
from .incidents import ChainEnvironment, generate_chain
from .road import RoadGraph, save_graph
from .scenario import DEFAULTS, _merge, write_config, write_incidents
from .speed import SpeedProfiles, save_profiles
from .survival import DEFAULT_SCHEMA, SurvivalDataset, SurvivalModel, save_model
from .timeutil import MINUTES_PER_WEEK, parse_timestamp, seconds_into_week

LANE_FREEFLOW_MPH = {1: 25.0, 2: 35.0, 3: 45.0}

# labels for independent sub-streams of the city seed
_GRAPH, _SPEEDS, _INCIDENTS, _JITTER, _DEPOTS = range(5)


def ground_truth_beta(n_cells, base_rate):
    """Plausible coefficients giving about ``base_rate`` incidents/hour citywide."""
    b = dict.fromkeys(DEFAULT_SCHEMA.names, 0.0)
    for i, v in enumerate((0.35, 0.45, 0.0, -0.25, -0.3, 0.05)):
        b[f"tod_{i}"] = v
    b["weekend"] = 0.1
    b["season_winter"], b["season_summer"] = 0.1, -0.1
    # short-window excitation, long-window damping: keeps the process stationary
    b["count_2d"], b["count_7d"], b["count_30d"] = -0.02, 0.0, 0.002
    b["nbr_count_2d"], b["nbr_count_7d"], b["nbr_count_30d"] = -0.001, 0.0, 0.0002
    b["intercept"] = math.log(n_cells / base_rate)
    beta = np.array([b[n] for n in DEFAULT_SCHEMA.names])
    return DEFAULT_SCHEMA.canonical(beta)


def city_bbox(center, ncols, nrows, cell_size):
    lat, lon = center
    dlat = nrows * cell_size / (EARTH_RADIUS_M * math.pi / 180.0)
    dlon = ncols * cell_size / (EARTH_RADIUS_M * math.pi / 180.0 * math.cos(math.radians(lat)))
    return BBox(lat - dlat / 2, lon - dlon / 2, lat + dlat / 2, lon + dlon / 2)


def random_road_graph(bbox, n_nodes, rng, grid=None):
    """Delaunay road network, two-way streets; segments group edges by cell and lanes."""
    lat = rng.uniform(bbox.lat_min, bbox.lat_max, n_nodes)
    lon = rng.uniform(bbox.lon_min, bbox.lon_max, n_nodes)
    kx = math.cos(math.radians(0.5 * (bbox.lat_min + bbox.lat_max)))
    tri = Delaunay(np.column_stack([lon * kx, lat]))
    pairs = set()
    for simplex in tri.simplices:
        for i in range(3):
            a, b = int(simplex[i]), int(simplex[(i + 1) % 3])
            pairs.add((min(a, b), max(a, b)))
    nodes = [[i, float(lat[i]), float(lon[i])] for i in range(n_nodes)]
    edges = []
    seg_ids = {}
    for a, b in sorted(pairs):
        dy = (lat[b] - lat[a]) * EARTH_RADIUS_M * math.pi / 180
        dx = (lon[b] - lon[a]) * kx * EARTH_RADIUS_M * math.pi / 180
        length = math.hypot(dx, dy) * rng.uniform(1.0, 1.25) + 1.0
        lanes = int(rng.choice([1, 2, 3], p=[0.5, 0.35, 0.15]))
        mid = (0.5 * (lat[a] + lat[b]), 0.5 * (lon[a] + lon[b]))
        cell = grid.cell_of(mid) if grid is not None else 0
        for u, v, direction in ((a, b, 0), (b, a, 1)):
            seg = seg_ids.setdefault((cell, lanes, direction), len(seg_ids))
            edges.append([u, v, length, lanes, LANE_FREEFLOW_MPH[lanes], seg])
    return RoadGraph(nodes, edges)


def congestion_profiles(graph, rng, bin_width=30, max_slowdown=0.45):
    """Weekday rush-hour dips below freeflow, lighter on weekends."""
    ff = graph.segment_freeflow()
    ids = sorted(ff)
    n_bins = MINUTES_PER_WEEK // bin_width
    mids = (np.arange(n_bins) + 0.5) * bin_width * 60.0
    day = (mids // 86400).astype(int)
    hour = (mids % 86400) / 3600.0
    shape = np.exp(-((hour - 8.0) / 1.2) ** 2) + np.exp(-((hour - 17.5) / 1.5) ** 2)
    shape = np.where(day >= 5, 0.3 * shape, shape)
    amp = rng.uniform(0.0, max_slowdown, len(ids))
    freeflow = np.array([ff[s] for s in ids])
    speeds = freeflow[:, None] * (1.0 - amp[:, None] * np.clip(shape, 0, 1)[None, :])
    return SpeedProfiles(ids, speeds, bin_width, freeflow)


def _jitter(grid, cell_id, rng):
    row, col = divmod(cell_id, grid.ncols)
    x0, x1 = col * grid.cell_size, min((col + 1) * grid.cell_size, grid.width)
    y0, y1 = row * grid.cell_size, min((row + 1) * grid.cell_size, grid.height)
    # stay strictly inside so the point maps back to the same cell
    pad = 1e-6 * grid.cell_size
    return grid.projection.inverse(rng.uniform(x0 + pad, x1 - pad), rng.uniform(y0 + pad, y1 - pad))


def sample_incidents(model, grid, start, n, seed, horizon_days=3650):
    chain = generate_chain(model, ChainEnvironment(grid), start, horizon_days * 86400.0,
                           np.random.default_rng([seed, _INCIDENTS]), max_events=n)
    rng = np.random.default_rng([seed, _JITTER])
    return [Incident(k, inc.grid_id, inc.occurred_at, _jitter(grid, inc.grid_id, rng))
            for k, inc in enumerate(chain)]


def generate_synthetic_city(out_dir, seed=0, n_nodes=400, n_cells=16, n_depots=4,
                            n_incidents=2000, base_rate=2.0, cell_size=1609.344,
                            center=(36.16, -86.78), start="2017-01-01T00:00:00",
                            n_responders=None, service_mean=1200.0, planner=None,
                            simulation=None):
    """Write a complete scenario into ``out_dir`` and return the config path.

    Files: graph.json, speeds.csv, responders.csv, incidents.csv,
    model.json (generating coefficients), scenario.yaml, manifest.json.
    """
    if min(n_nodes, n_cells, n_depots, n_incidents) <= 0 or base_rate <= 0 or cell_size <= 0:
        raise ValueError("parameters must be positive")
    if n_nodes < 3:
        raise ValueError("need at least 3 road nodes")
    os.makedirs(out_dir, exist_ok=True)
    ncols = math.ceil(math.sqrt(n_cells))
    nrows = math.ceil(n_cells / ncols)
    bbox = city_bbox(center, ncols, nrows, cell_size)
    grid = build_grid(bbox, cell_size)

    graph = random_road_graph(bbox, n_nodes, np.random.default_rng([seed, _GRAPH]), grid)
    speeds = congestion_profiles(graph, np.random.default_rng([seed, _SPEEDS]))
    model = SurvivalModel(ground_truth_beta(len(grid), base_rate), DEFAULT_SCHEMA)
    t0 = parse_timestamp(start)
    incidents = sample_incidents(model, grid, t0, n_incidents, seed)

    counts = np.bincount([i.grid_id for i in incidents], minlength=len(grid)).astype(float)
    k = min(n_depots, len(grid))
    rng = np.random.default_rng([seed, _DEPOTS])
    cells = rng.choice(len(grid), size=k, replace=False, p=(counts + 1) / (counts + 1).sum())
    cells = sorted(cells.tolist(), key=lambda c: (-counts[c], c))
    node_cells = np.array([grid.cell_of(tuple(p)) for p in graph.coords])
    depots = []
    for j, c in enumerate(cells):
        inside = np.flatnonzero(node_cells == c)
        loc = tuple(graph.coords[int(rng.choice(inside))]) if len(inside) else grid[c].centroid
        depots.append(Depot(j, c, (float(loc[0]), float(loc[1]))))
    n_resp = n_responders or len(depots)
    responders = [Responder(i, depots[i % len(depots)].id, depots[i % len(depots)].location)
                  for i in range(n_resp)]

    save_graph(graph, os.path.join(out_dir, "graph.json"))
    save_profiles(speeds, os.path.join(out_dir, "speeds.csv"))
    write_fleet(os.path.join(out_dir, "responders.csv"), depots, responders)
    write_incidents(os.path.join(out_dir, "incidents.csv"), incidents)
    save_model(model, os.path.join(out_dir, "model.json"))

    cfg = _merge(DEFAULTS, {
        "grid": {"bbox": [bbox.lat_min, bbox.lon_min, bbox.lat_max, bbox.lon_max],
                 "cell_size_m": cell_size},
        "files": {"graph": "graph.json", "speeds": "speeds.csv", "responders": "responders.csv",
                  "incidents": "incidents.csv", "model": "model.json", "landmarks": None},
        "planner": planner or {},
        "simulation": _merge({"seed": seed, "service_mean_s": service_mean}, simulation or {}),
    })
    cfg_path = os.path.join(out_dir, "scenario.yaml")
    write_config(cfg_path, cfg)
    manifest = {
        "generator": "rtdispatch.synthetic.generate_synthetic_city",
        "params": {"seed": seed, "n_nodes": n_nodes, "n_cells": n_cells, "n_depots": n_depots,
                   "n_incidents": n_incidents, "base_rate": base_rate, "cell_size": cell_size,
                   "center": list(center), "start": start, "n_responders": n_resp,
                   "service_mean": service_mean},
        "grid_cells": len(grid),
        "graph": {"nodes": graph.n_nodes, "edges": graph.n_edges},
        "files": ["graph.json", "speeds.csv", "responders.csv", "incidents.csv",
                  "model.json", "scenario.yaml"],
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return cfg_path


def drift_streams(seed=0, n_weeks=20, shift_week=10, per_week=150, n_train=3000,
                  beta_before=(1.0, 0.4, -0.3), beta_after=(0.1, 0.9, -0.3)):
    """Weekly survival datasets whose generating coefficients change at ``shift_week``.

    Covariates are an intercept, a binary indicator and a standard normal.
    Returns ``(training_set, [week_0, ..., week_{n-1}])``; training data
    comes from the pre-shift regime.
    """
    rng = np.random.default_rng(seed)

    def draw(beta, n):
        W = np.column_stack([np.ones(n), rng.integers(0, 2, n), rng.standard_normal(n)])
        tau = np.exp(W @ np.asarray(beta)) * rng.exponential(1.0, n)
        return SurvivalDataset(np.maximum(tau, 1e-300), W)

    train = draw(beta_before, n_train)
    weeks = [draw(beta_before if w < shift_week else beta_after, per_week) for w in range(n_weeks)]
    return train, weeks
