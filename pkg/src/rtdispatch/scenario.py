"""Scenario config files and incident CSV input/output."""
import copy
import csv
import os

import yaml

from .core import BBox, Incident, build_grid, load_fleet
from .errors import ConfigError, FormatError, OutOfRegion
from .planner import PlannerConfig
from .road import LandmarkTable, Router, load_graph
from .speed import freeflow_profiles, load_profiles
from .survival import load_model
from .timeutil import format_timestamp, parse_timestamp

DEFAULTS = {
    "grid": {"bbox": None, "cell_size_m": 1609.344},
    "files": {"graph": None, "speeds": None, "responders": None, "incidents": None,
              "model": None, "landmarks": None},
    "planner": {"b": 10, "epsilon": 1.5, "h_s": 1, "h": 4, "gamma": 0.9,
                "discount_time_unit_s": 60.0, "chain_horizon_s": 21600.0,
                "dispatch_offset_s": 0.0, "n_jobs": 1},
    "simulation": {"seed": 0, "service_mean_s": 1200.0, "base_metric": "euclidean",
                   "responders": None, "max_incidents": None, "n_landmarks": 16},
    "reports": {"out_dir": "reports"},
}

REQUIRED_FILES = ("graph", "responders", "incidents", "model")


def read_incidents(path, grid=None, skip_outside=False):
    """Incidents from ``id,timestamp,lat,lon[,temp_c,rain_mm]``.

    Raises FormatError naming the offending line.
    """
    out = []
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise FormatError(str(exc)) from exc
    with fh:
        reader = csv.DictReader(fh)
        need = {"id", "timestamp", "lat", "lon"}
        if reader.fieldnames is None or need - set(reader.fieldnames):
            raise FormatError(f"{path}: header must contain {sorted(need)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                iid = int(row["id"])
                t = parse_timestamp(row["timestamp"])
                loc = (float(row["lat"]), float(row["lon"]))
                temp, rain = row.get("temp_c") or "", row.get("rain_mm") or ""
                weather = (float(temp), float(rain)) if temp.strip() and rain.strip() else None
            except (TypeError, ValueError) as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
            gid = -1
            if grid is not None:
                try:
                    gid = grid.cell_of(loc)
                except OutOfRegion:
                    if skip_outside:
                        continue
                    raise FormatError(f"{path}:{lineno}: location {loc} outside the grid") from None
            out.append(Incident(iid, gid, t, loc, weather=weather))
    out.sort(key=lambda i: (i.occurred_at, i.id))
    return out


def write_incidents(path, incidents):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "timestamp", "lat", "lon", "temp_c", "rain_mm"])
        for inc in incidents:
            temp, rain = inc.weather if inc.weather is not None else ("", "")
            w.writerow([inc.id, format_timestamp(inc.occurred_at), repr(inc.location[0]),
                        repr(inc.location[1]), temp, rain])


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def read_config(path, overrides=None):
    """Load a YAML scenario config merged over defaults; file paths become absolute."""
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    unknown = set(raw) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"{path}: unknown sections {sorted(unknown)}")
    cfg = _merge(DEFAULTS, raw)
    cfg = _merge(cfg, overrides)
    base = os.path.dirname(os.path.abspath(path))
    for key, val in cfg["files"].items():
        if val:
            cfg["files"][key] = os.path.normpath(os.path.join(base, val))
    if cfg["reports"]["out_dir"]:
        cfg["reports"]["out_dir"] = os.path.normpath(os.path.join(base, cfg["reports"]["out_dir"]))
    validate_config(cfg)
    return cfg


def validate_config(cfg):
    """Type-check parameters and make sure referenced files exist."""
    for key in REQUIRED_FILES:
        p = cfg["files"].get(key)
        if not p:
            raise ConfigError(f"files.{key} is required")
        if not os.path.exists(p):
            raise ConfigError(f"files.{key}: {p} does not exist")
    for key in ("speeds", "landmarks"):
        p = cfg["files"].get(key)
        if p and not os.path.exists(p):
            raise ConfigError(f"files.{key}: {p} does not exist")
    bbox = cfg["grid"]["bbox"]
    if not (isinstance(bbox, (list, tuple)) and len(bbox) == 4):
        raise ConfigError("grid.bbox must be [lat_min, lon_min, lat_max, lon_max]")
    try:
        planner_config(cfg)
        float(cfg["simulation"]["service_mean_s"])
        int(cfg["simulation"]["seed"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad parameter: {exc}") from exc
    if cfg["simulation"]["base_metric"] not in ("euclidean", "travel_time"):
        raise ConfigError("simulation.base_metric must be euclidean or travel_time")


def planner_config(cfg):
    p = cfg["planner"]
    return PlannerConfig(
        b=int(p["b"]), epsilon=float(p["epsilon"]), h_s=int(p["h_s"]), h=int(p["h"]),
        gamma=float(p["gamma"]), discount_time_unit=float(p["discount_time_unit_s"]),
        chain_horizon=float(p["chain_horizon_s"]), dispatch_offset=float(p["dispatch_offset_s"]),
        n_jobs=int(p["n_jobs"]),
    )


def build_router(cfg, grid=None, graph=None):
    graph = graph or load_graph(cfg["files"]["graph"])
    speeds = (load_profiles(cfg["files"]["speeds"], graph) if cfg["files"].get("speeds")
              else freeflow_profiles(graph))
    landmarks = (LandmarkTable.load(cfg["files"]["landmarks"], graph)
                 if cfg["files"].get("landmarks") else None)
    seed = int(cfg["simulation"]["seed"])
    return Router(graph, speeds, grid, landmarks=landmarks,
                  n_landmarks=int(cfg["simulation"]["n_landmarks"]), seed=seed)


def build_scenario(cfg):
    from .simulator import Scenario

    grid = build_grid(BBox(*cfg["grid"]["bbox"]), float(cfg["grid"]["cell_size_m"]))
    router = build_router(cfg, grid)
    depots, responders = load_fleet(cfg["files"]["responders"], grid)
    incidents = read_incidents(cfg["files"]["incidents"], grid)
    limit = cfg["simulation"].get("max_incidents")
    if limit:
        incidents = incidents[: int(limit)]
    model = load_model(cfg["files"]["model"])
    sc = Scenario(grid, depots, responders, router, model, incidents,
                  planner=planner_config(cfg),
                  service_mean=float(cfg["simulation"]["service_mean_s"]),
                  seed=int(cfg["simulation"]["seed"]),
                  base_metric=cfg["simulation"]["base_metric"],
                  config=cfg)
    if cfg["simulation"].get("responders"):
        sc = sc.with_responders(int(cfg["simulation"]["responders"]))
    return sc


def load_scenario(path, overrides=None):
    return build_scenario(read_config(path, overrides))


def write_config(path, cfg):
    with open(path, "w") as fh:
        yaml.safe_dump(cfg, fh, sort_keys=False)
