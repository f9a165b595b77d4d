"""Command-line entry point: ``rtdispatch <command> [options]``.

Exit codes: 0 ok, 1 usage or config error, 2 bad input data, 3 numerical failure.
"""
import argparse
import csv
import json
import logging
import os
import shutil
import sys
import time

import yaml

from .core import BBox, build_grid
from .errors import (ConfigError, DivergenceError, FormatError, IntegrityError, NoRoute,
                     OutOfRegion, RateOverflow, SchemaError, UnknownSegment)
from .road import LandmarkTable, Router, load_graph, select_landmarks
from .scenario import build_scenario, read_config, read_incidents
from .simulator import build_report, run_replay
from .speed import fit_profiles, freeflow_profiles, load_profiles, read_speed_csv, save_profiles
from .survival import (DEFAULT_SCHEMA, fit_batch, interarrival_dataset, load_model,
                       log_likelihood, save_model, update_streaming)
from .timeutil import format_timestamp, parse_timestamp

log = logging.getLogger("rtdispatch")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for data errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _point(text):
    try:
        lat, lon = (float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LAT,LON, got {text!r}") from None
    return lat, lon


def _bbox(text):
    try:
        vals = [float(x) for x in text.split(",")]
    except ValueError:
        vals = []
    if len(vals) != 4:
        raise argparse.ArgumentTypeError("expected LAT_MIN,LON_MIN,LAT_MAX,LON_MAX")
    return BBox(*vals)


def _overrides(pairs):
    """``section.key=value`` strings into a nested dict; values parsed as YAML scalars."""
    out = {}
    for item in pairs or ():
        key, sep, raw = item.partition("=")
        parts = key.strip().split(".")
        if not sep or len(parts) != 2 or not all(parts):
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        out.setdefault(parts[0], {})[parts[1]] = yaml.safe_load(raw)
    return out


def _config(args, extra=None):
    if not args.config:
        raise UsageError(f"{args.command} needs --config")
    over = _overrides(args.set)
    if args.seed is not None:
        over.setdefault("simulation", {})["seed"] = args.seed
    if extra:
        for k, v in extra.items():
            over.setdefault(k, {}).update(v)
    cfg = read_config(args.config, over)
    if args.out_dir:
        cfg["reports"]["out_dir"] = os.path.abspath(args.out_dir)
    return cfg


def _out_dir(args, cfg=None):
    d = args.out_dir or (cfg["reports"]["out_dir"] if cfg else None) or "."
    os.makedirs(d, exist_ok=True)
    return d


def _grid_for(args, incidents_path):
    """Grid from --bbox, else from --config, else the padded extent of the incidents."""
    cell = args.cell_size
    if args.bbox is not None:
        return build_grid(args.bbox, cell)
    if args.config:
        cfg = read_config(args.config)
        return build_grid(BBox(*cfg["grid"]["bbox"]), float(cfg["grid"]["cell_size_m"]))
    raw = read_incidents(incidents_path)
    if not raw:
        raise FormatError("no observations")
    lat = [i.location[0] for i in raw]
    lon = [i.location[1] for i in raw]
    pad = 1e-4
    return build_grid(BBox(min(lat) - pad, min(lon) - pad, max(lat) + pad, max(lon) + pad), cell)


def _dataset(path, grid):
    incidents = read_incidents(path, grid, skip_outside=True)
    return interarrival_dataset(incidents, grid)


def cmd_fit_incidents(args):
    grid = _grid_for(args, args.incidents)
    data = _dataset(args.incidents, grid)
    if len(data) == 0:
        raise FormatError("no observations")
    t0 = time.perf_counter()
    model = fit_batch(data, step=args.step, tol=args.tol, max_iter=args.max_iter,
                      method=args.method, schema=DEFAULT_SCHEMA)
    ms = (time.perf_counter() - t0) * 1000
    save_model(model, args.out)
    print(f"observations: {len(data)}")
    print(f"log-likelihood: {log_likelihood(model, data):.6f}")
    print(f"converged: {model.converged} after {model.n_iter} iterations ({ms:.1f} ms)")
    return EXIT_OK


def cmd_update_incidents(args):
    base = load_model(args.model)
    grid = _grid_for(args, args.stream)
    stream = _dataset(args.stream, grid)
    if len(stream) == 0:
        if os.path.abspath(args.model) != os.path.abspath(args.out):
            shutil.copyfile(args.model, args.out)
        print("empty stream: model unchanged")
        return EXIT_OK
    if stream.W.shape[1] != len(base.beta):
        raise SchemaError(f"model has {len(base.beta)} features, stream has {stream.W.shape[1]}")
    before = log_likelihood(base, stream)
    t0 = time.perf_counter()
    model = update_streaming(base, stream, step=args.step, max_iter=args.max_iter)
    ms = (time.perf_counter() - t0) * 1000
    after = log_likelihood(model, stream)
    save_model(model, args.out)
    print(f"stream observations: {len(stream)}")
    print(f"log-likelihood before: {before:.6f}")
    print(f"log-likelihood after: {after:.6f}")
    print(f"elapsed: {ms:.1f} ms")
    return EXIT_OK


def cmd_fit_speeds(args):
    graph = load_graph(args.graph)
    obs = read_speed_csv(args.observations)
    profiles = fit_profiles(obs, graph, args.bin_width)
    save_profiles(profiles, args.out)
    print(f"segments: {len(profiles.segment_ids)}, bins: {profiles.speeds.shape[1]}, "
          f"observations: {len(obs)}")
    return EXIT_OK


def cmd_build_landmarks(args):
    graph = load_graph(args.graph)
    table = select_landmarks(graph, min(args.k, graph.n_nodes), seed=args.seed)
    table.save(args.out, graph)
    ids = [int(graph.node_ids[i]) for i in table.landmarks]
    print(f"landmarks ({len(ids)}): {' '.join(map(str, ids))}")
    return EXIT_OK


def cmd_route(args):
    t = parse_timestamp(args.time)
    if args.cached:
        cfg = _config(args)
        scenario_grid = build_grid(BBox(*cfg["grid"]["bbox"]), float(cfg["grid"]["cell_size_m"]))
        from .scenario import build_router
        router = build_router(cfg, scenario_grid)
        a, b = scenario_grid.cell_of(args.src), scenario_grid.cell_of(args.dst)
        seconds = router.travel_time(args.src, args.dst, t)
        path = [] if a == b else router.route_nodes(router.cell_node(a), router.cell_node(b), t)[0]
        print(f"cells: {a} -> {b}")
    else:
        if not args.graph:
            raise UsageError("route needs --graph (or --cached with --config)")
        graph = load_graph(args.graph)
        speeds = load_profiles(args.speeds, graph) if args.speeds else freeflow_profiles(graph)
        landmarks = LandmarkTable.load(args.landmarks, graph) if args.landmarks else None
        router = Router(graph, speeds, landmarks=landmarks, seed=args.seed or 0)
        path, seconds = router.route_points(args.src, args.dst, t)
    print(f"path: {' '.join(map(str, path))}")
    print(f"seconds: {seconds!r}")
    return EXIT_OK


def _header(cfg):
    return "# config: " + json.dumps(cfg, sort_keys=True, default=str)


def _write_trace(path, trace):
    with open(path, "w") as fh:
        for rec in trace:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def cmd_simulate(args):
    cfg = _config(args)
    scenario = build_scenario(cfg)
    out = _out_dir(args, cfg)
    trace = [] if args.trace else None
    res = run_replay(scenario, args.policy, trace)
    rows_path = os.path.join(out, f"replay_{args.policy}.csv")
    with open(rows_path, "w", newline="") as fh:
        fh.write(_header(cfg) + "\n")
        w = csv.writer(fh)
        w.writerow(["incident_id", "responder_id", "dispatched_at", "travel_s", "response_s"])
        for iid in sorted(res.response_times):
            w.writerow([iid, res.assignments[iid], format_timestamp(res.dispatch_times[iid]),
                        repr(res.travel_times[iid]), repr(res.response_times[iid])])
    summary = {
        "config": cfg,
        "policy": res.policy,
        "incidents": len(res.response_times),
        "dispatch_count": res.dispatch_count,
        "serviced_count": res.serviced_count,
        "mean_response_s": res.mean_response_time(),
        "mean_decision_time_s": res.mean_decision_time(),
    }
    with open(os.path.join(out, f"replay_{args.policy}.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
    if trace is not None:
        _write_trace(os.path.join(out, f"trace_{args.policy}.jsonl"), trace)
    print(f"{res.policy}: {len(res.response_times)} incidents, "
          f"mean response {res.mean_response_time():.1f} s")
    print(f"reports written to {out}")
    return EXIT_OK


def cmd_compare(args):
    cfg = _config(args)
    scenario = build_scenario(cfg)
    out = _out_dir(args, cfg)
    trace = [] if args.trace else None
    base = run_replay(scenario, "greedy")
    other = run_replay(scenario, "planner", trace)
    report = build_report(base, other, cfg)
    with open(os.path.join(out, "comparison.csv"), "w", newline="") as fh:
        fh.write(_header(cfg) + "\n")
        w = csv.writer(fh)
        w.writerow(["incident_id", "base_response_s", "planner_response_s", "difference_s",
                    "base_responder", "planner_responder"])
        for iid, b, p in report.rows:
            w.writerow([iid, repr(b), repr(p), repr(b - p), base.assignments[iid],
                        other.assignments[iid]])
    with open(os.path.join(out, "comparison.json"), "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
    if trace is not None:
        _write_trace(os.path.join(out, "trace.jsonl"), trace)
    print(f"incidents: {len(report.rows)}")
    print(f"impacted: {report.impacted_count}")
    print(f"mean savings on impacted: {report.mean_savings_on_impacted:.3f} s")
    print(f"mean decision time: {report.mean_decision_compute_time:.4f} s")
    print(f"reports written to {out}")
    return EXIT_OK


def cmd_gen_city(args):
    from .synthetic import generate_synthetic_city
    out = args.out_dir or "city"
    path = generate_synthetic_city(out, seed=args.seed or 0, n_nodes=args.nodes,
                                   n_cells=args.cells, n_depots=args.depots,
                                   n_incidents=args.incidents, base_rate=args.rate,
                                   n_responders=args.responders)
    print(f"scenario written to {path}")
    return EXIT_OK


def build_parser():
    def global_opts(parser, default):
        parser.add_argument("--config", default=default, help="scenario YAML file")
        parser.add_argument("--seed", type=int, default=default,
                            help="root seed (overrides simulation.seed)")
        parser.add_argument("--trace", action="store_true", default=default,
                            help="write per-decision JSON-lines trace")
        parser.add_argument("--out-dir", default=default, help="directory for outputs")
        parser.add_argument("--set", action="append", default=default, metavar="SECTION.KEY=VALUE",
                            help="override a config value (repeatable)")
        parser.add_argument("-v", "--verbose", action="count", default=default)

    p = _Parser(prog="rtdispatch", description="Online emergency responder dispatch toolkit.")
    global_opts(p, None)
    p.set_defaults(trace=False, verbose=0)
    # same flags after the subcommand; SUPPRESS keeps them from clobbering earlier values
    common = argparse.ArgumentParser(add_help=False)
    global_opts(common, argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    _add = sub.add_parser
    sub.add_parser = lambda *a, **kw: _add(*a, parents=[common], **kw)

    def grid_opts(sp):
        sp.add_argument("--bbox", type=_bbox, help="LAT_MIN,LON_MIN,LAT_MAX,LON_MAX")
        sp.add_argument("--cell-size", type=float, default=1609.344, help="grid cell size in m")

    sp = sub.add_parser("fit-incidents", help="batch-fit the incident survival model")
    sp.add_argument("incidents")
    sp.add_argument("out")
    sp.add_argument("--method", choices=["gradient", "newton"], default="gradient")
    sp.add_argument("--step", type=float, default=1e-3)
    sp.add_argument("--tol", type=float, default=1e-6)
    sp.add_argument("--max-iter", type=int, default=500)
    grid_opts(sp)
    sp.set_defaults(func=cmd_fit_incidents)

    sp = sub.add_parser("update-incidents", help="streaming update of a fitted model")
    sp.add_argument("model")
    sp.add_argument("stream")
    sp.add_argument("out")
    sp.add_argument("--step", type=float, default=1e-3)
    sp.add_argument("--max-iter", type=int, default=100)
    grid_opts(sp)
    sp.set_defaults(func=cmd_update_incidents)

    sp = sub.add_parser("fit-speeds", help="weekly binned speed profiles from observations")
    sp.add_argument("graph")
    sp.add_argument("observations", help="CSV segment_id,timestamp,speed_mph")
    sp.add_argument("out")
    sp.add_argument("--bin-width", type=int, default=30, help="minutes")
    sp.set_defaults(func=cmd_fit_speeds)

    sp = sub.add_parser("build-landmarks", help="precompute landmark distance tables")
    sp.add_argument("graph")
    sp.add_argument("out", help=".npz output")
    sp.add_argument("-k", type=int, default=16)
    sp.set_defaults(func=cmd_build_landmarks)

    sp = sub.add_parser("route", help="fastest route between two points")
    sp.add_argument("src", type=_point, help="LAT,LON")
    sp.add_argument("dst", type=_point, help="LAT,LON")
    sp.add_argument("--time", default="2017-01-02T08:00:00")
    sp.add_argument("--graph")
    sp.add_argument("--speeds")
    sp.add_argument("--landmarks")
    sp.add_argument("--cached", action="store_true",
                    help="grid-cell travel time through the scenario's cache (needs --config)")
    sp.set_defaults(func=cmd_route)

    sp = sub.add_parser("simulate", help="replay the scenario under one policy")
    sp.add_argument("--policy", choices=["greedy", "planner"], default="planner")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("compare", help="replay under the base policy and the planner")
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("gen-city", help="write a synthetic scenario")
    sp.add_argument("--nodes", type=int, default=400)
    sp.add_argument("--cells", type=int, default=16)
    sp.add_argument("--depots", type=int, default=4)
    sp.add_argument("--incidents", type=int, default=2000)
    sp.add_argument("--rate", type=float, default=2.0, help="citywide incidents per hour")
    sp.add_argument("--responders", type=int)
    sp.set_defaults(func=cmd_gen_city)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, IntegrityError, SchemaError, UnknownSegment, NoRoute, OutOfRegion,
            OSError, ValueError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_DATA
    except (DivergenceError, RateOverflow, FloatingPointError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
