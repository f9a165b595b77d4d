import csv
import json
import os
import shutil
import subprocess
import sys
from dataclasses import replace

import pytest

from rtdispatch.cli import main
from rtdispatch.road import Router, load_graph
from rtdispatch.scenario import read_config, read_incidents, write_incidents
from rtdispatch.speed import load_profiles
from rtdispatch.timeutil import parse_timestamp


@pytest.fixture
def city(small_city, tmp_path):
    """A private copy of the small city, so commands can write next to it."""
    dst = tmp_path / "city"
    shutil.copytree(os.path.dirname(small_city), dst)
    return dst


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


class TestIncidentsCommands:
    def test_fit(self, city, capsys, tmp_path):
        out = tmp_path / "m.json"
        code, text, _ = run(capsys, "fit-incidents", city / "incidents.csv", out, "--config",
                            city / "scenario.yaml", "--method", "newton")
        assert code == 0 and out.exists()
        assert "log-likelihood" in text

    def test_empty_csv(self, capsys, tmp_path):
        p = tmp_path / "e.csv"
        p.write_text("id,timestamp,lat,lon\n")
        code, _, err = run(capsys, "fit-incidents", p, tmp_path / "m.json")
        assert code == 2 and "no observations" in err

    def test_malformed_row(self, city, capsys, tmp_path):
        lines = (city / "incidents.csv").read_text().splitlines()
        lines[3] = "99,not-a-time,36.1,-86.7,,"
        p = tmp_path / "bad.csv"
        p.write_text("\n".join(lines) + "\n")
        code, _, err = run(capsys, "fit-incidents", p, tmp_path / "m.json")
        assert code == 2 and "bad.csv:4" in err

    def test_update_empty_stream_is_byte_identical(self, city, capsys, tmp_path):
        stream = tmp_path / "s.csv"
        stream.write_text("id,timestamp,lat,lon\n")
        out = tmp_path / "out.json"
        code, _, _ = run(capsys, "update-incidents", city / "model.json", stream, out,
                         "--config", city / "scenario.yaml")
        assert code == 0
        assert out.read_bytes() == (city / "model.json").read_bytes()

    def test_update_improves_likelihood(self, city, capsys, tmp_path):
        # drifted stream: the same incidents arriving three times as fast
        incs = read_incidents(city / "incidents.csv")
        t0 = incs[0].occurred_at
        stream = tmp_path / "drift.csv"
        write_incidents(stream, [replace(i, occurred_at=t0 + (i.occurred_at - t0) / 3) for i in incs])
        out = tmp_path / "out.json"
        # raw count covariates make the gradient large, so use a smaller step
        code, text, _ = run(capsys, "update-incidents", city / "model.json", stream,
                            out, "--config", city / "scenario.yaml", "--step", "1e-5")
        assert code == 0
        vals = {l.split(":")[0]: l.split(":")[1] for l in text.splitlines() if ":" in l}
        assert float(vals["log-likelihood after"]) > float(vals["log-likelihood before"])
        assert "ms" in vals["elapsed"]

    def test_update_schema_mismatch(self, city, capsys, tmp_path):
        m = json.loads((city / "model.json").read_text())
        m["beta"] = m["beta"][:5]
        m["features"] = m["features"][:5]
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps(m))
        code, _, _ = run(capsys, "update-incidents", bad, city / "incidents.csv", tmp_path / "o.json",
                         "--config", city / "scenario.yaml")
        assert code == 2


class TestRoadCommands:
    def test_route_matches_library(self, city, capsys):
        g = load_graph(city / "graph.json")
        src, dst = g.coords[0], g.coords[50]
        code, text, _ = run(capsys, "route", f"{src[0]},{src[1]}", f"{dst[0]},{dst[1]}",
                            "--graph", city / "graph.json", "--speeds", city / "speeds.csv",
                            "--time", "2017-01-02T08:00:00")
        assert code == 0
        seconds = float(text.split("seconds:")[1])
        router = Router(g, load_profiles(city / "speeds.csv", g), seed=0)
        _, expect = router.route_points(tuple(src), tuple(dst), parse_timestamp("2017-01-02T08:00:00"))
        assert seconds == expect

    def test_route_same_point(self, city, capsys):
        g = load_graph(city / "graph.json")
        p = f"{g.coords[3][0]},{g.coords[3][1]}"
        code, text, _ = run(capsys, "route", p, p, "--graph", city / "graph.json")
        assert code == 0 and float(text.split("seconds:")[1]) == 0.0

    def test_route_unreachable(self, capsys, tmp_path):
        p = tmp_path / "g.json"
        p.write_text(json.dumps({"nodes": [[0, 36.0, -87.0], [1, 36.01, -87.0]],
                                 "edges": [[0, 1, 100.0, 1, 30.0, 0]]}))
        code, _, err = run(capsys, "route", "36.01,-87.0", "36.0,-87.0", "--graph", p)
        assert code == 2 and "route" in err.lower()

    def test_cached_route(self, city, capsys):
        cfg = read_config(city / "scenario.yaml")
        lat0, lon0, lat1, lon1 = cfg["grid"]["bbox"]
        code, text, _ = run(capsys, "route", f"{lat0 + 1e-3},{lon0 + 1e-3}",
                            f"{lat1 - 1e-3},{lon1 - 1e-3}", "--cached", "--config", city / "scenario.yaml")
        assert code == 0 and float(text.split("seconds:")[1]) > 0

    def test_landmarks_and_speeds(self, city, capsys, tmp_path):
        code, text, _ = run(capsys, "build-landmarks", city / "graph.json", tmp_path / "lm.npz", "-k", 4)
        assert code == 0 and (tmp_path / "lm.npz").exists()
        obs = tmp_path / "obs.csv"
        seg = load_graph(city / "graph.json").segment[0]
        obs.write_text(f"segment_id,timestamp,speed_mph\n{seg},2017-01-02T08:10:00,12\n")
        code, _, _ = run(capsys, "fit-speeds", city / "graph.json", obs, tmp_path / "sp.csv")
        assert code == 0
        rows = list(csv.DictReader(open(tmp_path / "sp.csv")))
        assert any(r["segment_id"] == str(seg) and r["bin_index"] == "16" and float(r["speed_mph"]) == 12
                   for r in rows)


class TestSimulationCommands:
    def test_compare_writes_reports(self, city, capsys, tmp_path):
        out = tmp_path / "rep"
        code, text, _ = run(capsys, "compare", "--config", city / "scenario.yaml", "--out-dir", out,
                            "--trace", "--set", "simulation.max_incidents=20")
        assert code == 0 and "impacted" in text
        header = (out / "comparison.csv").read_text().splitlines()[0]
        assert header.startswith("# config: ")
        cfg = json.loads(header[len("# config: "):])
        assert cfg["planner"]["b"] == 3 and cfg["planner"]["epsilon"] == 1.5
        rep = json.loads((out / "comparison.json").read_text())
        assert rep["incidents"] == 20
        assert (out / "trace.jsonl").exists()

    def test_simulate_and_seed_override(self, city, capsys, tmp_path):
        outs = []
        for seed in (1, 1, 2):
            out = tmp_path / f"s{len(outs)}"
            code, _, _ = run(capsys, "simulate", "--policy", "greedy", "--config", city / "scenario.yaml",
                             "--out-dir", out, "--seed", seed, "--set", "simulation.max_incidents=30")
            assert code == 0
            outs.append(json.loads((out / "replay_greedy.json").read_text()))
        seeded = ("incidents", "dispatch_count", "serviced_count", "mean_response_s")
        assert [outs[0][k] for k in seeded] == [outs[1][k] for k in seeded]
        assert outs[0]["mean_response_s"] != outs[2]["mean_response_s"]
        assert outs[0]["dispatch_count"] == outs[0]["serviced_count"] == 30

    def test_missing_graph_is_config_error(self, city, capsys):
        os.remove(city / "graph.json")
        code, _, err = run(capsys, "compare", "--config", city / "scenario.yaml")
        assert code == 1 and "graph" in err

    def test_needs_config(self, capsys):
        code, _, _ = run(capsys, "simulate")
        assert code == 1

    def test_bad_set(self, city, capsys):
        code, _, _ = run(capsys, "simulate", "--config", city / "scenario.yaml", "--set", "nonsense")
        assert code == 1

    def test_gen_city(self, capsys, tmp_path):
        code, _, _ = run(capsys, "gen-city", "--out-dir", tmp_path / "c", "--nodes", 50, "--cells", 4,
                         "--incidents", 20, "--seed", 3)
        assert code == 0
        m = json.loads((tmp_path / "c" / "manifest.json").read_text())
        assert m["params"]["seed"] == 3 and m["params"]["n_nodes"] == 50


def test_unknown_command_exit_code():
    proc = subprocess.run([sys.executable, "-m", "rtdispatch.cli", "bogus"], capture_output=True)
    assert proc.returncode == 1


def test_console_script():
    exe = shutil.which("rtdispatch")
    if exe is None:
        pytest.skip("console script not on PATH")
    proc = subprocess.run([exe, "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "gen-city" in proc.stdout
