import json
import os
import pathlib
import subprocess
import sys

import pytest

from mupscale import cli
from mupscale import report as rp
from mupscale.svgplot import PANELS, render_panels, slug, write_panels

GOLDEN = pathlib.Path(__file__).parent / "golden"


def run(*argv, env=None):
    """Run the CLI in a subprocess so exit codes and streams are real."""
    e = dict(os.environ)
    e.pop(cli.SEED_ENV, None)
    e.update(env or {})
    return subprocess.run([sys.executable, "-m", "mupscale.cli", *map(str, argv)],
                          capture_output=True, text=True, env=e)


@pytest.fixture(scope="module")
def store(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    out = d / "runs.jsonl"
    r = run("sweep", "--config", GOLDEN / "mini_sweep.json", "--out", out, "--json")
    assert r.returncode == 0, r.stderr
    assert json.loads(r.stdout) == {"store": str(out), "written": 66}
    return out


def test_sweep_resume_plans_nothing(store):
    r = run("sweep", "--config", GOLDEN / "mini_sweep.json", "--out", store)
    assert r.returncode == 0 and "0 planned" in r.stdout


def test_fit_round_trip_matches_frozen_report(store, tmp_path):
    out = tmp_path / "report.json"
    r = run("fit", "--config", GOLDEN / "mini_fit.json", store, "--out", out, "--json")
    assert r.returncode == 0, r.stderr
    doc = json.loads(r.stdout)
    assert doc["f"] == 3.0 and {m["name"] for m in doc["metrics"]} == {"SP", "muP"}
    assert out.read_bytes() == (GOLDEN / "mini_report.json").read_bytes()


def test_fit_text_output_names_settings(store):
    r = run("fit", "--config", GOLDEN / "mini_fit.json", store, "--spec", "muP")
    assert r.returncode == 0
    assert r.stdout.splitlines()[0] == "f = 3, s = 0.1"
    assert "muP" in r.stdout and "SP " not in r.stdout


def test_plot_matches_golden_svgs(tmp_path):
    r = run("plot", GOLDEN / "mini_report.json", "--out", tmp_path)
    assert r.returncode == 0, r.stderr
    golden = sorted(p.relative_to(GOLDEN / "svg") for p in (GOLDEN / "svg").rglob("*.svg"))
    fresh = sorted(p.relative_to(tmp_path) for p in tmp_path.rglob("*.svg"))
    assert golden == fresh and len(golden) == 2 * len(PANELS)
    for p in golden:
        assert (tmp_path / p).read_bytes() == (GOLDEN / "svg" / p).read_bytes(), p


def test_render_is_byte_stable():
    rep = rp.load(GOLDEN / "mini_report.json")
    entry = rep["specs"][0]
    a, b = render_panels(entry), render_panels(entry)
    assert a == b and set(a) == {pid for pid, _ in PANELS}
    for svg in a.values():
        assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")


def test_plot_single_spec(tmp_path):
    rep = rp.load(GOLDEN / "mini_report.json")
    written = write_panels(rep, tmp_path, ["muP"])
    assert len(written) == len(PANELS) and all(slug("muP", 0.0) in w for w in written)


def test_ablate_report_missing_specs_exit_4(store, tmp_path):
    out = tmp_path / "abl.csv"
    r = run("ablate-report", "--config", GOLDEN / "mini_fit.json", store, "--out", out, "--json")
    assert r.returncode == cli.EXIT_DATA
    doc = json.loads(r.stdout)
    assert not {"SP", "muP"} & set(doc["missing"]) and len(doc["missing"]) == 14
    assert out.read_text().splitlines()[0].startswith("name")


@pytest.mark.parametrize("argv,code", [
    (["sweep", "--out", "x.jsonl"], cli.EXIT_CONFIG),
    (["fit", "--bogus"], cli.EXIT_CONFIG),
    (["nosuchcommand"], cli.EXIT_CONFIG),
    (["fit", "/nonexistent/runs.jsonl"], cli.EXIT_DATA),
    (["plot", "/nonexistent/report.json", "--out", "x"], cli.EXIT_DATA),
    (["sweep", "--config", "/nonexistent.json", "--out", "x.jsonl"], cli.EXIT_DATA),
    (["check", "--widths", "64,128"], cli.EXIT_CONFIG),
    (["check", "--spec", "nope"], cli.EXIT_CONFIG),
])
def test_exit_codes(argv, code, tmp_path):
    r = subprocess.run([sys.executable, "-m", "mupscale.cli", *argv], capture_output=True, text=True, cwd=tmp_path)
    assert r.returncode == code, r.stderr


def test_config_errors_name_field(tmp_path):
    bad = json.loads((GOLDEN / "mini_sweep.json").read_text())
    bad["widths"] = [64, 32]
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(bad))
    r = run("sweep", "--config", p, "--out", tmp_path / "o.jsonl")
    assert r.returncode == cli.EXIT_CONFIG and "widths" in r.stderr
    p.write_text("{not json")
    assert run("sweep", "--config", p, "--out", tmp_path / "o.jsonl").returncode == cli.EXIT_CONFIG
    p.write_text(json.dumps({"version": 1, "restarts": 0}))
    assert run("fit", "--config", p, tmp_path / "o.jsonl").returncode == cli.EXIT_CONFIG


def test_io_error_exit_3(store, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    r = run("fit", "--config", GOLDEN / "mini_fit.json", store, "--out", blocker / "sub" / "r.json")
    assert r.returncode == cli.EXIT_IO


def test_seed_env_override(tmp_path):
    doc = json.loads((GOLDEN / "mini_sweep.json").read_text())
    doc["widths"] = [16]
    doc["specs"] = ["muP"]
    p = tmp_path / "c.json"
    p.write_text(json.dumps(doc))
    out = tmp_path / "r.jsonl"
    assert run("sweep", "--config", p, "--out", out, env={cli.SEED_ENV: "5"}).returncode == 0
    assert {json.loads(l)["seed"] for l in out.read_text().splitlines()} == {5}
    r = run("sweep", "--config", p, "--out", out, env={cli.SEED_ENV: "x"})
    assert r.returncode == cli.EXIT_CONFIG


def test_check_json(tmp_path):
    r = run("check", "--widths", "32,64,128,256", "--seeds", "2", "--json", "--out", tmp_path / "c.json")
    assert r.returncode == 0, r.stdout + r.stderr
    doc = json.loads(r.stdout)
    assert doc["ok"] and doc["spec"] == "muP"
    assert json.loads((tmp_path / "c.json").read_text())["rows"] == doc["rows"]
