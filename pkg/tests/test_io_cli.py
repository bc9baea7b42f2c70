import json
import os
import shutil
from importlib.resources import files

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from minsurf import config as cfgmod
from minsurf.cli import main
from minsurf.errors import ConfigError, UnknownKind
from minsurf.io import read_boundary_csv, read_field, write_boundary_csv, write_field
from minsurf.plotting import export_plot_data

QUICKSTART = files("minsurf") / "examples" / "flat_quickstart.json"


@settings(max_examples=20, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 3)),
              elements=st.floats(allow_nan=False, allow_infinity=False)))
def test_field_round_trip(tmp_path_factory, a):
    p = tmp_path_factory.mktemp("f") / "u.bin"
    head = write_field(p, a, [[0, 1], [0, 1], [0, 1]])
    back, h2 = read_field(p)
    assert np.array_equal(back, a) and h2 == head
    assert os.path.getsize(p) == 8 * a.size


def test_boundary_csv_round_trip(tmp_path, flat_grid):
    vals = np.sin(np.arange(len(flat_grid.boundary_ids)) * 0.37)
    perm = np.random.default_rng(0).permutation(len(vals))
    write_boundary_csv(tmp_path / "bc.csv", flat_grid.boundary_ids[perm], vals[perm])
    ids, back = read_boundary_csv(tmp_path / "bc.csv", flat_grid)
    assert np.array_equal(ids, flat_grid.boundary_ids) and np.array_equal(back, vals)
    write_boundary_csv(tmp_path / "short.csv", flat_grid.boundary_ids[:5], vals[:5])
    with pytest.raises(ValueError):
        read_boundary_csv(tmp_path / "short.csv", flat_grid)


def test_defaults_cover_every_knob():
    d = cfgmod.defaults()
    assert cfgmod.validate({}) == d

    def walk(schema, value, path):
        for key, sub in schema.get("properties", {}).items():
            assert key in value, f"{path}.{key} has no default"
            walk(sub, value[key], f"{path}.{key}")
    walk(cfgmod.SCHEMA, d, "")


@pytest.mark.parametrize("patch,field", [
    ({"scene": {"tube_half_width": -1}}, "scene.tube_half_width"),
    ({"solver": {"max_iter": 0}}, "solver.max_iter"),
    ({"family": {"orientations": "random"}}, "family.orientations"),
    ({"bogus": 1}, "<root>"),
])
def test_config_errors_name_field(patch, field):
    with pytest.raises(ConfigError) as exc:
        cfgmod.validate(patch)
    assert exc.value.field == field


def _write(path, obj):
    path.write_text(json.dumps(obj))
    return path.name


def test_cli_config_error_exit_code(tmp_path, capsys):
    name = _write(tmp_path / "bad.json", {"scene": {"tube_half_width": 0}})
    assert main(["--workdir", str(tmp_path), "run", "--config", name]) == 2
    assert "scene.tube_half_width" in capsys.readouterr().err


def test_cli_stage_failure_exit_code(tmp_path, capsys):
    # q = -n*b puts the first Dirichlet eigenvalue at 0, and the region blocks any shrink
    cfg = {"stages": ["scene", "admissibility"],
           "scene": {"base_extent": 1.2, "region_radius": 1.19,
                     "metric": {"preset": "warped", "params": {"b": -1.7134}}}}
    name = _write(tmp_path / "c.json", cfg)
    assert main(["--workdir", str(tmp_path), "run", "--config", name]) == 1
    assert "stage 'admissibility' failed" in capsys.readouterr().err


@pytest.fixture(scope="module")
def quickstart(tmp_path_factory):
    d = tmp_path_factory.mktemp("qs")
    shutil.copy(QUICKSTART, d / "q.json")
    assert main(["--workdir", str(d), "run", "--config", "q.json", "--out", "run1"]) == 0
    return d


def test_quickstart_outputs(quickstart):
    run = quickstart / "run1"
    for f in ("scene.json", "basis.json", "bc.csv", "u.bin", "u.bin.json", "measurements.csv",
              "spectrum.json", "spectrum.csv", "spectrum.png", "report.json", "manifest.json"):
        assert (run / f).exists(), f
    man = json.loads((run / "manifest.json").read_text())
    assert man["stages"] == json.loads((quickstart / "q.json").read_text())["stages"]
    rep = json.loads((run / "report.json").read_text())
    assert rep["basis"]["passed"] and rep["solve"]["converged"]
    u, head = read_field(run / "u.bin")
    assert head["shape"] == [33, 33]


def test_quickstart_reproduces_from_manifest(quickstart, capsys):
    args = ["--workdir", str(quickstart), "run", "--manifest", "run1/manifest.json", "--out", "run2",
            "--verify"]
    assert main(args) == 0
    assert "bitwise" in capsys.readouterr().out
    m1 = json.loads((quickstart / "run1" / "manifest.json").read_text())
    m2 = json.loads((quickstart / "run2" / "manifest.json").read_text())
    assert m1["fingerprint"] == m2["fingerprint"]


def test_single_surface_subcommands(quickstart):
    wd = ["--workdir", str(quickstart)]
    assert main(wd + ["basis", "--scene", "q.json", "--out", "b.json"]) == 0
    assert main(wd + ["solve", "--scene", "q.json", "--bc", "run1/bc.csv", "--out", "u2.bin"]) == 0
    assert np.array_equal(read_field(quickstart / "u2.bin")[0], read_field(quickstart / "run1" / "u.bin")[0])
    assert main(wd + ["measure", "--scene", "q.json", "--basis", "b.json", "--out", "m.csv"]) == 0
    assert (quickstart / "m.csv").read_text() == (quickstart / "run1" / "measurements.csv").read_text()
    np.savetxt(quickstart / "z.csv", np.zeros((1, 6)), delimiter=",", header="z0,z1,z2,z3,z4,z5",
               comments="")
    assert main(wd + ["linearize", "--scene", "q.json", "--basis", "b.json", "--zsamples", "z.csv",
                      "--out", "l.csv"]) == 0
    assert main(wd + ["transform", "--scene", "q.json", "--basis", "b.json", "--zsamples", "5",
                      "--out", "t.csv"]) == 0
    assert main(wd + ["spectrum", "--scene", "q.json", "--k", "3", "--out", "s.json"]) == 0
    lam = json.loads((quickstart / "s.json").read_text())["spectrum"]
    assert lam[0] == pytest.approx(-2 * np.pi**2, rel=0.01)


def test_export_kinds(tmp_path):
    (tmp_path / "r.json").write_text(json.dumps({
        "history": [{"iteration": 1, "misfit": 1e-3, "update": 1e-2, "step": 1.0},
                    {"iteration": 2, "misfit": 1e-5, "update": 1e-4, "step": 1.0}],
        "rows": [{"amplitude": 0.02, "data_norm": 1e-3, "sol_norm": 4e-4},
                 {"amplitude": 0.01, "data_norm": 5e-4, "sol_norm": 2e-4}],
        "spectrum": [-19.7, -49.3],
        "refinement": [{"nodes_per_axis": 17, "h": 1 / 16, "error": 4e-3},
                       {"nodes_per_axis": 33, "h": 1 / 32, "error": 1e-3}]}))
    for kind in ("spectrum", "sweep", "convergence", "refinement"):
        csv, png = export_plot_data(tmp_path / "r.json", kind, tmp_path)
        assert os.path.getsize(png) > 1000
        assert len(open(csv).read().splitlines()) == 3
    with pytest.raises(UnknownKind):
        export_plot_data(tmp_path / "r.json", "histogram")
    assert main(["--workdir", str(tmp_path), "export", "--result", "r.json", "--kind", "nope"]) == 1


def test_cli_inversion_path(tmp_path):
    wd = ["--workdir", str(tmp_path)]
    name = _write(tmp_path / "fam.json", {"family": {"nodes_per_axis": 17, "samples_per_surface": 2},
                                          "unknown": {"per_axis": 2}})
    assert main(wd + ["family", "--config", name, "--out", "family.json"]) == 0
    assert main(wd + ["synthesize", "--family", "family.json", "--index", "3"]) == 0
    assert main(wd + ["reconstruct", "--family", "family.json", "--data", "data", "--max-iter", "5"]) == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["relative_error"] < 1e-3 and rep["sigma_min"] > 0
    alpha, head = read_field(tmp_path / "alpha.bin")
    assert np.all(alpha > 0)
    rec = json.loads((tmp_path / "family.json").read_text())
    rec["config"]["seed"] += 1
    (tmp_path / "family.json").write_text(json.dumps(rec))
    assert main(wd + ["reconstruct", "--family", "family.json", "--data", "data"]) == 1
