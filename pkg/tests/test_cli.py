import csv
import hashlib
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from eqcbf import grids
from eqcbf.cli import main

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
SI = str(CONFIGS / "single_integrator.ini")
BIKE = str(CONFIGS / "bicycle.ini")
# a small lattice: integer coordinates so M cells coincide with full-grid cells
SMALL = ["--grid.axes", "x:-5:5:11 y:-5:5:11", "--m_grid.axes", "x:-8:0:9 y:0:0:1",
         "--optimizer.n_iterations", "4"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def _sha(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _last_json(text):
    start = text.rindex("\n{") + 1 if "\n{" in text else text.index("{")
    return json.loads(text[start:])


@pytest.fixture(scope="module")
def small_si(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    sym, direct = d / "sym.eqcb", d / "direct.eqcb"
    assert main(["synth-sym", SI, "--out", str(sym), *SMALL]) == 0
    assert main(["synth-direct", SI, "--out", str(direct), *SMALL]) == 0
    return d, sym, direct


def test_synth_direct_counts_and_timing(small_si):
    _, _, direct = small_si
    g = grids.load(direct)
    assert g.counts()["explicit"] == 121
    timing = json.loads(Path(str(direct) + ".timing.json").read_text())
    assert timing["cells"] == 121 and timing["direct_seconds"] > 0


def test_synth_sym_prints_table_row(capsys, tmp_path):
    code, out, _ = run(capsys, "synth-sym", SI, "--out", tmp_path / "s.eqcb", *SMALL)
    assert code == 0
    assert "| explicit | total | ratio |" in out.replace("system | domain | M | ", "")
    rep = _last_json(out)
    assert rep["census"]["explicit"] == 9 and rep["census"]["total"] == 121


def test_full_domain_chart_gives_hundred_percent(capsys, tmp_path):
    code, out, _ = run(capsys, "synth-sym", SI, "--out", tmp_path / "id.eqcb", "--grid.axes", "x:-2:2:3 y:-2:2:3",
                       "--m_grid.axes", "x:-2:2:3 y:-2:2:3", "--m_grid.chart", "identity",
                       "--m_grid.chart_params", "dim=2")
    assert code == 0
    rep = _last_json(out)
    assert rep["census"]["ratio"] == 1.0
    assert rep["timings"]["inferred_seconds"] < 0.5


def test_unknown_system_is_usage_error(capsys, tmp_path):
    code, _, err = run(capsys, "synth-direct", SI, "--out", tmp_path / "x.eqcb", "--problem.system", "hovercraft")
    assert code == 2 and "hovercraft" in err


def test_missing_config_and_bad_flags(capsys, tmp_path):
    assert run(capsys, "synth-direct", tmp_path / "nope.ini")[0] == 2
    assert run(capsys, "synth-direct", SI, "--bogus")[0] == 2
    assert run(capsys)[0] == 2
    assert run(capsys, "synth-direct", SI, "--grid.axes", "x:0:1")[0] == 2


def test_direct_is_deterministic_across_workers(tmp_path):
    args = ["--grid.axes", "x:-3:3:5 y:-3:3:5", "--optimizer.n_iterations", "3"]
    hs = []
    for name, w in (("a", 1), ("b", 1), ("c", 2)):
        out = tmp_path / f"{name}.eqcb"
        assert main(["synth-direct", SI, "--out", str(out), "--workers", str(w), *args]) == 0
        hs.append(_sha(out))
    assert hs[0] == hs[1] == hs[2]


def test_check_equivariance_translation(capsys):
    code, out, _ = run(capsys, "check", BIKE, "--what", "equivariance", "--check.transform", "translate",
                       "--check.n_samples", "200")
    assert code == 0 and json.loads(out)["strong"]


def test_check_equivariance_counterexample(capsys):
    # rotation without the input map is not an equivariance of the single integrator with box input
    code, out, _ = run(capsys, "check", SI, "--what", "equivariance", "--problem.system_params",
                       "u_box=1", "--check.transform_params", "kind=rotation blocks=1", "--check.n_samples", "50")
    assert code == 1


def test_check_symmetry(capsys):
    code, out, _ = run(capsys, "check", BIKE, "--what", "symmetry", "--check.transform", "rotate_about_point",
                       "--check.n_samples", "200")
    assert code == 0 and json.loads(out)["verdict"] == "pass"


def test_check_shift_condition_adversarial(capsys):
    code, out, _ = run(capsys, "check", SI, "--what", "shift_condition", "--check.family", "translate")
    assert code == 1
    assert json.loads(out)["worst_violation"] > 0


def test_check_cbf_prints_fraction(capsys, small_si):
    _, sym, _ = small_si
    code, out, _ = run(capsys, "check", SI, "--what", "cbf", "--grid", sym, "--check.n_states", "200")
    assert "pass fraction" in out
    assert code in (0, 1)
    assert _last_json(out)["n_states"] > 0


def test_compare(capsys, small_si, tmp_path):
    _, sym, direct = small_si
    code, out, _ = run(capsys, "compare", direct, direct)
    rep = json.loads(out)
    assert code == 0 and rep["max_abs_dev"] == 0.0 and rep["mean_abs_dev"] == 0.0
    code, out, _ = run(capsys, "compare", sym, direct, "--bound", "10")
    assert code == 0 and json.loads(out)["n_compared"] == 121
    assert run(capsys, "compare", sym, direct, "--bound", "-1")[0] == 1
    other = tmp_path / "other.eqcb"
    grids.save(grids.ValueGrid.filled(grids.GridSpec.from_axes(grids.Axis("x", 0, 1, 2)), np.zeros(2)), other)
    assert run(capsys, "compare", sym, other)[0] == 2


def test_bench(capsys, small_si, tmp_path):
    d, sym, direct = small_si
    cfg = tmp_path / "bench.ini"
    cfg.write_text(Path(SI).read_text())
    over = ["--bench.sym", str(sym), "--bench.direct", str(direct), *SMALL]
    code, out1, _ = run(capsys, "bench", cfg, *over)
    assert code == 0
    assert "single integrator" in out1 and "time_ratio" in out1
    code, out2, _ = run(capsys, "bench", cfg, *over, "--format", "csv", "--out", tmp_path / "t.csv")
    rows = list(csv.DictReader(out2.splitlines()))
    assert rows[0]["explicit"] == "9" and rows[0]["total"] == "121"
    # stored timings are re-read, so a second run is identical
    assert run(capsys, "bench", cfg, *over)[1] == out1
    assert run(capsys, "bench")[0] == 2


def test_export(capsys, tmp_path):
    spec = grids.GridSpec.from_axes(grids.Axis("x", 0, 1, 3), grids.Axis("y", 0, 2, 3),
                                    grids.Axis("psi", -np.pi, np.pi, 4, True))
    g = grids.ValueGrid.filled(spec, np.arange(36.0))
    path = tmp_path / "g.eqcb"
    grids.save(g, path)
    out = tmp_path / "slice.csv"
    assert run(capsys, "export", path, "--slice", "psi=0", "--out", out)[0] == 0
    rows = list(csv.reader(out.open()))
    assert rows[0] == ["x", "y", "value", "provenance"] and len(rows) == 10
    with pytest.warns(UserWarning):
        assert run(capsys, "export", path, "--slice", "psi=0.2", "--out", out)[0] == 0
    assert run(capsys, "export", path, "--slice", "theta=0", "--out", out)[0] == 2
    assert run(capsys, "export", path, "--slice", "psi", "--out", out)[0] == 2


def test_simulate(capsys, small_si):
    _, sym, _ = small_si
    code, out, _ = run(capsys, "simulate", SI, "--grid", sym, "--simulate.n_runs", "3",
                       "--simulate.duration", "3")
    rep = json.loads(out)
    assert rep["n_runs"] == 3
    assert code == (0 if rep["passed"] else 1)


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "eqcbf", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("synth-direct", "synth-sym", "synth-equi", "check", "compare", "bench", "export", "simulate"):
        assert cmd in res.stdout
