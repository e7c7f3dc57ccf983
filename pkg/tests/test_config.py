import numpy as np
import pytest

from eqcbf.config import load_config, parse_axes, parse_number, parse_params, parse_value, split_overrides
from eqcbf.errors import ConfigError

TEXT = """
[problem]
system = bicycle
system_params = L=1.0 v_min=0.5 v_max=1.0 zeta_max=deg(20)
constraint = circle
constraint_params = r=3.0   # trailing comment

[horizon]
T = 8.0
n_segments = 16

[optimizer]
n_iterations = 5
population_size = 16

[grid]
axes = x:-8:8:33 y:-8:8:33 psi:-pi:pi:24:p
"""


@pytest.mark.parametrize("text,value", [("pi", np.pi), ("-pi/2", -np.pi / 2), ("2*pi", 2 * np.pi),
                                         ("deg(90)", np.pi / 2), ("1e-3", 1e-3), ("3", 3)])
def test_parse_number(text, value):
    assert parse_number(text) == pytest.approx(value)


@pytest.mark.parametrize("text", ["pi(", "__import__('os')", "x + 1", "1/0"])
def test_parse_number_rejects(text):
    with pytest.raises(ConfigError):
        parse_number(text)


def test_parse_values_and_params():
    assert parse_value("yes") is True and parse_value("off") is False
    assert parse_value("none") is None
    assert parse_value("integrator_rotation") == "integrator_rotation"
    assert parse_value("7") == 7 and isinstance(parse_value("7"), int)
    p = parse_params("a=2 b=0.5 n=1,0 name=half_plane")
    assert p == {"a": 2, "b": 0.5, "n": [1, 0], "name": "half_plane"}
    with pytest.raises(ConfigError):
        parse_params("a=1 oops")


def test_parse_axes():
    spec = parse_axes("x:-1:1:5 psi:-pi:pi:8:p")
    assert spec.names == ["x", "psi"] and spec.shape == (5, 8)
    assert spec.axes[1].periodic and spec.axes[1].lo == pytest.approx(-np.pi)
    for bad in ["x:0:1", "x:0:1:3:q", "x:0:1:three", ""]:
        with pytest.raises(ConfigError):
            parse_axes(bad)


def test_load_and_build():
    cfg = load_config(text=TEXT)
    sys_ = cfg.system()
    assert sys_.name == "bicycle" and sys_.params["zeta_max"] == pytest.approx(np.deg2rad(20))
    h = cfg.constraint()
    assert h(np.array([5.0, 0.0, 0.0])) == pytest.approx(2.0)
    spec = cfg.horizon(h, sys_)
    assert spec.T == 8.0 and spec.n_segments == 16
    assert cfg.optimizer().population_size == 16
    assert cfg.grid().size == 33 * 33 * 24


def test_overrides_win():
    cfg = load_config(text=TEXT, overrides={"horizon.T": "4", "grid.axes": "x:0:1:2"})
    assert cfg.value("horizon", "T") == 4
    assert cfg.grid().size == 2
    with pytest.raises(ConfigError):
        load_config(text=TEXT, overrides={"T": "4"})


def test_split_overrides():
    assert split_overrides(["--horizon.T", "4", "--grid.axes=x:0:1:3"]) == {"horizon.T": "4",
                                                                            "grid.axes": "x:0:1:3"}
    for bad in (["--horizon.T"], ["positional"], ["--noseg", "1"]):
        with pytest.raises(ConfigError):
            split_overrides(bad)


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.ini")
    bad = tmp_path / "bad.ini"
    bad.write_text("no section header\n")
    with pytest.raises(ConfigError):
        load_config(bad)
    cfg = load_config(text=TEXT, overrides={"horizon.tau": "1"})
    with pytest.raises(ConfigError):
        cfg.horizon(cfg.constraint(), cfg.system())
    cfg = load_config(text=TEXT, overrides={"optimizer.learning_rate": "1"})
    with pytest.raises(ConfigError):
        cfg.optimizer()
    with pytest.raises(ConfigError):
        load_config(text="[problem]\n").system()


def test_workers(monkeypatch):
    cfg = load_config(text=TEXT)
    assert cfg.workers(3) == 3
    monkeypatch.setenv("EQCBF_WORKERS", "2")
    assert cfg.workers() == 2
    assert load_config(text=TEXT, overrides={"run.workers": "5"}).workers() == 5
