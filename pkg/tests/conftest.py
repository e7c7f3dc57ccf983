from pathlib import Path

import numpy as np
import pytest

from eqcbf.systems import make_named_system


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def bicycle():
    return make_named_system("bicycle", dict(L=1.0, v_min=0.5, v_max=1.0, zeta_max=np.deg2rad(20)))


@pytest.fixture(scope="session")
def single_integrator():
    return make_named_system("single_integrator", dict(u_norm_max=1.0))


CONFIGS = Path(__file__).resolve().parents[1] / "configs"


@pytest.fixture(scope="session")
def si_sym(tmp_path_factory):
    """Full single-integrator grid inferred from its M grid (shared across modules)."""
    from eqcbf.cli import run_symmetric
    from eqcbf.config import load_config

    cfg = load_config(CONFIGS / "single_integrator.ini")
    out = tmp_path_factory.mktemp("si") / "si_sym.eqcb"
    full, m_grid, c, timings = run_symmetric(cfg, 1, out)
    return dict(cfg=cfg, full=full, m_grid=m_grid, census=c, timings=timings, path=out)
