"""Benchmark row for the single integrator: solve on M, infer the
full grid, solve the full grid directly, and print one row.

Run from the repository root::

    python demos/benchmark_row.py [out_dir]
"""

import sys
from pathlib import Path

from eqcbf import grids
from eqcbf.cli import _markdown, run_direct, run_symmetric, table_row
from eqcbf.config import load_config

ROOT = Path(__file__).resolve().parents[1]


def main(out_dir="out/demo"):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = load_config(ROOT / "configs" / "single_integrator.ini")
    full, m_grid, c, timings = run_symmetric(cfg, 1, out / "si_sym.eqcb")
    direct, direct_s = run_direct(cfg, 1, out / "si_direct.eqcb")
    row = table_row("single integrator", cfg, c, timings, direct_s)
    cmp = grids.compare(full, direct)
    print(_markdown([row]))
    print(f"\ninferred vs direct: mean |dev| {cmp.mean_abs_dev:.2e}, max {cmp.max_abs_dev:.2e}")


if __name__ == "__main__":
    main(*sys.argv[1:])
