"""Symmetric synthesis for the kinematic bicycle around a circle, followed by
a Dini check, a few closed-loop runs and a psi = 0 CSV slice for plotting.

    python demos/bicycle_slice.py [out_dir]
"""

import sys
from pathlib import Path

import numpy as np

from eqcbf import grids
from eqcbf.cli import run_symmetric, start_states
from eqcbf.config import load_config
from eqcbf.verification import AlphaFunction, CBFCandidate, check_cbf_condition, nominal_toward, simulate_safe

ROOT = Path(__file__).resolve().parents[1]


def main(out_dir="out/demo"):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = load_config(ROOT / "configs" / "bicycle.ini")
    system, h = cfg.system(), cfg.constraint()
    full, m_grid, c, timings = run_symmetric(cfg, 1, out / "bicycle_sym.eqcb")
    print(f"explicit {c['explicit']} of {c['total']} cells ({100 * c['ratio']:.2f}%), "
          f"{timings['explicit_seconds']:.1f} s on M")

    cand = CBFCandidate.from_grid(full)
    rep = check_cbf_condition(cand, system, AlphaFunction(1.0), band=0.5)
    print(f"Dini pass fraction {rep.pass_fraction:.3f}, worst margin {rep.worst_margin:.3f}")

    rng = np.random.default_rng(0)
    nominal = nominal_toward(system, (0.0, 0.0))
    for x0 in start_states(cand, 5, 0.1, rng, margin=0.3):
        _, sim = simulate_safe(cand, system, AlphaFunction(1.0), x0, 10.0, 0.05, h, strict=False, nominal=nominal)
        print(f"  start {np.round(x0, 2)} -> min h {sim.min_h:.3f}")

    path = out / "bicycle_psi0.csv"
    grids.export_csv(full, path, {"psi": 0.0})
    print(f"wrote {path}")


if __name__ == "__main__":
    main(*sys.argv[1:])
