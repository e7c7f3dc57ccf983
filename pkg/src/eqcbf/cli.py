"""
Command-line entry point.

Exit codes: 0 pass, 1 check failed, 2 usage or configuration error,
3 runtime failure (more than 1% of cells failed to solve).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import grids
from .config import load_config, parse_params, split_overrides
from .errors import (BadGrid, BadMagic, BadParam, BadShapeParam, ConfigError, DimMismatch,
                     EqcbfError, MissingParam, NoSafeInput, OutOfDomain, PreconditionError,
                     ShiftConditionFailed, TruncatedPayload, UnknownSystem, UnknownTransform,
                     VersionMismatch)

log = logging.getLogger("eqcbf")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2, 3
FAILURE_RATE_LIMIT = 0.01
CONFIG_ERRORS = (ConfigError, UnknownSystem, UnknownTransform, MissingParam, BadShapeParam, BadParam,
                 BadGrid, BadMagic, VersionMismatch, TruncatedPayload)


class UsageError(Exception):
    pass


def _emit(obj, path=None):
    text = json.dumps(obj, indent=2, sort_keys=True, default=_json_default)
    if path:
        Path(path).write_text(text + "\n")
    print(text)


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def timing_path(grid_path):
    return Path(str(grid_path) + ".timing.json")


def write_timing(grid_path, timings):
    timing_path(grid_path).write_text(json.dumps(timings, indent=2, sort_keys=True) + "\n")


def read_timing(grid_path):
    p = timing_path(grid_path)
    return json.loads(p.read_text()) if p.is_file() else {}


def _out_path(cfg, args, key="path"):
    out = getattr(args, "out", None) or cfg.get("output", key)
    if not out:
        raise ConfigError("no output path: pass --out or set [output] path")
    return out


def _failure_rate(grid):
    return float(np.count_nonzero(grid.provenance == grids.FAILED)) / grid.spec.size


def _problem(cfg):
    system = cfg.system()
    constraint = cfg.constraint()
    return system, constraint, cfg.horizon(constraint, system), cfg.optimizer()


# ----------------------------------------------------------------------------
# synthesis


def run_direct(cfg, workers, out):
    from .solver import compute_grid

    system, constraint, spec, opt = _problem(cfg)
    gspec = cfg.grid("grid")
    t0 = time.perf_counter()
    grid = compute_grid(system, constraint, spec, opt, gspec, workers=workers,
                        metadata=dict(mode="direct"))
    direct_s = time.perf_counter() - t0
    grids.save(grid, out)
    write_timing(out, dict(direct_seconds=direct_s, workers=workers, cells=gspec.size))
    return grid, direct_s


def cmd_synth_direct(args, cfg):
    out = _out_path(cfg, args)
    grid, secs = run_direct(cfg, cfg.workers(args.workers), out)
    rate = _failure_rate(grid)
    _emit(dict(path=out, cells=grid.spec.size, explicit=grid.counts()["explicit"],
               failed=grid.counts()["failed"], seconds=secs))
    return EXIT_RUNTIME if rate > FAILURE_RATE_LIMIT else EXIT_OK


def build_chart(cfg, m_grid=None):
    from .symmetric import build_chart_named

    name = cfg.require("m_grid", "chart")
    return build_chart_named(name, m_grid, parse_params(cfg.get("m_grid", "chart_params", "")))


def run_symmetric(cfg, workers, out):
    from .symmetric import census, compute_m_grid, infer_full_grid

    system, constraint, spec, opt = _problem(cfg)
    m_spec = cfg.grid("m_grid")
    full_spec = cfg.grid("grid")
    chart = build_chart(cfg)
    m_grid = compute_m_grid(system, constraint, spec, opt, chart, m_spec, workers=workers,
                            metadata=dict(mode="m_grid"))
    full = infer_full_grid(chart.with_grid(m_grid), full_spec, dict(mode="symmetric"))
    grids.save(full, out)
    m_path = Path(str(out) + ".m.eqcb")
    grids.save(m_grid, m_path)
    c = census(m_grid, full)
    timings = dict(explicit_seconds=m_grid.timings.get("explicit_seconds", 0.0),
                   inferred_seconds=full.timings.get("inferred_seconds", 0.0), workers=workers, **c)
    write_timing(out, timings)
    return full, m_grid, c, timings


def table_row(label, cfg, c, timings, direct_s=None):
    total_s = timings["explicit_seconds"] + timings["inferred_seconds"]
    row = dict(system=label, domain=cfg.get("grid", "axes"), M=cfg.get("m_grid", "axes"),
               explicit=c["explicit"], total=c["total"], ratio=f"{100 * c['ratio']:.2f}%",
               explicit_s=round(timings["explicit_seconds"], 4),
               inferred_s=round(timings["inferred_seconds"], 4), total_s=round(total_s, 4))
    if direct_s is not None:
        row["direct_s"] = round(direct_s, 4)
        row["time_ratio"] = f"{100 * total_s / direct_s:.2f}%" if direct_s > 0 else "n/a"
    return row


def cmd_synth_sym(args, cfg):
    out = _out_path(cfg, args)
    full, m_grid, c, timings = run_symmetric(cfg, cfg.workers(args.workers), out)
    row = table_row(cfg.get("problem", "system"), cfg, c, timings)
    print(_markdown([row]))
    _emit(dict(path=out, census=c, timings=timings))
    if _failure_rate(m_grid) > FAILURE_RATE_LIMIT:
        return EXIT_RUNTIME
    return EXIT_OK


def _pipeline_spec(cfg):
    spec = cfg.section_values("pipeline")
    if "kind" not in spec:
        raise ConfigError("missing [pipeline] kind")
    for key in ("T", "n_segments", "substeps", "gamma", "delta"):
        v = cfg.value("horizon", key)
        if v is not None:
            spec.setdefault(key, v)
    return spec


def cmd_synth_equi(args, cfg):
    from .equivariant import run_pipeline

    system, constraint = cfg.system(), cfg.constraint()
    out = _out_path(cfg, args)
    out_spec = cfg.grid("grid")
    try:
        res = run_pipeline(system, constraint, _pipeline_spec(cfg), cfg.optimizer(), out_spec,
                           n_probes=int(cfg.value("pipeline_check", "n_probes", 10000)),
                           abort_on_failure=not args.force, workers=cfg.workers(args.workers))
    except ShiftConditionFailed as exc:
        _emit(dict(error=str(exc), shift_condition=exc.report.to_dict()))
        return EXIT_FAIL
    grids.save(res.grid, out)
    write_timing(out, dict(res.grid.timings))
    _emit(dict(path=out, report=res.report))
    ok = res.shift_report.passed and res.report["c_subset_h_violations"] == 0
    return EXIT_OK if ok else EXIT_FAIL


# ----------------------------------------------------------------------------
# checks


def _domain(cfg, section, n):
    lo = cfg.value(section, "lo")
    hi = cfg.value(section, "hi")
    if lo is None or hi is None:
        return None
    lo = np.broadcast_to(np.asarray(lo, float), (n,))
    hi = np.broadcast_to(np.asarray(hi, float), (n,))
    return lo, hi


def cmd_check(args, cfg):
    from .transforms import check_equivariance, check_symmetry, make_named_transform

    what = args.what
    tol = float(cfg.value("check", "tol", 1e-4))
    n = int(cfg.value("check", "n_samples", 1000))
    seed = int(cfg.value("check", "seed", 0))
    if what in ("equivariance", "symmetry"):
        D = make_named_transform(cfg.require("check", "transform"),
                                 parse_params(cfg.get("check", "transform_params", "")))
        if what == "equivariance":
            system = cfg.system()
            rep = check_equivariance(system, D, tol, n, _domain(cfg, "check", system.state_dim), seed)
            out = rep.to_dict()
            passed = rep.passed and rep.strong
        else:
            constraint = cfg.constraint()
            rep = check_symmetry(constraint, D, tol, n, _domain(cfg, "check", D.state_dim), seed)
            out = rep.to_dict()
            passed = rep.passed
    elif what == "shift_condition":
        out, passed = _check_shift(cfg, seed)
    elif what == "cbf":
        out, passed = _check_cbf(cfg, args, seed)
    else:
        raise UsageError(f"unknown check '{what}'")
    out["check"] = what
    _emit(out, getattr(args, "report", None))
    return EXIT_OK if passed else EXIT_FAIL


def _check_shift(cfg, seed):
    from .equivariant import (check_shift_condition, closed_form_base, compute_halfplane_base,
                              ellipse_family, translation_family)

    family_kind = cfg.get("check", "family", "pipeline")
    if family_kind == "translate":
        n = int(cfg.value("check", "state_dim", 2))
        fam = translation_family(n, int(cfg.value("check", "axis", 0)),
                                 float(cfg.value("check", "sigma_lo", 0.0)),
                                 float(cfg.value("check", "sigma_hi", 1.0)))
        w = np.asarray(cfg.value("check", "base_weights", [1.0] + [0.0] * (n - 1)), float)
        base = closed_form_base(lambda x: x @ w)
    else:
        spec = _pipeline_spec(cfg)
        if spec["kind"] != "ellipse":
            raise ConfigError("shift_condition check from config supports the ellipse pipeline")
        a, b = float(spec["a"]), float(spec["b"])
        da = float(spec.get("delta_a", 0.5 * a))
        cell = float(spec.get("cell", 0.25))
        eps = float(spec.get("epsilon_M", 2 * cell))
        kw = dict(T=float(spec.get("T", 8.0)), n_segments=int(spec.get("n_segments", 16)),
                  substeps=int(spec.get("substeps", 2)), gamma=spec.get("gamma"), delta=spec.get("delta"))
        base, _, _ = compute_halfplane_base(cfg.system(), a, (0.0, a + da), eps, kw, cfg.optimizer(),
                                            n_psi=int(spec.get("n_psi", 24)), cell=cell,
                                            workers=cfg.workers())
        fam = ellipse_family(a, b, da, n_sigma=int(spec.get("n_sigma", 256)))
    rep = check_shift_condition(base, fam, seed=seed)
    return dict(rep.to_dict(), worst_sample=rep.worst_sample), rep.passed


def _candidate_grid(cfg, args):
    path = getattr(args, "grid", None) or cfg.get("check", "grid") or cfg.get("simulate", "grid")
    if not path:
        raise ConfigError("no grid given: pass --grid or set [check] grid")
    return grids.load(path)


def _check_cbf(cfg, args, seed):
    from .verification import AlphaFunction, CBFCandidate, check_cbf_condition

    grid = _candidate_grid(cfg, args)
    cand = CBFCandidate.from_grid(grid)
    rep = check_cbf_condition(cand, cfg.system(), AlphaFunction(float(cfg.value("check", "alpha", 1.0))),
                              band=float(cfg.value("check", "band", 0.5)),
                              n_states=int(cfg.value("check", "n_states", 1000)), seed=seed)
    print(f"pass fraction {rep.pass_fraction:.4f} over {rep.n_states} band states")
    return rep.to_dict(), rep.passed


# ----------------------------------------------------------------------------
# compare / bench / export / simulate


def cmd_compare(args, cfg=None):
    a, b = grids.load(args.a), grids.load(args.b)
    try:
        cmp = grids.compare(a, b)
    except DimMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    _emit(cmp.to_dict())
    if args.bound is not None and cmp.max_abs_dev > args.bound:
        return EXIT_FAIL
    return EXIT_OK


BENCH_COLUMNS = ["system", "domain", "M", "explicit", "total", "ratio", "explicit_s",
                 "inferred_s", "total_s", "direct_s", "time_ratio"]


def _markdown(rows):
    cols = [c for c in BENCH_COLUMNS if any(c in r for r in rows)]
    lines = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    for r in rows:
        lines.append("| " + " | ".join(str(r.get(c, "")) for c in cols) + " |")
    return "\n".join(lines)


def _csv(rows):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=BENCH_COLUMNS, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def bench_row(cfg, workers, recompute=False):
    """Benchmark row (counts and wall times); re-reads stored grids and timings when present."""
    direct_path = cfg.get("bench", "direct") or cfg.get("output", "direct")
    sym_path = cfg.get("bench", "sym") or cfg.get("output", "path")
    if not direct_path or not sym_path:
        raise ConfigError("bench needs [bench] direct and sym output paths")
    if recompute or not Path(sym_path).is_file() or not timing_path(sym_path).is_file():
        run_symmetric(cfg, workers, sym_path)
    if recompute or not Path(direct_path).is_file() or not timing_path(direct_path).is_file():
        run_direct(cfg, workers, direct_path)
    from .symmetric import census

    full = grids.load(sym_path)
    m_grid = grids.load(str(sym_path) + ".m.eqcb")
    c = census(m_grid, full)
    t_sym = read_timing(sym_path)
    t_dir = read_timing(direct_path)
    label = cfg.get("bench", "label") or cfg.get("problem", "system")
    row = table_row(label, cfg, c, t_sym, t_dir.get("direct_seconds"))
    direct = grids.load(direct_path)
    try:
        cmp = grids.compare(full, direct)
        row["mean_dev"], row["max_dev"] = cmp.mean_abs_dev, cmp.max_abs_dev
    except DimMismatch:
        pass
    return row


def cmd_bench(args, cfg=None):
    if not args.configs:
        print("error: bench needs at least one config", file=sys.stderr)
        return EXIT_USAGE
    rows = []
    for path in args.configs:
        c = load_config(path, overrides=args.overrides)
        rows.append(bench_row(c, c.workers(args.workers), args.recompute))
    text = _csv(rows) if args.format == "csv" else _markdown(rows) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_export(args, cfg=None):
    grid = grids.load(args.grid)
    fixed = {}
    for tok in args.slice or []:
        if "=" not in tok:
            raise UsageError(f"slice '{tok}' must be axis=value")
        k, v = tok.split("=", 1)
        from .config import parse_number

        fixed[k] = float(parse_number(v))
    unknown = set(fixed) - set(grid.spec.names)
    if unknown:
        raise UsageError(f"unknown axis name(s) {sorted(unknown)}; grid axes are {grid.spec.names}")
    g = grids.export_csv(grid, args.out, fixed)
    _emit(dict(path=args.out, axes=g.spec.names, rows=g.spec.size))
    return EXIT_OK


def cmd_simulate(args, cfg):
    from .verification import AlphaFunction, CBFCandidate, simulate_safe

    grid = _candidate_grid(cfg, args)
    cand = CBFCandidate.from_grid(grid)
    system, constraint = cfg.system(), cfg.constraint()
    alpha = AlphaFunction(float(cfg.value("simulate", "alpha", 1.0)))
    n_runs = int(cfg.value("simulate", "n_runs", 10))
    duration = float(cfg.value("simulate", "duration", 10.0))
    dt = float(cfg.value("simulate", "dt", 0.05))
    min_b = float(cfg.value("simulate", "min_candidate", 0.1))
    seed = int(cfg.value("simulate", "seed", 0))
    x0s = start_states(cand, n_runs, min_b, np.random.default_rng(seed), margin=float(
        cfg.value("simulate", "margin", 0.2)))
    nominal = None
    target = cfg.value("simulate", "nominal_target")
    if target is not None:
        from .verification import nominal_toward

        nominal = nominal_toward(system, target)
    runs, ok = [], True
    for x0 in x0s:
        try:
            _, rep = simulate_safe(cand, system, alpha, x0, duration, dt, constraint, seed=seed,
                                   strict=bool(cfg.value("simulate", "strict", False)), nominal=nominal)
            r = dict(x0=x0.tolist(), **rep.to_dict())
            ok &= rep.min_h >= -1e-2
        except (NoSafeInput, OutOfDomain) as exc:
            r = dict(x0=x0.tolist(), error=str(exc))
            ok = False
        runs.append(r)
    _emit(dict(runs=runs, passed=bool(ok), n_runs=len(runs)), getattr(args, "report", None))
    return EXIT_OK if ok else EXIT_FAIL


def start_states(candidate, n, min_value, rng, margin=0.2, max_draws=100_000):
    """Random states with ``candidate >= min_value`` at least ``margin`` (as a
    fraction of each axis) away from non-periodic grid edges."""
    axes = candidate.grid.spec.axes
    lo = np.array([a.lo for a in axes], float)
    hi = np.array([a.hi for a in axes], float)
    per = np.array([a.periodic for a in axes])
    inset = np.where(per, 0.0, margin * (hi - lo))
    lo, hi = lo + inset, hi - inset
    out, drawn = [], 0
    while len(out) < n and drawn < max_draws:
        x = rng.uniform(lo, hi, size=(256, len(lo)))
        drawn += 256
        b = candidate(x)
        out.extend(x[np.isfinite(b) & (b >= min_value)])
    if len(out) < n:
        raise PreconditionError(f"found only {len(out)} start states with candidate >= {min_value}")
    return np.array(out[:n])


# ----------------------------------------------------------------------------
# argument parsing


def build_parser():
    p = argparse.ArgumentParser(prog="eqcbf", description="Reachability CBF synthesis with symmetry reuse.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(name, help_):
        s = sub.add_parser(name, help=help_)
        s.add_argument("config", help="INI run configuration")
        s.add_argument("--workers", type=int, default=None, help="worker processes (default EQCBF_WORKERS or 1)")
        return s

    s = with_config("synth-direct", "solve every grid cell explicitly")
    s.add_argument("--out")
    s = with_config("synth-sym", "solve on M and infer the full grid through a symmetry chart")
    s.add_argument("--out")
    s = with_config("synth-equi", "boundary-shift construction from a base CBF on M")
    s.add_argument("--out")
    s.add_argument("--force", action="store_true", help="materialize even if the shift condition fails")
    s = with_config("check", "equivariance / symmetry / shift-condition / CBF checks")
    s.add_argument("--what", required=True, choices=["equivariance", "symmetry", "shift_condition", "cbf"])
    s.add_argument("--grid")
    s.add_argument("--report", help="also write the JSON report here")
    s = sub.add_parser("compare", help="deviation statistics of two grids")
    s.add_argument("a")
    s.add_argument("b")
    s.add_argument("--bound", type=float, default=None, help="exit 1 if the max deviation exceeds this")
    s = sub.add_parser("bench", help="benchmark rows from stored or recomputed runs")
    s.add_argument("configs", nargs="*")
    s.add_argument("--format", choices=["markdown", "csv"], default="markdown")
    s.add_argument("--out")
    s.add_argument("--workers", type=int, default=None)
    s.add_argument("--recompute", action="store_true")
    s = sub.add_parser("export", help="CSV export of a grid slice")
    s.add_argument("grid")
    s.add_argument("--slice", action="append", help="axis=value (repeatable)")
    s.add_argument("--out", required=True)
    s = with_config("simulate", "closed-loop runs with a greedy Dini controller")
    s.add_argument("--grid")
    s.add_argument("--report")
    return p


COMMANDS = {
    "synth-direct": cmd_synth_direct,
    "synth-sym": cmd_synth_sym,
    "synth-equi": cmd_synth_equi,
    "check": cmd_check,
    "compare": cmd_compare,
    "bench": cmd_bench,
    "export": cmd_export,
    "simulate": cmd_simulate,
}


def main(argv=None):
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = split_overrides(extra)
        args.overrides = overrides
        cfg = load_config(args.config, overrides=overrides) if hasattr(args, "config") else None
        return COMMANDS[args.command](args, cfg)
    except (CONFIG_ERRORS + (UsageError, KeyError, FileNotFoundError)) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except PreconditionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except EqcbfError as exc:
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME

if __name__ == "__main__":
    sys.exit(main())
