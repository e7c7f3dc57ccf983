"""
Pointwise evaluation of the reachability CBF

    H_T(x0) = max_u  min_{t in [0, T]}  h(x(t)) - gamma t
              s.t.   x(theta) in F for some theta in [0, T]

by single shooting over piecewise-constant input schedules and a
cross-entropy search. Many initial states are optimized at once; each point
draws from its own generator seeded by ``(rng_seed, point_seed)`` so results do
not depend on how points are batched or distributed over workers.
"""

from __future__ import annotations

import os
import time
import warnings
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from itertools import product
from typing import Optional

import multiprocessing as mp
import numpy as np

from .constraints import TerminalSet, default_delta, make_terminal_set
from .errors import BadGrid
from .grids import EXPLICIT, FAILED, GridSpec, ValueGrid, config_hash
from .systems import rollout


@dataclass(frozen=True)
class HorizonSpec:
    """Horizon ``T``, control discretization, decay rate ``gamma`` and terminal set."""

    T: float
    n_segments: int
    terminal: TerminalSet
    gamma: Optional[float] = None
    substeps: int = 4
    worst_case_disturbance: bool = False

    def __post_init__(self):
        if self.T <= 0:
            raise ValueError("horizon T must be positive")
        if self.n_segments < 1:
            raise ValueError("n_segments must be at least 1")
        if self.gamma is None:
            object.__setattr__(self, "gamma", self.terminal.delta / (2.0 * self.T))
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        if self.gamma > self.terminal.delta / self.T + 1e-12:
            warnings.warn(f"gamma={self.gamma:g} exceeds delta/T={self.terminal.delta / self.T:g}")

    @property
    def dt(self):
        return self.T / self.n_segments

    def to_dict(self):
        return dict(T=self.T, n_segments=self.n_segments, gamma=self.gamma, substeps=self.substeps,
                    delta=self.terminal.delta, terminal=self.terminal.description,
                    worst_case_disturbance=self.worst_case_disturbance)


def make_horizon(constraint, system, T, n_segments=20, gamma=None, delta=None, substeps=4,
                 worst_case_disturbance=False):
    """Horizon with the default terminal set for ``system``."""
    F = make_terminal_set(constraint, system, delta if delta is not None else default_delta(constraint))
    return HorizonSpec(T, n_segments, F, gamma, substeps, worst_case_disturbance)


@dataclass(frozen=True)
class OptimizerConfig:
    n_iterations: int = 20
    population_size: int = 48
    elite_fraction: float = 0.15
    n_restarts: int = 2
    init_stddev: Optional[tuple] = None
    rng_seed: int = 0
    infeasibility_penalty_weight: float = 10.0
    smoothing: float = 0.2
    min_stddev_fraction: float = 1e-3
    warm_start: bool = True

    def __post_init__(self):
        if self.population_size < 4:
            raise ValueError("population_size must be at least 4")
        if not 0 < self.elite_fraction <= 0.5:
            raise ValueError("elite_fraction must lie in (0, 0.5]")
        if self.n_iterations < 1 or self.n_restarts < 1:
            raise ValueError("n_iterations and n_restarts must be positive")

    @property
    def n_elite(self):
        return max(2, int(np.ceil(self.elite_fraction * self.population_size)))

    def to_dict(self):
        d = asdict(self)
        d["init_stddev"] = None if self.init_stddev is None else list(self.init_stddev)
        return d


@dataclass
class SolveResult:
    value: float
    best_inputs: np.ndarray
    feasible: bool
    evaluations: int
    theta_index: int
    history: list = field(default_factory=list)


# ----------------------------------------------------------------------------
# objective


def evaluate_candidates(system, constraint, spec, x0, inputs, penalty_weight=10.0):
    """Objectives of many schedules.

    Parameters
    ----------
    x0 : array (..., n)
    inputs : array (..., N, m), broadcast against ``x0``
        Schedules are projected onto the input set first.

    Returns
    -------
    objective, feasible, theta_index : arrays of shape ``(...)``
        ``objective`` is ``min_k h(x_k) - gamma t_k`` for feasible candidates
        and that minimum minus ``penalty_weight`` times the smallest terminal
        violation otherwise. ``theta_index`` is the first sample in F (or -1).
    """
    U = system.input_set.project(np.asarray(inputs, dtype=float))
    x0 = np.asarray(x0, dtype=float)
    x0 = np.broadcast_to(x0, U.shape[:-2] + (system.state_dim,))
    if spec.worst_case_disturbance and system.disturbance is not None:
        cases = list(system.disturbance.vertices())
    else:
        cases = [None]
    obj = feas = theta = None
    for d in cases:
        dd = None if d is None else np.broadcast_to(d, U.shape[:-2] + (len(d),))
        o, f, th = _evaluate_once(system, constraint, spec, x0, U, dd, penalty_weight)
        if obj is None:
            obj, feas, theta = o, f, th
        else:
            worse = o < obj
            obj = np.minimum(obj, o)
            theta = np.where(worse, th, theta)
            feas = feas & f
    return obj, feas, theta


def _evaluate_once(system, constraint, spec, x0, U, d, w):
    times, states = rollout(system, x0, U, spec.dt, spec.substeps, d)
    with np.errstate(invalid="ignore", over="ignore"):
        hv = constraint(states) - spec.gamma * times
        run = np.min(hv, axis=-1)
        viol = spec.terminal.violation(states)
    finite = np.all(np.isfinite(states), axis=(-1, -2))
    inF = viol <= 0.0
    feasible = np.any(inF, axis=-1) & finite
    theta = np.where(feasible, np.argmax(inF, axis=-1), -1)
    penal = run - w * np.min(viol, axis=-1)
    obj = np.where(feasible, run, penal)
    obj = np.where(finite & np.isfinite(obj), obj, -np.inf)
    return obj, feasible, theta


def evaluate_candidate(system, constraint, spec, x0, inputs, penalty_weight=10.0):
    """Objective and feasibility of one schedule ``inputs`` (N, m) from ``x0``."""
    o, f, _ = evaluate_candidates(system, constraint, spec, x0, inputs, penalty_weight)
    return float(o), bool(f)


# ----------------------------------------------------------------------------
# optimizer


def warm_start_schedules(system, n_segments):
    """Constant schedules at every combination of per-input {low, mid, high}
    levels, plus the projection of zero."""
    levels = system.input_set.levels()
    combos = np.array(list(product(*levels)), dtype=float)
    combos = np.concatenate([combos, system.input_set.project(np.zeros((1, system.input_dim)))])
    combos = np.unique(system.input_set.project(combos), axis=0)
    return np.repeat(combos[:, None, :], n_segments, axis=1)


def point_seed_of(x0):
    """Stable 32-bit seed from the bytes of a state."""
    return zlib.crc32(np.ascontiguousarray(np.asarray(x0, dtype=np.float64)).tobytes())


def solve_batch(system, constraint, spec, cfg, x0s, point_seeds):
    """Cross-entropy search for a batch of initial states.

    The arithmetic for each point only touches that point's rows, so a
    point's result is the same whatever batch it is solved in.
    """
    x0s = np.atleast_2d(np.asarray(x0s, dtype=float))
    B = len(x0s)
    N, m = spec.n_segments, system.input_dim
    P, E = cfg.population_size, cfg.n_elite
    lo, hi = system.input_set.bounding_box
    span = hi - lo
    std0 = 0.5 * span if cfg.init_stddev is None else np.asarray(cfg.init_stddev, dtype=float)
    std_min = cfg.min_stddev_fraction * np.maximum(span, 1e-12)
    rngs = [np.random.default_rng([int(cfg.rng_seed), int(s)]) for s in point_seeds]
    warm = warm_start_schedules(system, N) if cfg.warm_start else np.zeros((0, N, m))
    warm = warm[: P - 1]
    w = cfg.infeasibility_penalty_weight

    best_obj = np.full(B, -np.inf)
    best_U = np.broadcast_to(system.input_set.project(0.5 * (lo + hi)), (B, N, m)).copy()
    best_feas = np.zeros(B, dtype=bool)
    best_theta = np.full(B, -1)
    history = [[] for _ in range(B)]
    evaluations = 0
    for r in range(cfg.n_restarts):
        if r == 0:
            mean = np.broadcast_to(system.input_set.project(0.5 * (lo + hi)), (B, N, m)).copy()
        else:
            mean = np.stack([g.uniform(lo, hi, size=(N, m)) for g in rngs])
        std = np.broadcast_to(std0, (B, N, m)).copy()
        for it in range(cfg.n_iterations):
            noise = np.stack([g.standard_normal((P, N, m)) for g in rngs])
            pop = mean[:, None] + std[:, None] * noise
            k0 = 0
            if np.isfinite(best_obj).any() or r > 0 or it > 0:
                pop[:, 0] = best_U
                k0 = 1
            if it == 0 and len(warm):
                k1 = min(P, k0 + len(warm))
                pop[:, k0:k1] = warm[: k1 - k0]
            pop = system.input_set.project(pop)
            obj, feas, theta = evaluate_candidates(system, constraint, spec, x0s[:, None, :], pop, w)
            evaluations += P
            order = np.argsort(-obj, axis=1, kind="stable")
            top = order[:, 0]
            rows = np.arange(B)
            improved = obj[rows, top] > best_obj
            best_obj = np.where(improved, obj[rows, top], best_obj)
            best_U = np.where(improved[:, None, None], pop[rows, top], best_U)
            best_feas = np.where(improved, feas[rows, top], best_feas)
            best_theta = np.where(improved, theta[rows, top], best_theta)
            for b in range(B):
                history[b].append(float(best_obj[b]))
            elite = np.take_along_axis(pop, order[:, :E, None, None], axis=1)
            a = cfg.smoothing
            mean = a * mean + (1 - a) * elite.mean(axis=1)
            std = np.maximum(a * std + (1 - a) * elite.std(axis=1), std_min)
    results = []
    for b in range(B):
        value = best_obj[b] if np.isfinite(best_obj[b]) else np.nan
        results.append(SolveResult(float(value), best_U[b].copy(), bool(best_feas[b]),
                                   evaluations, int(best_theta[b]), history[b]))
    return results


def solve_point(system, constraint, spec, cfg, x0, point_seed=None) -> SolveResult:
    """Approximate ``H_T(x0)``; deterministic given ``cfg.rng_seed`` and ``x0``."""
    x0 = np.asarray(x0, dtype=float)
    seed = point_seed_of(x0) if point_seed is None else point_seed
    return solve_batch(system, constraint, spec, cfg, x0[None], [seed])[0]


def solve_points(system, constraint, spec, cfg, x0s, point_seeds=None, chunk_size=32, workers=1):
    """Solve many points; returns the list of :class:`SolveResult`.

    Points are grouped into fixed chunks by index, so the outcome is
    independent of ``workers``.
    """
    x0s = np.atleast_2d(np.asarray(x0s, dtype=float))
    if point_seeds is None:
        point_seeds = [point_seed_of(x) for x in x0s]
    chunks = [(k, min(k + chunk_size, len(x0s))) for k in range(0, len(x0s), chunk_size)]
    job = (system, constraint, spec, cfg, x0s, list(point_seeds))
    if workers <= 1 or len(chunks) <= 1:
        out = [_run_chunk_with(job, c) for c in chunks]
    else:
        global _JOB
        _JOB = job
        try:
            ctx = mp.get_context("fork")
            with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as ex:
                out = list(ex.map(_run_chunk, chunks))
        finally:
            _JOB = None
    return [r for chunk in out for r in chunk]


_JOB = None


def _run_chunk(bounds):
    return _run_chunk_with(_JOB, bounds)


def _run_chunk_with(job, bounds):
    system, constraint, spec, cfg, x0s, seeds = job
    a, b = bounds
    try:
        return solve_batch(system, constraint, spec, cfg, x0s[a:b], seeds[a:b])
    except Exception:
        # isolate the failing point(s)
        out = []
        for k in range(a, b):
            try:
                out.extend(solve_batch(system, constraint, spec, cfg, x0s[k:k + 1], seeds[k:k + 1]))
            except Exception:
                n = spec.n_segments
                out.append(SolveResult(np.nan, np.full((n, system.input_dim), np.nan), False, 0, -1))
        return out


def default_workers():
    try:
        return max(1, int(os.environ.get("EQCBF_WORKERS", "1")))
    except ValueError:
        return 1


def synthesis_metadata(system, constraint, spec, cfg, extra=None):
    meta = dict(system=system.name, system_params=_plain(system.params),
                constraint=constraint.kind, constraint_params=_plain(constraint.params),
                horizon=spec.to_dict(), optimizer=cfg.to_dict())
    if extra:
        meta.update(extra)
    meta["config_hash"] = config_hash(meta)
    return meta


def _plain(d):
    out = {}
    for k, v in dict(d).items():
        if callable(v):
            continue
        if isinstance(v, np.ndarray):
            v = v.tolist()
        out[str(k)] = v
    return out


def compute_grid(system, constraint, spec, cfg, grid_spec, workers=1, chunk_size=32,
                 metadata=None) -> ValueGrid:
    """Solve every lattice point of ``grid_spec`` (provenance explicit).

    Per-point seeds are the row-major point indices. Failed points are stored
    as NaN with provenance failed; ``metadata['n_failed']`` counts them.
    """
    if not isinstance(grid_spec, GridSpec) or grid_spec.size == 0:
        raise BadGrid("grid specification is empty")
    pts = grid_spec.points()
    t0 = time.perf_counter()
    res = solve_points(system, constraint, spec, cfg, pts, np.arange(len(pts)), chunk_size, workers)
    elapsed = time.perf_counter() - t0
    vals = np.array([r.value for r in res], dtype=float)
    prov = np.where(np.isnan(vals), FAILED, EXPLICIT).astype(np.uint8)
    meta = synthesis_metadata(system, constraint, spec, cfg, metadata)
    meta["n_failed"] = int(np.count_nonzero(prov == FAILED))
    meta["n_infeasible"] = int(sum(not r.feasible for r in res))
    grid = ValueGrid(grid_spec, vals, prov, meta)
    grid.timings["explicit_seconds"] = elapsed
    return grid


def reach_diagnostic(results, spec):
    """Warn when sampled points fail to reach F within the horizon."""
    bad = [i for i, r in enumerate(results) if not r.feasible]
    if bad:
        warnings.warn(f"{len(bad)} of {len(results)} points did not reach the terminal set "
                      f"within T={spec.T:g}; consider a longer horizon")
    return len(bad)
