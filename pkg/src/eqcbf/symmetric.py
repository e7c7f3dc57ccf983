"""
Symmetry-based extension of a value grid from a subset M to the whole domain.

A chart consists of a transform ``D``, a parameter choice ``p(x)`` with
``D(x; p(x)) in M``, and a grid of values on M. Values elsewhere are read off
at the transformed point.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ChartInvariantViolated, NaNCell, OutOfDomain, OutsideL0
from .grids import EXPLICIT, FAILED, INFERRED, GridSpec, ValueGrid, interpolate
from .solver import compute_grid, solve_points, synthesis_metadata
from .transforms import (ParametricDiffeomorphism, ParamSet, make_named_transform,
                         mirror_position, rotate_vec, wrap_angle)

TWO_PI = 2.0 * np.pi


def _identity(x):
    return np.asarray(x, dtype=float)


@dataclass
class SymmetryChart:
    """Chart mapping the domain into M.

    ``m_coords`` maps states to the coordinates of ``m_grid`` and ``m_embed``
    maps grid coordinates back to states (both identity when M is a
    degenerate box of the state space).
    """

    m_grid: Optional[ValueGrid]
    diffeo: ParametricDiffeomorphism
    p_map: Callable
    membership_M: Callable
    m_coords: Callable = _identity
    m_embed: Callable = _identity
    region_L0: Optional[Callable] = None
    name: str = "chart"
    info: dict = field(default_factory=dict)

    def to_M(self, x):
        """``D(x; p(x))`` for states outside M, ``x`` itself inside."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        inside = np.asarray(self.membership_M(x), dtype=bool)
        out = x.copy()
        if np.any(~inside):
            xo = x[~inside]
            p = self.p_map(xo)
            out[~inside] = self.diffeo.apply(xo, p)
        return out, inside

    @property
    def clamp_tol(self):
        if self.m_grid is None:
            return 0.0
        return 0.5 * max(a.spacing for a in self.m_grid.axes)

    def with_grid(self, grid):
        return SymmetryChart(grid, self.diffeo, self.p_map, self.membership_M, self.m_coords,
                             self.m_embed, self.region_L0, self.name, dict(self.info))


def evaluate(chart, x):
    """Value at ``x`` read from M. Scalar for a single state, array for a batch.

    Raises :class:`OutsideL0` for the local variant and :class:`OutOfDomain`
    if the transformed point leaves the M grid by more than half a cell.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xs = np.atleast_2d(x)
    if chart.region_L0 is not None and not np.all(chart.region_L0(xs)):
        raise OutsideL0("state outside the local region L0")
    y, _ = chart.to_M(xs)
    v = interpolate(chart.m_grid, chart.m_coords(y), clamp_tol=chart.clamp_tol)
    v = np.atleast_1d(v)
    return float(v[0]) if single else v


def evaluate_or_nan(chart, xs):
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    try:
        return evaluate(chart, xs)
    except (OutOfDomain, NaNCell, OutsideL0):
        out = np.empty(len(xs))
        for k, x in enumerate(xs):
            try:
                out[k] = evaluate(chart, x)
            except (OutOfDomain, NaNCell, OutsideL0):
                out[k] = np.nan
        return out


def validate_chart(chart, samples, tol=None):
    """Check that ``D(x; p(x))`` lands inside the M grid and ``p(x)`` is admissible.

    Raises :class:`ChartInvariantViolated` with the worst offending sample.
    """
    xs = np.atleast_2d(np.asarray(samples, dtype=float))
    if chart.region_L0 is not None:
        xs = xs[np.asarray(chart.region_L0(xs), bool)]
    y, inside = chart.to_M(xs)
    outside = ~inside
    if np.any(outside) and chart.diffeo.param_set.dim > 0:
        ok = chart.diffeo.param_set.contains(chart.p_map(xs[outside]))
        if not np.all(ok):
            k = int(np.flatnonzero(~ok)[0])
            raise ChartInvariantViolated("p(x) outside the parameter set",
                                         xs[outside][k].tolist())
    if chart.m_grid is None:
        return 0.0
    c = chart.m_coords(y)
    excess = np.zeros(len(xs))
    for k, ax in enumerate(chart.m_grid.axes):
        if ax.periodic:
            continue
        half = 0.5 * ax.spacing if tol is None else tol
        if ax.count == 1:
            half = max(half, 1e-7 * (1 + abs(ax.lo)))
        e = np.maximum(ax.lo - c[:, k], c[:, k] - ax.hi) - half
        excess = np.maximum(excess, e)
    if np.any(excess > 0):
        k = int(np.argmax(excess))
        raise ChartInvariantViolated(f"D(x; p(x)) leaves the M grid by {excess[k]:.3g}",
                                     xs[k].tolist())
    return float(np.max(excess + 0.0)) if len(excess) else 0.0


def infer_full_grid(chart, full_spec: GridSpec, metadata=None) -> ValueGrid:
    """Fill a full grid from the chart.

    Cells coinciding with an explicitly computed M lattice point are tagged
    explicit; all others inferred; cells that cannot be evaluated failed.
    """
    t0 = time.perf_counter()
    pts = full_spec.points()
    y, _ = chart.to_M(pts)
    vals = evaluate_or_nan(chart, pts)
    prov = np.full(len(pts), INFERRED, dtype=np.uint8)
    prov[np.isnan(vals)] = FAILED
    on_lattice = _on_lattice(chart.m_grid, chart.m_coords(pts)) & np.asarray(chart.membership_M(pts), bool)
    prov[on_lattice & ~np.isnan(vals)] = EXPLICIT
    elapsed = time.perf_counter() - t0
    meta = dict(chart.m_grid.metadata)
    meta.update(dict(chart=chart.name, m_axes=chart.m_grid.spec.to_list()))
    if metadata:
        meta.update(metadata)
    grid = ValueGrid(full_spec, vals, prov, meta)
    grid.timings.update(chart.m_grid.timings)
    grid.timings["inferred_seconds"] = elapsed
    return grid


def _on_lattice(grid, c, tol=1e-9):
    ok = np.ones(len(c), dtype=bool)
    for k, ax in enumerate(grid.axes):
        if ax.count == 1:
            ok &= np.abs(c[:, k] - ax.lo) <= tol
            continue
        s = (c[:, k] - ax.lo) / ax.spacing
        if ax.periodic:
            s = np.mod(s, ax.count)
        else:
            ok &= (c[:, k] >= ax.lo - tol) & (c[:, k] <= ax.hi + tol)
        ok &= np.abs(s - np.round(s)) * ax.spacing <= tol
    return ok


def census(m_grid, full_grid):
    """Brute-force count of explicitly solved and total cells."""
    n_explicit = 0
    for tag in np.asarray(m_grid.provenance).ravel():
        n_explicit += int(tag == EXPLICIT)
    n_total = 0
    n_inferred_cells = 0
    for tag in np.asarray(full_grid.provenance).ravel():
        n_total += 1
        n_inferred_cells += int(tag == INFERRED)
    return dict(explicit=n_explicit, total=n_total, inferred=n_total - n_explicit,
                inferred_cells=n_inferred_cells, ratio=n_explicit / n_total)


def expected_ratio(m_spec, full_spec):
    """Counting formula: product of M axis counts over product of full counts."""
    return float(np.prod(m_spec.shape)) / float(np.prod(full_spec.shape))


# ----------------------------------------------------------------------------
# explicit computation on M


def compute_m_grid(system, constraint, spec, cfg, chart, m_spec, workers=1, subset=None,
                   chunk_size=32, metadata=None):
    """Solve the pointwise problem at the M lattice points.

    ``subset`` optionally restricts solving to grid points where the
    predicate (on states) holds; the rest are NaN/failed.
    """
    if chart.m_embed is _identity and subset is None:
        g = compute_grid(system, constraint, spec, cfg, m_spec, workers, chunk_size, metadata)
        return g
    coords = m_spec.points()
    states = chart.m_embed(coords)
    sel = np.ones(len(states), bool) if subset is None else np.asarray(subset(states), bool)
    vals = np.full(len(states), np.nan)
    t0 = time.perf_counter()
    idx = np.flatnonzero(sel)
    res = solve_points(system, constraint, spec, cfg, states[idx], idx, chunk_size, workers)
    vals[idx] = [r.value for r in res]
    prov = np.where(np.isnan(vals), FAILED, EXPLICIT).astype(np.uint8)
    meta = synthesis_metadata(system, constraint, spec, cfg, metadata)
    g = ValueGrid(m_spec, vals, prov, meta)
    g.timings["explicit_seconds"] = time.perf_counter() - t0
    return g


# ----------------------------------------------------------------------------
# named charts


def _rotation_param(center, phi0):
    def p_map(x):
        ang = np.arctan2(x[..., 1] - center[1], x[..., 0] - center[0])
        return wrap_angle(phi0 - ang)[..., None]

    return p_map


def _ray_membership(center, phi0, tol):
    d = np.array([np.cos(phi0), np.sin(phi0)])

    def member(x):
        q = x[..., :2] - center
        lateral = np.abs(q[..., 0] * d[1] - q[..., 1] * d[0])
        return (lateral <= tol) & (q @ d >= -tol)

    return member


def _rotate_mirror_diffeo(center, phi0, heading=True):
    """Rotation about ``center`` followed (if ``p[1] > 0.5``) by the reflection
    across the line through ``center`` at angle ``phi0``."""
    rho_line = phi0 - np.pi / 2

    def fwd(x, p):
        rho, m = p[..., 0], p[..., 1] > 0.5
        pos = rotate_vec(rho, x[..., :2] - center) + center
        mpos = mirror_position(pos, rho_line, center)
        pos = np.where(m[..., None], mpos, pos)
        if not heading:
            return pos
        psi = x[..., 2] + rho
        psi = np.where(m, 2 * phi0 - psi, psi)
        return np.concatenate([pos, psi[..., None]], axis=-1)

    def inv(y, p):
        rho, m = p[..., 0], p[..., 1] > 0.5
        pos = y[..., :2]
        pos = np.where(m[..., None], mirror_position(pos, rho_line, center), pos)
        pos = rotate_vec(-rho, pos - center) + center
        if not heading:
            return pos
        psi = np.where(m, 2 * phi0 - y[..., 2], y[..., 2]) - rho
        return np.concatenate([pos, psi[..., None]], axis=-1)

    pset = ParamSet.box([-np.pi, 0.0], [np.pi, 1.0])
    u_map = lambda u, p: np.where((p[..., 1] > 0.5)[..., None], u * np.array([1.0, -1.0]), u)  # noqa: E731
    return ParametricDiffeomorphism("rotate_mirror", 3 if heading else 2, pset, fwd, inv,
                                    input_map=u_map, input_inverse=u_map,
                                    periodic={2: (-np.pi, TWO_PI)} if heading else {},
                                    params=dict(center=center.tolist(), phi0=phi0))


def build_chart_named(case, m_grid=None, params=None, validate_samples=None) -> SymmetryChart:
    """Charts for the worked cases.

    ==========================  ===============================================
    pendulum_negation           M = {x2 >= -x1}, D(x) = -x
    bicycle_translation         half-plane (``n``, ``x_plane``); M is the normal
                                line, coordinates (x, y, psi) or (nu, psi)
    bicycle_rotation            circle centre (``cx``, ``cy``); M is the ray at
                                angle ``phi0`` (pi); ``mirror`` halves psi;
                                ``polar`` uses (r, phi, theta) coordinates
    bicycle_mirror              translation plus reflection for a half-plane,
                                M keeps headings with ``<heading, t> <= 0``
    linear_eigen                D_p = P diag(1, -1) P^-1, M = {(P^-1 x)_2 >= 0}
    integrator_rotation         rotation of ``blocks`` planar blocks (single /
                                double integrator) onto the ray at ``phi0``
    identity                    M is the whole domain
    ==========================  ===============================================

    If ``validate_samples`` (states) is given the chart invariants are
    checked eagerly and :class:`ChartInvariantViolated` is raised on failure.
    """
    p = dict(params or {})
    tol = float(p.get("tol", 1e-9))
    c = np.array([float(p.get("cx", 0.0)), float(p.get("cy", 0.0))])
    if case == "pendulum_negation":
        D = make_named_transform("linear", dict(Dp=-np.eye(2), Du=-np.eye(1)))
        chart = SymmetryChart(m_grid, D, lambda x: None,
                              lambda x: x[..., 0] + x[..., 1] >= -tol, name=case)
    elif case == "bicycle_translation":
        n = np.asarray(p.get("n", [1.0, 0.0]), float)
        n = n / np.linalg.norm(n)
        xp = np.asarray(p.get("x_plane", [0.0, 0.0]), float)
        t = np.array([n[1], -n[0]])  # R(-pi/2) n
        D = make_named_transform("translate", dict(normal=n, bound=float(p.get("bound", 1e6))))

        def p_map(x):
            s = (x[..., :2] - xp) @ t
            return -s[..., None] * t

        def member(x):
            return np.abs((x[..., :2] - xp) @ t) <= tol

        if p.get("reduced", False):
            def m_coords(x):
                return np.stack([(x[..., :2] - xp) @ n, x[..., 2]], -1)

            def m_embed(q):
                return np.concatenate([xp + q[..., :1] * n, q[..., 1:2]], -1)
        else:
            m_coords = m_embed = _identity
        chart = SymmetryChart(m_grid, D, p_map, member, m_coords, m_embed, name=case,
                              info=dict(n=n.tolist(), x_plane=xp.tolist()))
    elif case == "bicycle_mirror":
        n = np.asarray(p.get("n", [1.0, 0.0]), float)
        n = n / np.linalg.norm(n)
        xp = np.asarray(p.get("x_plane", [0.0, 0.0]), float)
        t = np.array([n[1], -n[0]])
        phi_n = float(np.arctan2(n[1], n[0]))
        D = _translate_mirror_diffeo(xp, t, phi_n)

        def p_map(x):
            s = (x[..., :2] - xp) @ t
            head = np.cos(x[..., 2]) * t[0] + np.sin(x[..., 2]) * t[1]
            return np.stack([-s, (head > tol).astype(float)], -1)

        def member(x):
            head = np.cos(x[..., 2]) * t[0] + np.sin(x[..., 2]) * t[1]
            return (np.abs((x[..., :2] - xp) @ t) <= tol) & (head <= tol)

        chart = SymmetryChart(m_grid, D, p_map, member, name=case,
                              info=dict(n=n.tolist(), x_plane=xp.tolist()))
    elif case == "bicycle_rotation":
        phi0 = float(p.get("phi0", np.pi))
        if p.get("polar", False):
            D = make_named_transform("polar_shift", {"lo": -TWO_PI, "hi": TWO_PI})

            def p_map(chi):
                return wrap_angle(phi0 - chi[..., 1])[..., None]

            def member(chi):
                return np.abs(wrap_angle(chi[..., 1] - phi0)) <= tol

            chart = SymmetryChart(m_grid, D, p_map, member, name=case, info=dict(phi0=phi0, polar=True))
        else:
            mirror = bool(p.get("mirror", False))
            on_ray = _ray_membership(c, phi0, tol)
            tdir = np.array([np.sin(phi0), -np.cos(phi0)])  # R(-pi/2) applied to the ray direction
            D = _rotate_mirror_diffeo(c, phi0)
            rot_p = _rotation_param(c, phi0)

            def p_map(x):
                r = rot_p(x)
                if not mirror:
                    return np.concatenate([r, np.zeros_like(r)], -1)
                psi = x[..., 2] + r[..., 0]
                head = np.cos(psi) * tdir[0] + np.sin(psi) * tdir[1]
                return np.concatenate([r, (head > tol).astype(float)[..., None]], -1)

            def member(x):
                ok = on_ray(x)
                if mirror:
                    head = np.cos(x[..., 2]) * tdir[0] + np.sin(x[..., 2]) * tdir[1]
                    ok &= head <= tol
                return ok

            def m_coords(y):
                # headings of M start at phi0 - 2 pi (mirror) or -pi; fold +pi onto that end
                lo = phi0 - TWO_PI if mirror else -np.pi
                y = np.array(y, dtype=float, copy=True)
                y[..., 2] = lo + np.mod(y[..., 2] - lo + 1e-9, TWO_PI) - 1e-9
                return y

            chart = SymmetryChart(m_grid, D, p_map, member, m_coords=m_coords, name=case,
                                  info=dict(center=c.tolist(), phi0=phi0, mirror=mirror))
    elif case == "integrator_rotation":
        phi0 = float(p.get("phi0", np.pi))
        blocks = int(p.get("blocks", 1))
        D = make_named_transform("linear", dict(kind="rotation", blocks=blocks,
                                                lo=-TWO_PI, hi=TWO_PI))
        rot_p = _rotation_param(np.zeros(2), phi0)
        chart = SymmetryChart(m_grid, D, rot_p, _ray_membership(np.zeros(2), phi0, tol),
                              name=case, info=dict(phi0=phi0, blocks=blocks))
    elif case == "linear_eigen":
        P = np.asarray(p.get("P", [[-1.0, 2.0], [3.0, 1.0]]), float)
        Pinv = np.linalg.inv(P)
        flip = np.asarray(p.get("p", [1.0, -1.0]), float)
        D = make_named_transform("linear", dict(P=P, values=[flip]))

        def member(x):
            return (x @ Pinv.T)[..., 1] >= -tol

        chart = SymmetryChart(m_grid, D, lambda x: np.broadcast_to(flip, x.shape[:-1] + (2,)),
                              member, lambda x: np.asarray(x) @ Pinv.T, lambda q: np.asarray(q) @ P.T,
                              name=case, info=dict(P=P.tolist(), p=flip.tolist()))
    elif case == "identity":
        dim = int(p.get("dim", 2))
        D = make_named_transform("linear", dict(Dp=np.eye(dim)))
        chart = SymmetryChart(m_grid, D, lambda x: None, lambda x: np.ones(x.shape[:-1], bool), name=case)
    else:
        raise ValueError(f"unknown chart case '{case}'")
    if "L0" in p:
        chart.region_L0 = p["L0"]
    if validate_samples is not None:
        validate_chart(chart, validate_samples)
    return chart


def _translate_mirror_diffeo(xp, t, phi_n):
    """Translation along ``t`` then (if ``p[1] > 0.5``) reflection across the normal line."""

    def fwd(x, p):
        s, m = p[..., 0], p[..., 1] > 0.5
        pos = x[..., :2] + s[..., None] * t
        mpos = pos - 2.0 * ((pos - xp) @ t)[..., None] * t
        pos = np.where(m[..., None], mpos, pos)
        psi = np.where(m, 2 * phi_n - x[..., 2], x[..., 2])
        return np.concatenate([pos, psi[..., None]], -1)

    def inv(y, p):
        s, m = p[..., 0], p[..., 1] > 0.5
        pos = y[..., :2]
        pos = np.where(m[..., None], pos - 2.0 * ((pos - xp) @ t)[..., None] * t, pos)
        pos = pos - s[..., None] * t
        psi = np.where(m, 2 * phi_n - y[..., 2], y[..., 2])
        return np.concatenate([pos, psi[..., None]], -1)

    pset = ParamSet.box([-1e6, 0.0], [1e6, 1.0])
    u_map = lambda u, p: np.where((p[..., 1] > 0.5)[..., None], u * np.array([1.0, -1.0]), u)  # noqa: E731
    return ParametricDiffeomorphism("translate_mirror", 3, pset, fwd, inv, input_map=u_map,
                                    input_inverse=u_map, periodic={2: (-np.pi, TWO_PI)})


def pair_deviation(system, constraint, spec, cfg, diffeo, states, params, workers=1, seed_offset=0):
    """Directly solve ``x`` and ``D(x; p)`` with independent seeds; return the
    absolute differences."""
    states = np.atleast_2d(np.asarray(states, float))
    images = diffeo.apply(states, params)
    n = len(states)
    seeds_a = seed_offset + np.arange(n)
    seeds_b = seed_offset + n + np.arange(n)
    ra = solve_points(system, constraint, spec, cfg, states, seeds_a, workers=workers)
    rb = solve_points(system, constraint, spec, cfg, images, seeds_b, workers=workers)
    va = np.array([r.value for r in ra])
    vb = np.array([r.value for r in rb])
    return np.abs(va - vb), va, vb
