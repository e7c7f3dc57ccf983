"""
CBFs beyond symmetric constraints: a base CBF ``b`` known near a set M is
swept along a constraint boundary by a scalar-parameter transform ``D(.; s)``.

* ``b_s(x) = b(D(x; s))``
* full knowledge:    ``B(x) = max_{s in P} b_s(x)``
* partial knowledge: ``B(x) = max_{s in S(x)} b_s(x)`` with
  ``S(x) = {s | D(x; s) in M}``
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .constraints import make_constraint, probe_box
from .errors import (ConservativenessViolated, EmptyParamSet, NaNCell, OutOfDomain,
                     OutsideKnownRegion, OutsideMHat, ShiftConditionFailed)
from .grids import EXPLICIT, FAILED, INFERRED, Axis, GridSpec, ValueGrid, interpolate
from .solver import make_horizon, solve_points, synthesis_metadata
from .transforms import (ParametricDiffeomorphism, ParamSet, _boundary_shift, corner_curve, ellipse_curve,
                         polyline_curve)

INVPHI = (np.sqrt(5.0) - 1.0) / 2.0


@dataclass
class BaseCBF:
    """Partially known CBF ``b`` with its region of knowledge."""

    evaluator: Callable
    known_region: Callable
    epsilon_M: float
    grid: Optional[ValueGrid] = None
    info: dict = field(default_factory=dict)

    def __call__(self, x):
        return self.evaluator(x)


def halfplane_base_from_grid(grid, segment, epsilon_M):
    """Base CBF for a wall with normal ``+e1``: values on an (X, psi) grid.

    The value is invariant along the wall, so ``y`` is ignored by the
    evaluator. ``segment = (x_lo, x_hi)`` is M on the ``y = 0`` axis.
    """
    lo, hi = segment

    def evaluator(x):
        x = np.asarray(x, float)
        return interpolate(grid, np.stack([x[..., 0], x[..., 2]], -1))

    def known(x):
        x = np.asarray(x, float)
        dx = np.maximum(np.maximum(lo - x[..., 0], x[..., 0] - hi), 0.0)
        return np.hypot(dx, x[..., 1]) <= epsilon_M + 1e-12

    return BaseCBF(evaluator, known, epsilon_M, grid, dict(segment=(lo, hi)))


def closed_form_base(fn, known=None, epsilon_M=np.inf):
    """Base CBF from a closed-form function (known everywhere unless restricted)."""
    if known is None:
        def known(x):
            return np.ones(np.shape(x)[:-1], dtype=bool)
    return BaseCBF(fn, known, epsilon_M)


@dataclass
class ShiftFamily:
    """Scalar-parameter transform with M, resolver and shift tolerances.

    ``m_membership`` decides ``y in M`` for transformed states ``y``;
    ``residual`` (optional) is a scalar function ``g(x, s)`` whose roots in
    ``s`` are the candidates for ``S(x)``, with ``m_membership`` filtering
    the rest of the M conditions.
    """

    diffeo: ParametricDiffeomorphism
    m_membership: Callable
    residual: Optional[Callable] = None
    closed_form: Optional[Callable] = None
    n_sigma: int = 256
    eps_sigma: Optional[float] = None
    delta: Optional[float] = None
    periodic: bool = False
    m_sampler: Optional[Callable] = None
    info: dict = field(default_factory=dict)

    @property
    def interval(self):
        ps = self.diffeo.param_set
        if ps.kind == "none":
            return 0.0, 0.0
        return float(ps.lo[0]), float(ps.hi[0])

    def sigma_grid(self, n=None):
        lo, hi = self.interval
        n = self.n_sigma if n is None else n
        if hi < lo:
            raise EmptyParamSet("parameter interval is empty")
        if hi == lo:
            return np.array([lo])
        if self.periodic:
            return lo + (hi - lo) * np.arange(n) / n
        return np.linspace(lo, hi, n)

    @property
    def step(self):
        lo, hi = self.interval
        return (hi - lo) / (self.n_sigma if self.periodic else max(self.n_sigma - 1, 1))

    def eps_of_sigma(self, sigma=None):
        return 2.0 * self.step if self.eps_sigma is None else self.eps_sigma

    def apply(self, x, sigma):
        s = np.asarray(sigma, float)
        return self.diffeo.apply(x, s[..., None])

    def membership_M_sigma(self, x, sigma):
        return np.asarray(self.m_membership(self.apply(x, sigma)), bool)

    def resolve(self, x):
        """``S(x)`` for a single state, sorted ascending."""
        r = self.resolve_many(np.atleast_2d(x))[0]
        return r[~np.isnan(r)]

    def resolve_many(self, xs, n_bisect=40):
        """Padded array ``(len(xs), K)`` of resolved parameters (NaN padding)."""
        xs = np.atleast_2d(np.asarray(xs, float))
        if self.closed_form is not None:
            cand = np.atleast_2d(self.closed_form(xs))
            if cand.shape[0] != len(xs):
                cand = cand.T
        else:
            cand = self._bracket_roots(xs, n_bisect)
        ok = ~np.isnan(cand)
        if np.any(ok):
            rows, cols = np.nonzero(ok)
            member = self.membership_M_sigma(xs[rows], cand[rows, cols])
            bad = np.zeros_like(ok)
            bad[rows[~member], cols[~member]] = True
            cand = np.where(bad, np.nan, cand)
        cand = np.sort(cand, axis=1)
        keep = ~np.all(np.isnan(cand), axis=0)
        cand = cand[:, keep] if np.any(keep) else cand[:, :1]
        return cand

    def _bracket_roots(self, xs, n_bisect):
        g = self.residual
        grid = self.sigma_grid()
        lo, hi = self.interval
        if self.periodic:
            nodes = np.concatenate([grid, [hi]])
        else:
            nodes = grid
        vals = g(xs[:, None, :], nodes[None, :])  # (B, S)
        a, b = vals[:, :-1], vals[:, 1:]
        exact = a == 0
        change = (np.sign(a) * np.sign(b) < 0)
        B = len(xs)
        rows, cols = np.nonzero(change)
        left = nodes[cols].copy()
        right = nodes[cols + 1].copy()
        fl = a[rows, cols].copy()
        X = xs[rows]
        for _ in range(n_bisect):
            mid = 0.5 * (left + right)
            fm = g(X, mid)
            go_left = np.sign(fm) == np.sign(fl)
            left = np.where(go_left, mid, left)
            fl = np.where(go_left, fm, fl)
            right = np.where(go_left, right, mid)
        roots = 0.5 * (left + right)
        erows, ecols = np.nonzero(exact)
        all_rows = np.concatenate([rows, erows])
        all_vals = np.concatenate([roots, nodes[ecols]])
        if len(all_rows) == 0:
            return np.full((B, 1), np.nan)
        counts = np.bincount(all_rows, minlength=B)
        K = int(counts.max())
        out = np.full((B, K), np.nan)
        order = np.argsort(all_rows, kind="stable")
        r_sorted = all_rows[order]
        v_sorted = all_vals[order]
        start = np.concatenate([[0], np.cumsum(counts)[:-1]])
        pos = np.arange(len(r_sorted)) - start[r_sorted]
        out[r_sorted, pos] = v_sorted
        if self.periodic:
            out = np.where(out >= hi, out - (hi - lo), out)
        return out


def boundary_family(curve, nu_range, sigma_range=None, n_sigma=256, m_tol=1e-7, sigma0=0.0,
                    closed_form=None, name="boundary_shift"):
    """Shift family moving the normal segment ``p(s0) + nu n(s0)`` along a boundary.

    ``nu_range = (nu_lo, nu_hi)`` bounds the signed normal offset of M from
    the boundary point ``p(s0)``.
    """
    D = _boundary_shift(curve, sigma0, *(sigma_range or (None, None)), name=name)
    p0 = curve.point(sigma0)
    phi0 = float(curve.normal_angle(sigma0))
    n0 = np.array([np.cos(phi0), np.sin(phi0)])
    t0 = np.array([-n0[1], n0[0]])
    nu_lo, nu_hi = nu_range

    def m_membership(y):
        d = y[..., :2] - p0
        nu = d @ n0
        return (np.abs(d @ t0) <= m_tol * (1 + np.abs(nu))) & (nu >= nu_lo - m_tol) & (nu <= nu_hi + m_tol)

    def residual(x, s):
        # tangential offset of x from the boundary point p(s0 + s), in the rotated frame
        s = np.asarray(s, float)
        q = x[..., :2] - curve.point(sigma0 + s)
        phi = curve.normal_angle(sigma0 + s)
        return -np.sin(phi) * q[..., 0] + np.cos(phi) * q[..., 1]

    lo, hi = float(D.param_set.lo[0]), float(D.param_set.hi[0])
    periodic = curve.period is not None and np.isclose(hi - lo, curve.period)
    return ShiftFamily(D, m_membership, residual, closed_form, n_sigma, periodic=periodic,
                       info=dict(nu_range=(nu_lo, nu_hi), p0=p0.tolist(), n0=n0.tolist()))


def ellipse_family(a, b, delta_a=None, eps_in=None, n_sigma=256):
    """Shift family for the ellipse ``x^2/a^2 + y^2/b^2 = 1``.

    M is ``{x in [0, a + delta_a], y = 0}`` (normal offsets ``[-a, delta_a]``
    from ``p(0) = (a, 0)``).
    """
    delta_a = 0.5 * a if delta_a is None else float(delta_a)
    curve = ellipse_curve(a, b)
    closed = None
    if np.isclose(a, b):
        def closed(xs):
            s = np.mod(np.arctan2(xs[:, 1], xs[:, 0]), 2 * np.pi)
            return s[:, None]
    fam = boundary_family(curve, (-a, delta_a), (0.0, 2 * np.pi), n_sigma, closed_form=closed,
                          name="ellipse_boundary_shift")
    fam.info.update(a=a, b=b, delta_a=delta_a)
    return fam


def corner_family(p0, n1, n2, nu_range=(-3.0, 3.0), n_sigma=256):
    """Pivot family for a corner: M is the segment ``p0 + nu n1``; the
    parameter sweeps from ``n1`` to ``n2``."""
    n1 = np.asarray(n1, float) / np.linalg.norm(n1)
    n2 = np.asarray(n2, float) / np.linalg.norm(n2)
    turn = float(np.arctan2(n1[0] * n2[1] - n1[1] * n2[0], n1 @ n2))
    lo, hi = (0.0, turn) if turn >= 0 else (turn, 0.0)
    curve = corner_curve(p0, n1)
    phi1 = float(np.arctan2(n1[1], n1[0]))
    p0 = np.asarray(p0, float)

    def closed(xs):
        d = xs[:, :2] - p0
        ang = np.arctan2(d[:, 1], d[:, 0]) - phi1
        s1 = np.mod(ang - lo + np.pi, 2 * np.pi) - np.pi + lo
        s2 = np.mod(ang + np.pi - lo + np.pi, 2 * np.pi) - np.pi + lo
        out = np.stack([s1, s2], -1)
        return np.where((out >= lo - 1e-12) & (out <= hi + 1e-12), np.clip(out, lo, hi), np.nan)

    fam = boundary_family(curve, nu_range, (lo, hi), n_sigma, closed_form=closed, name="corner_pivot")
    fam.info.update(turn=turn)
    return fam


def polyline_family(vertices, nu_range, n_sigma=256):
    curve = polyline_curve(vertices)
    fam = boundary_family(curve, nu_range, (0.0, curve.period), n_sigma, name="polyline_boundary_shift")
    return fam


def translation_family(state_dim, axis=0, lo=0.0, hi=1.0, box=None, n_sigma=256):
    """``D(x; s) = x - s e_axis`` with M the whole space.

    ``box = (lo, hi)`` is where M is sampled for the shift-condition check.
    """
    e = np.zeros(state_dim)
    e[axis] = 1.0
    D = ParametricDiffeomorphism(
        f"translate_e{axis}", state_dim, ParamSet.interval(lo, hi),
        lambda x, p: x - p[..., :1] * e, lambda x, p: x + p[..., :1] * e,
        lambda x, p: np.broadcast_to(np.eye(state_dim), np.shape(x)[:-1] + (state_dim, state_dim)))
    box = box or (-np.ones(state_dim), np.ones(state_dim))

    def everywhere(y):
        return np.ones(np.shape(y)[:-1], bool)

    def sampler(rng, n):
        return rng.uniform(box[0], box[1], size=(n, state_dim))

    return ShiftFamily(D, everywhere, n_sigma=n_sigma, m_sampler=sampler, info=dict(axis=axis))


# ----------------------------------------------------------------------------
# constructions


def b_sigma(base, family, x, sigma, check_known=True):
    """``b(D(x; s))``; raises :class:`OutsideKnownRegion` off the known region."""
    y = family.apply(np.asarray(x, float), sigma)
    if check_known and not np.all(base.known_region(y)):
        raise OutsideKnownRegion("D(x; s) lies outside the region where b is known")
    v = base.evaluator(y)
    return float(v) if np.ndim(v) == 0 else v


def _b_or_nan(base, ys, check_known=True):
    shape = ys.shape[:-1]
    flat = ys.reshape(-1, ys.shape[-1])
    out = np.full(len(flat), np.nan)
    ok = np.asarray(base.known_region(flat), bool) if check_known else np.ones(len(flat), bool)
    if np.any(ok):
        try:
            out[ok] = base.evaluator(flat[ok])
        except (OutOfDomain, NaNCell):
            idx = np.flatnonzero(ok)
            for k in idx:
                try:
                    out[k] = base.evaluator(flat[k])
                except (OutOfDomain, NaNCell):
                    pass
    return out.reshape(shape)


def B_full_many(base, family, xs, require_known=True, include=None, refine=True, n_golden=30):
    """``max_s b(D(x; s))`` on the uniform parameter grid plus one golden-section
    refinement around the grid argmax. Ties go to the smallest parameter.

    ``include`` adds per-point candidate parameters (array ``(len(xs), K)``,
    NaN padded). Parameters whose image leaves the known region are skipped
    when ``require_known``. Returns NaN where no parameter is usable.
    """
    xs = np.atleast_2d(np.asarray(xs, float))
    grid = family.sigma_grid()
    if grid.size == 0:
        raise EmptyParamSet("empty parameter grid")
    S = np.broadcast_to(grid, (len(xs), len(grid)))
    if include is not None:
        S = np.concatenate([S, np.atleast_2d(include)], axis=1)
    ys = family.apply(xs[:, None, :], np.where(np.isnan(S), grid[0], S))
    vals = _b_or_nan(base, ys, require_known)
    vals = np.where(np.isnan(S), np.nan, vals)
    best = np.nanmax(np.where(np.isnan(vals), -np.inf, vals), axis=1)
    if refine and len(grid) > 2:
        gvals = np.where(np.isnan(vals[:, :len(grid)]), -np.inf, vals[:, :len(grid)])
        k = np.argmax(gvals, axis=1)
        lo_i = np.clip(k - 1, 0, len(grid) - 1)
        hi_i = np.clip(k + 1, 0, len(grid) - 1)
        a, b = grid[lo_i].copy(), grid[hi_i].copy()
        c = b - INVPHI * (b - a)
        d = a + INVPHI * (b - a)

        def f(s):
            y = family.apply(xs, s)
            v = _b_or_nan(base, y[:, None, :], require_known)[:, 0]
            return np.where(np.isnan(v), -np.inf, v)

        fc, fd = f(c), f(d)
        for _ in range(n_golden):
            left = fc >= fd  # ties keep the smaller parameter
            a_new = np.where(left, a, c)
            b_new = np.where(left, d, b)
            probe = np.where(left, b_new - INVPHI * (b_new - a_new), a_new + INVPHI * (b_new - a_new))
            fp = f(probe)
            c, d = np.where(left, probe, d), np.where(left, c, probe)
            fc, fd = np.where(left, fp, fd), np.where(left, fc, fp)
            a, b = a_new, b_new
        best = np.maximum(best, np.maximum(fc, fd))
    return np.where(np.isfinite(best), best, np.nan)


def B_full(base, family, x, **kw):
    x = np.asarray(x, float)
    if family.interval[1] < family.interval[0]:
        raise EmptyParamSet("parameter interval is empty")
    v = B_full_many(base, family, np.atleast_2d(x), **kw)
    return float(v[0]) if x.ndim == 1 else v


def B_partial_many(base, family, xs, return_sigma=False):
    """``max_{s in S(x)} b(D(x; s))`` per point; NaN outside M-hat."""
    xs = np.atleast_2d(np.asarray(xs, float))
    S = family.resolve_many(xs)
    ys = family.apply(xs[:, None, :], np.where(np.isnan(S), 0.0, S))
    vals = _b_or_nan(base, ys, True)
    vals = np.where(np.isnan(S), np.nan, vals)
    filled = np.where(np.isnan(vals), -np.inf, vals)
    k = np.argmax(filled, axis=1)  # first maximum -> smallest parameter (S is sorted)
    best = filled[np.arange(len(xs)), k]
    best = np.where(np.isfinite(best), best, np.nan)
    if return_sigma:
        sig = np.where(np.isnan(best), np.nan, S[np.arange(len(xs)), k])
        return best, sig, S
    return best


def B_partial(base, family, x):
    """Partial-knowledge construction at one state; :class:`OutsideMHat` if
    no parameter maps ``x`` into M with known ``b``."""
    v = B_partial_many(base, family, np.atleast_2d(x))[0]
    if np.isnan(v):
        raise OutsideMHat("no admissible parameter maps the state into M")
    return float(v)


# ----------------------------------------------------------------------------
# conditions and diagnostics


@dataclass
class ShiftReport:
    worst_violation: float
    n_checked: int
    n_violations: int
    coverage_ok: bool
    n_coverage_failures: int
    passed: bool
    worst_sample: Optional[dict] = None

    def to_dict(self):
        return dict(worst_violation=self.worst_violation, n_checked=self.n_checked,
                    n_violations=self.n_violations, coverage_ok=self.coverage_ok,
                    n_coverage_failures=self.n_coverage_failures, passed=self.passed,
                    verdict="pass" if self.passed else "fail")


def sample_M(family, rng, n, psi_range=(-np.pi, np.pi)):
    """Random states in M (normal segment at ``p(s0)``, any heading)."""
    nu_lo, nu_hi = family.info["nu_range"]
    p0 = np.asarray(family.info["p0"])
    n0 = np.asarray(family.info["n0"])
    nu = rng.uniform(nu_lo, nu_hi, n)
    psi = rng.uniform(*psi_range, n)
    return np.column_stack([p0 + nu[:, None] * n0, psi])


def check_shift_condition(base, family, sigma_samples=None, x_samples_per_sigma=20,
                          dsigma_grid=None, m_samples=None, seed=0, tol=1e-9):
    """Verify ``b(D(x; s)) >= b(D(x; s + ds))`` for ``x in M_s``, ``|ds| < eps``,
    and that ``D(M_s; s + ds)`` stays in the known region.

    ``m_samples`` (states in M) default to random draws via :func:`sample_M`;
    the states checked are their preimages ``D^-1(m; s)``.
    """
    rng = np.random.default_rng(seed)
    if sigma_samples is None:
        lo, hi = family.interval
        sigma_samples = rng.uniform(lo, hi, 16)
    sigma_samples = np.atleast_1d(np.asarray(sigma_samples, float))
    eps = family.eps_of_sigma()
    if dsigma_grid is None:
        dsigma_grid = np.linspace(-eps, eps, 9)[1:-1]
    dsigma_grid = np.atleast_1d(np.asarray(dsigma_grid, float))
    worst = -np.inf
    worst_sample = None
    n_checked = n_viol = n_cov = 0
    for s in sigma_samples:
        if m_samples is not None:
            m = m_samples
        elif family.m_sampler is not None:
            m = family.m_sampler(rng, x_samples_per_sigma)
        else:
            m = sample_M(family, rng, x_samples_per_sigma)
        x = family.diffeo.inverse(m, np.array([s]))
        b0 = _b_or_nan(base, family.apply(x, np.full(len(x), s))[:, None, :], True)[:, 0]
        for ds in dsigma_grid:
            y = family.apply(x, np.full(len(x), s + ds))
            known = np.asarray(base.known_region(y), bool)
            n_cov += int(np.count_nonzero(~known))
            b1 = _b_or_nan(base, y[:, None, :], False)[:, 0]
            ok = ~np.isnan(b0) & ~np.isnan(b1)
            v = (b1 - b0)[ok]
            n_checked += int(ok.sum())
            n_viol += int(np.count_nonzero(v > tol))
            if v.size and v.max() > worst:
                k = int(np.flatnonzero(ok)[np.argmax(v)])
                worst = float(v.max())
                worst_sample = dict(sigma=float(s), dsigma=float(ds), x=x[k].tolist(), m=m[k].tolist())
    worst = 0.0 if not np.isfinite(worst) else worst
    passed = (n_viol == 0) and (n_cov == 0)
    return ShiftReport(worst, n_checked, n_viol, n_cov == 0, n_cov, passed, worst_sample)


def superlevel_agreement(base, family, probes, n_dense=2048):
    """Agreement of ``{B_partial >= 0}`` with the union over a dense parameter
    sweep of ``{x in M_s | b_s(x) >= 0}``."""
    probes = np.atleast_2d(probes)
    B = B_partial_many(base, family, probes)
    in_C = ~np.isnan(B) & (B >= 0)
    lo, hi = family.interval
    dense = np.linspace(lo, hi, n_dense, endpoint=not family.periodic)
    step = dense[1] - dense[0] if len(dense) > 1 else 1.0
    union = np.zeros(len(probes), bool)
    near = np.zeros(len(probes), bool)
    for s in dense:
        y = family.apply(probes, np.full(len(probes), s))
        # membership of a dense sweep needs a tolerance of one sweep step on the
        # tangential coordinate
        d = y[:, :2] - np.asarray(family.info["p0"])
        n0 = np.asarray(family.info["n0"])
        t0 = np.array([-n0[1], n0[0]])
        nu = d @ n0
        nu_lo, nu_hi = family.info["nu_range"]
        lateral = np.abs(d @ t0)
        inM = (lateral <= step * (np.abs(nu) + 1.0)) & (nu >= nu_lo) & (nu <= nu_hi)
        if np.any(inM):
            v = _b_or_nan(base, y[inM][:, None, :], True)[:, 0]
            union[np.flatnonzero(inM)[~np.isnan(v) & (v >= 0)]] = True
            near[np.flatnonzero(inM)[~np.isnan(v) & (np.abs(v) < 0.05)]] = True
    agree = in_C == union
    return dict(agreement=float(agree.mean()), n=len(probes),
                disagreements_near_boundary=int(np.count_nonzero(~agree & near)),
                disagreements=int(np.count_nonzero(~agree)))


def continuity_diagnostic(base, family, probes, radius=1e-3, seed=0, slack=1.5):
    """Difference quotients of ``B_partial`` on nearby pairs against the
    bound ``L_b (L_Dx + L_Ds L_ds)`` estimated from samples."""
    rng = np.random.default_rng(seed)
    probes = np.atleast_2d(probes)
    B0, s0, _ = B_partial_many(base, family, probes, return_sigma=True)
    dx = rng.standard_normal(probes.shape)
    dx *= radius / np.linalg.norm(dx, axis=1, keepdims=True)
    x1 = probes + dx
    B1, s1, _ = B_partial_many(base, family, x1, return_sigma=True)
    ok = ~np.isnan(B0) & ~np.isnan(B1)
    q = np.abs(B1 - B0)[ok] / radius
    # Lipschitz constants estimated from the same samples
    y0 = family.apply(probes[ok], s0[ok])
    y0b = family.apply(probes[ok] + dx[ok], s0[ok])
    y0s = family.apply(probes[ok], s0[ok] + radius)
    b_a = _b_or_nan(base, y0[:, None], False)[:, 0]
    e = rng.standard_normal(y0.shape)
    e *= radius / np.linalg.norm(e, axis=1, keepdims=True)
    b_b = _b_or_nan(base, (y0 + e)[:, None], False)[:, 0]
    L_b = np.nanmax(np.abs(b_b - b_a)) / radius if np.any(~np.isnan(b_b - b_a)) else 0.0
    L_Dx = np.max(np.linalg.norm(y0b - y0, axis=1)) / radius if ok.any() else 0.0
    L_Ds = np.max(np.linalg.norm(y0s - y0, axis=1)) / radius if ok.any() else 0.0
    same = ok & (np.abs(s1 - s0) < 0.5)
    L_dsig = np.max(np.abs(s1 - s0)[same]) / radius if np.any(same) else 0.0
    bound = L_b * (L_Dx + L_Ds * L_dsig) * slack
    frac = float(np.mean(q <= bound + 1e-9)) if q.size else 1.0
    return dict(max_quotient=float(q.max()) if q.size else 0.0, bound=float(bound),
                fraction_within=frac, n_pairs=int(ok.sum()),
                L_b=float(L_b), L_Dx=float(L_Dx), L_Ds=float(L_Ds), L_dsigma=float(L_dsig))


def disjointness_probe(family, rng=None, n=2000):
    """Fraction of states in ``M_s`` that also lie in ``M_{s + step}``."""
    rng = np.random.default_rng(0) if rng is None else rng
    lo, hi = family.interval
    s = rng.uniform(lo, hi - family.step, n)
    m = sample_M(family, rng, n)
    x = family.diffeo.inverse(m, s[:, None])
    both = family.membership_M_sigma(x, s + family.step)
    return float(np.mean(both))


# ----------------------------------------------------------------------------
# pipeline


@dataclass
class PipelineResult:
    base: BaseCBF
    family: ShiftFamily
    grid: Optional[ValueGrid]
    shift_report: ShiftReport
    report: dict

    def B(self, xs):
        return B_partial_many(self.base, self.family, xs)


def compute_halfplane_base(system, wall_x, segment, epsilon_M, spec_kwargs, cfg, n_x=None, n_psi=24,
                           cell=None, workers=1):
    """Solve the pointwise problem for the wall ``h(x) = x - wall_x`` on an
    ``(X, psi)`` grid covering ``segment`` widened by ``epsilon_M``."""
    hw = make_constraint("half_plane", dict(n=(1.0, 0.0), x_plane=(wall_x, 0.0)))
    lo, hi = segment
    xlo, xhi = lo - epsilon_M, hi + epsilon_M
    if n_x is None:
        step = cell if cell is not None else 0.25
        n_x = int(np.ceil((xhi - xlo) / step)) + 1
    gspec = GridSpec.from_axes(Axis("x", xlo, xhi, n_x), Axis("psi", -np.pi, np.pi, n_psi, periodic=True))
    spec = make_horizon(hw, system, **spec_kwargs)
    pts = gspec.points()
    states = np.column_stack([pts[:, 0], np.zeros(len(pts)), pts[:, 1]])
    t0 = time.perf_counter()
    res = solve_points(system, hw, spec, cfg, states, np.arange(len(states)), workers=workers)
    vals = np.array([r.value for r in res])
    prov = np.where(np.isnan(vals), FAILED, EXPLICIT).astype(np.uint8)
    g = ValueGrid(gspec, vals, prov, synthesis_metadata(system, hw, spec, cfg, dict(role="base")))
    g.timings["explicit_seconds"] = time.perf_counter() - t0
    return halfplane_base_from_grid(g, segment, epsilon_M), hw, spec


def materialize(base, family, out_spec, metadata=None):
    """``B_partial`` on every lattice point (failed outside M-hat)."""
    t0 = time.perf_counter()
    pts = out_spec.points()
    vals = B_partial_many(base, family, pts)
    prov = np.where(np.isnan(vals), FAILED, INFERRED).astype(np.uint8)
    g = ValueGrid(out_spec, vals, prov, dict(metadata or {}))
    g.timings["inferred_seconds"] = time.perf_counter() - t0
    return g


def check_inside_constraint(B_values, h_values, tol=1e-6):
    """Number of probes labelled safe (``B >= 0``) that violate ``h >= -tol``."""
    B_values = np.asarray(B_values)
    safe = ~np.isnan(B_values) & (B_values >= 0)
    return int(np.count_nonzero(safe & (np.asarray(h_values) < -tol)))


def run_pipeline(system, constraint, pipeline, cfg, out_spec=None, n_probes=10000, seed=0,
                 abort_on_failure=True, workers=1):
    """Steps: conservative wall, base CBF on M, shift family, shift condition,
    materialization and a Monte-Carlo check of ``C subset H``.

    ``pipeline`` keys: ``kind`` (ellipse | corner | convex_polyline) and
    shape parameters, ``T``, ``n_segments``, ``substeps``, ``delta``,
    ``gamma``, ``delta_a``, ``epsilon_M``, ``cell``, ``n_psi``, ``n_sigma``.
    """
    kind = pipeline["kind"]
    rng = np.random.default_rng(seed)
    cell = float(pipeline.get("cell", 0.25))
    eps_M = float(pipeline.get("epsilon_M", 2 * cell))
    n_sigma = int(pipeline.get("n_sigma", 256))
    spec_kwargs = dict(T=float(pipeline.get("T", 8.0)), n_segments=int(pipeline.get("n_segments", 16)),
                       substeps=int(pipeline.get("substeps", 2)), gamma=pipeline.get("gamma"),
                       delta=pipeline.get("delta"))
    report = dict(kind=kind)
    # step 1: conservative half-plane and the base CBF in a frame where M lies on y = 0
    if kind == "ellipse":
        a, b = float(pipeline["a"]), float(pipeline["b"])
        da = float(pipeline.get("delta_a", 0.5 * a))
        touch = np.array([a, 0.0])
        family = ellipse_family(a, b, da, n_sigma=n_sigma)
        segment = (0.0, a + da)
        wall_x = a
        frame = None
    elif kind == "corner":
        n1 = np.asarray(pipeline.get("n1", (1.0, 0.0)), float)
        n2 = np.asarray(pipeline.get("n2", (0.0, 1.0)), float)
        c1, c2 = float(pipeline.get("c1", 0.0)), float(pipeline.get("c2", 0.0))
        A = np.vstack([n1, n2])
        p0 = np.linalg.solve(A, -np.array([c1, c2]))
        nu = (-float(pipeline.get("nu_in", 2.0)), float(pipeline.get("nu_out", 4.0)))
        family = corner_family(p0, n1, n2, nu, n_sigma)
        touch = p0
        frame = (p0, n1 / np.linalg.norm(n1))
        segment = nu
        wall_x = 0.0
    elif kind == "convex_polyline":
        V = np.asarray(pipeline["vertices"], float)
        nu = (-float(pipeline.get("nu_in", 0.5)), float(pipeline.get("nu_out", 3.0)))
        family = polyline_family(V, nu, n_sigma)
        touch = np.asarray(family.info["p0"])
        frame = (touch, np.asarray(family.info["n0"]))
        segment = nu
        wall_x = 0.0
    else:
        raise ValueError(f"unknown pipeline kind '{kind}'")
    n0 = np.asarray(family.info["n0"])
    h_tilde = make_constraint("half_plane", dict(n=n0, x_plane=touch))
    probes_h = _probe_states(constraint, rng, n_probes, system.state_dim)
    gap = constraint(probes_h) - h_tilde(probes_h)
    if gap.min() < -1e-9:
        raise ConservativenessViolated(f"half-plane exceeds h by {-gap.min():.3g}")
    report["h_tilde"] = dict(n=n0.tolist(), x_plane=touch.tolist())

    base_local, hw, spec = compute_halfplane_base(system, wall_x, segment, eps_M, spec_kwargs, cfg,
                                                  n_psi=int(pipeline.get("n_psi", 24)), cell=cell,
                                                  workers=workers)
    base = _framed_base(base_local, frame)
    report["base_points"] = int(base_local.grid.spec.size)
    report["explicit_seconds"] = base_local.grid.timings.get("explicit_seconds", 0.0)
    # step 3: shift condition
    shift = check_shift_condition(base, family, seed=seed)
    report["shift_condition"] = shift.to_dict()
    if not shift.passed and abort_on_failure:
        raise ShiftConditionFailed(
            f"shift condition violated: worst {shift.worst_violation:.3g} over "
            f"{shift.n_violations}/{shift.n_checked} checks, coverage failures {shift.n_coverage_failures}",
            shift)
    # step 4: materialize and check C subset H
    grid = materialize(base, family, out_spec, dict(pipeline=kind)) if out_spec is not None else None
    Bp = B_partial_many(base, family, probes_h)
    report["n_probes"] = int(len(probes_h))
    report["n_defined"] = int(np.count_nonzero(~np.isnan(Bp)))
    report["n_safe"] = int(np.count_nonzero(~np.isnan(Bp) & (Bp >= 0)))
    report["c_subset_h_violations"] = check_inside_constraint(Bp, constraint(probes_h))
    if grid is not None:
        grid.timings["explicit_seconds"] = report["explicit_seconds"]
    return PipelineResult(base, family, grid, shift, report)


def _framed_base(base, frame):
    """Express a base CBF computed for the wall ``x = 0`` in the frame of M.

    ``frame = (p0, n0)``: M lies on ``p0 + nu n0``; ``None`` keeps the wall
    frame (used by the ellipse, whose M already lies on the x-axis).
    """
    if frame is None:
        return base
    p0, n0 = frame
    phi = float(np.arctan2(n0[1], n0[0]))
    c, s = np.cos(phi), np.sin(phi)

    def to_local(x):
        x = np.asarray(x, float)
        d = x[..., :2] - p0
        X = c * d[..., 0] + s * d[..., 1]
        Y = -s * d[..., 0] + c * d[..., 1]
        psi = x[..., 2] - phi
        return np.stack([X, Y, psi], -1)

    def evaluator(x):
        return base.evaluator(to_local(x))

    def known(x):
        return base.known_region(to_local(x))

    return BaseCBF(evaluator, known, base.epsilon_M, base.grid, dict(base.info, frame=(p0.tolist(), n0.tolist())))


def _probe_states(constraint, rng, n, state_dim):
    lo, hi = probe_box(constraint)
    pos = rng.uniform(lo, hi, size=(n, 2))
    if state_dim == 2:
        return pos
    return np.column_stack([pos, rng.uniform(-np.pi, np.pi, n)])
