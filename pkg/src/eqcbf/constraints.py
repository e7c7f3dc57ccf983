"""
State constraints ``h(x) >= 0``, their conservative half-plane approximations
and terminal sets.

Shapes act on the planar position, which is taken from the state coordinates
listed in ``pos`` (default ``(0, 1)``). All evaluators are vectorized over
leading axes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.stats import qmc

from .errors import BadShapeParam, NotSupporting

NONHOLONOMIC = {"bicycle", "unicycle"}


@dataclass(frozen=True)
class ConstraintFunction:
    """Scalar constraint function; ``h(x) >= 0`` marks safe states."""

    h: Callable
    kind: str
    params: dict = field(default_factory=dict)
    lipschitz_hint: Optional[float] = None
    grad_pos: Optional[Callable] = None
    pos: tuple = (0, 1)
    radius_analog: float = 1.0

    def __call__(self, x):
        return self.h(np.asarray(x, dtype=float))

    def position_gradient(self, x, eps=1e-6):
        """Gradient of h with respect to the position coordinates."""
        x = np.asarray(x, dtype=float)
        if self.grad_pos is not None:
            return self.grad_pos(x)
        g = np.empty(x.shape[:-1] + (len(self.pos),))
        for k, i in enumerate(self.pos):
            e = np.zeros(x.shape[-1])
            e[i] = eps
            g[..., k] = (self.h(x + e) - self.h(x - e)) / (2 * eps)
        return g


def _vec(v, n=2, name="vector"):
    v = np.asarray(v, dtype=float).ravel()
    if v.shape != (n,):
        raise BadShapeParam(f"{name} must have {n} entries")
    return v


def _unit(v, name="normal"):
    v = np.asarray(v, dtype=float).ravel()
    nrm = np.linalg.norm(v)
    if not np.isfinite(nrm) or nrm == 0:
        raise BadShapeParam(f"{name} must be a nonzero finite vector")
    return v / nrm


def _positive(params, key, default=None):
    val = params.get(key, default)
    if val is None:
        raise BadShapeParam(f"missing shape parameter '{key}'")
    val = float(val)
    if not val > 0:
        raise BadShapeParam(f"'{key}' must be positive, got {val}")
    return val


def make_constraint(kind, params=None) -> ConstraintFunction:
    """Construct a catalogued constraint shape.

    Kinds and parameters: ``circle`` (cx, cy, r), ``ellipse`` (a, b, cx, cy),
    ``half_plane`` (n, x_plane), ``corner`` (n1, c1, n2, c2),
    ``rotated_ellipse_pendulum`` (a, b), ``segment`` (p0, p1),
    ``linear`` (w, C) acting on the full state, and ``custom_maxmin``
    (``op`` in {max, min} over a list ``pieces`` of ``(kind, params)``).
    """
    p = dict(params or {})
    pos = tuple(int(i) for i in p.pop("pos", (0, 1)))
    i, j = pos

    if kind == "circle":
        c = np.array([float(p.get("cx", 0.0)), float(p.get("cy", 0.0))])
        r = _positive(p, "r")

        def h(x):
            return np.hypot(x[..., i] - c[0], x[..., j] - c[1]) - r

        def grad(x):
            d = np.stack([x[..., i] - c[0], x[..., j] - c[1]], axis=-1)
            nrm = np.linalg.norm(d, axis=-1, keepdims=True)
            return d / np.maximum(nrm, 1e-300)

        return ConstraintFunction(h, kind, dict(cx=c[0], cy=c[1], r=r), 1.0, grad, pos, r)

    if kind == "ellipse":
        a, b = _positive(p, "a"), _positive(p, "b")
        c = np.array([float(p.get("cx", 0.0)), float(p.get("cy", 0.0))])

        def h(x):
            return ((x[..., i] - c[0]) / a) ** 2 + ((x[..., j] - c[1]) / b) ** 2 - 1.0

        def grad(x):
            return np.stack([2 * (x[..., i] - c[0]) / a**2, 2 * (x[..., j] - c[1]) / b**2], axis=-1)

        return ConstraintFunction(h, kind, dict(a=a, b=b, cx=c[0], cy=c[1]), None, grad, pos, min(a, b))

    if kind == "half_plane":
        n = _unit(_vec(p.get("n", (1.0, 0.0)), name="n"))
        xp = _vec(p.get("x_plane", (0.0, 0.0)), name="x_plane")

        def h(x):
            return n[0] * (x[..., i] - xp[0]) + n[1] * (x[..., j] - xp[1])

        def grad(x):
            return np.broadcast_to(n, x.shape[:-1] + (2,)).copy()

        return ConstraintFunction(h, kind, dict(n=n, x_plane=xp), 1.0, grad, pos, 1.0)

    if kind == "corner":
        n1 = _vec(p.get("n1", (1.0, 0.0)), name="n1")
        n2 = _vec(p.get("n2", (0.0, 1.0)), name="n2")
        c1, c2 = float(p.get("c1", 0.0)), float(p.get("c2", 0.0))
        if abs(n1[0] * n2[1] - n1[1] * n2[0]) < 1e-12:
            raise BadShapeParam("corner normals must be linearly independent")

        def h(x):
            h1 = n1[0] * x[..., i] + n1[1] * x[..., j] + c1
            h2 = n2[0] * x[..., i] + n2[1] * x[..., j] + c2
            return np.maximum(h1, h2)

        lip = float(max(np.linalg.norm(n1), np.linalg.norm(n2)))
        return ConstraintFunction(h, kind, dict(n1=n1, c1=c1, n2=n2, c2=c2), lip, None, pos, 1.0)

    if kind == "rotated_ellipse_pendulum":
        a, b = _positive(p, "a"), _positive(p, "b")

        def h(x):
            x1, x2 = x[..., 0], x[..., 1]
            return 1.0 - np.sqrt((x1 + x2) ** 2 / (2 * a**2) + (x2 - x1) ** 2 / (2 * b**2))

        return ConstraintFunction(h, kind, dict(a=a, b=b), 1.0 / min(a, b), None, (0, 1), 1.0)

    if kind == "segment":
        p0 = _vec(p.get("p0", (-1.0, 0.0)), name="p0")
        p1 = _vec(p.get("p1", (1.0, 0.0)), name="p1")
        d = p1 - p0
        dd = float(d @ d)
        if dd == 0:
            raise BadShapeParam("segment endpoints coincide")

        def h(x):
            q = np.stack([x[..., i], x[..., j]], axis=-1) - p0
            t = np.clip((q @ d) / dd, 0.0, 1.0)
            return np.linalg.norm(q - t[..., None] * d, axis=-1)

        return ConstraintFunction(h, kind, dict(p0=p0, p1=p1), 1.0, None, pos, 1.0)

    if kind == "linear":
        w = np.asarray(p.get("w"), dtype=float).ravel()
        C = float(p.get("C", 0.0))
        if w.size == 0 or not np.all(np.isfinite(w)):
            raise BadShapeParam("linear constraint needs a finite weight vector 'w'")

        def h(x):
            return np.asarray(x, dtype=float) @ w + C

        return ConstraintFunction(h, kind, dict(w=w, C=C), float(np.linalg.norm(w)), None, pos, 1.0)

    if kind == "custom_maxmin":
        op = p.get("op", "min")
        if op not in ("max", "min"):
            raise BadShapeParam("custom_maxmin 'op' must be 'max' or 'min'")
        pieces = [make_constraint(k, dict(kp, pos=pos)) for k, kp in p.get("pieces", [])]
        if not pieces:
            raise BadShapeParam("custom_maxmin needs at least one piece")
        red = np.maximum if op == "max" else np.minimum

        def h(x):
            out = pieces[0](x)
            for c in pieces[1:]:
                out = red(out, c(x))
            return out

        hints = [c.lipschitz_hint for c in pieces]
        lip = max(hints) if all(v is not None for v in hints) else None
        return ConstraintFunction(h, kind, dict(op=op, pieces=p["pieces"]), lip, None, pos, 1.0)

    raise BadShapeParam(f"unknown constraint kind '{kind}'")


def probe_box(constraint, margin=3.0):
    """Default planar probe region around a shape."""
    pr = constraint.params
    c = np.array([pr.get("cx", 0.0), pr.get("cy", 0.0)], dtype=float)
    if constraint.kind == "ellipse":
        s = max(pr["a"], pr["b"])
    elif constraint.kind == "circle":
        s = pr["r"]
    else:
        s = 1.0
    half = margin * s
    return c - half, c + half


def quasi_random_points(lo, hi, n, seed=0):
    """Scrambled Sobol points in the box ``[lo, hi]``."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    sampler = qmc.Sobol(d=len(lo), scramble=True, seed=seed)
    m = int(np.ceil(np.log2(max(n, 2))))
    pts = sampler.random_base2(m)[:n]
    return qmc.scale(pts, lo, hi) if np.all(hi > lo) else lo + pts * (hi - lo)


def conservative_halfplane_of(constraint, point, state_dim=None, probes=None,
                              n_probes=10_000, tol=1e-9, seed=0) -> ConstraintFunction:
    """Supporting half-plane ``h~(x) = <n, x_pos - point>`` of a convex shape.

    ``n`` is the unit outward normal at the boundary point. The result is
    checked against ``h`` on ``n_probes`` Sobol points (or the given
    ``probes``) and :class:`NotSupporting` is raised if ``h~ > h + tol``
    anywhere.
    """
    point = _vec(point, name="point")
    i, j = constraint.pos
    n = state_dim or max(constraint.pos) + 1
    x = np.zeros(n)
    x[i], x[j] = point
    if abs(float(constraint(x))) > 1e-8:
        raise BadShapeParam("point is not on the zero level set of h")
    g = np.asarray(constraint.position_gradient(x), dtype=float)
    normal = _unit(g, name="gradient at point")
    approx = make_constraint("half_plane", dict(n=normal, x_plane=point, pos=constraint.pos))

    if probes is None:
        lo, hi = probe_box(constraint)
        pts = quasi_random_points(lo, hi, n_probes, seed=seed)
        probes = np.zeros((len(pts), n))
        probes[:, i], probes[:, j] = pts[:, 0], pts[:, 1]
    gap = constraint(probes) - approx(probes)
    worst = int(np.argmin(gap))
    if gap[worst] < -tol:
        raise NotSupporting(f"h~ exceeds h by {-gap[worst]:.3g} at probe {probes[worst]}")
    return approx


def empirical_lipschitz(constraint, samples, rng=None, n_pairs=2000, radius=1e-3):
    """Largest sampled difference quotient of h around the given samples."""
    rng = np.random.default_rng(0) if rng is None else rng
    samples = np.asarray(samples, dtype=float)
    idx = rng.integers(0, len(samples), n_pairs)
    x = samples[idx]
    dx = rng.standard_normal(x.shape)
    dx *= radius / np.linalg.norm(dx, axis=1, keepdims=True)
    q = np.abs(constraint(x + dx) - constraint(x)) / radius
    return float(np.max(q))


@dataclass(frozen=True)
class TerminalSet:
    """Known subset F of a forward control invariant set with ``h >= delta``."""

    membership: Callable
    violation: Callable
    delta: float
    description: str = ""

    def __contains__(self, x):
        return bool(self.membership(np.asarray(x, dtype=float)))


def default_delta(constraint):
    return 0.5 * constraint.radius_analog


def make_terminal_set(constraint, system=None, delta=None, heading_index=2,
                      heading_weight=1.0) -> TerminalSet:
    """Default terminal set ``{h >= delta}``.

    For nonholonomic vehicles the heading must additionally point away from
    the obstacle: ``<(cos psi, sin psi), grad_pos h> >= 0``. For the double
    integrator the velocity must: ``<v, grad_pos h> >= 0``.
    """
    delta = default_delta(constraint) if delta is None else float(delta)
    if delta <= 0:
        raise ValueError("terminal margin delta must be positive")
    heading = system is not None and system.name in NONHOLONOMIC
    velocity = system is not None and system.name == "double_integrator"

    if velocity:
        # coasting with outward velocity never decreases h for convex obstacles
        dim = system.state_dim // 2

        def violation(x):
            g = constraint.position_gradient(x)
            align = np.sum(x[..., dim:dim + 2] * g[..., :2], axis=-1)
            return np.maximum(delta - constraint(x), 0.0) + heading_weight * np.maximum(-align, 0.0)

        desc = f"h >= {delta:g} and velocity away from the obstacle"
    elif not heading:
        def violation(x):
            return np.maximum(delta - constraint(x), 0.0)

        desc = f"h >= {delta:g}"
    else:
        def violation(x):
            g = constraint.position_gradient(x)
            psi = x[..., heading_index]
            align = np.cos(psi) * g[..., 0] + np.sin(psi) * g[..., 1]
            return np.maximum(delta - constraint(x), 0.0) + heading_weight * np.maximum(-align, 0.0)

        desc = f"h >= {delta:g} and heading away from the obstacle"

    def membership(x):
        return violation(np.asarray(x, dtype=float)) <= 0.0

    return TerminalSet(membership, violation, delta, desc)
