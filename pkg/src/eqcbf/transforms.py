"""
Parametric diffeomorphisms ``D(x; p)`` with optional input maps
``D_u(u; p)``, and sampled checks of constraint symmetry and (strong)
equivariance of dynamics.

All maps are vectorized: states ``(..., n)`` and parameters ``(..., k)``
broadcast against each other.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np

from .constraints import ConstraintFunction
from .errors import BadParam, EmptyRegion, NoUnitEigenvalue, UnknownTransform

TWO_PI = 2.0 * np.pi


def rot(angle):
    """Stack of 2x2 rotation matrices, shape ``(..., 2, 2)``."""
    c, s = np.cos(angle), np.sin(angle)
    return np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)


def rotate_vec(angle, v):
    """Rotate 2-vectors ``v`` (..., 2) by ``angle`` (...)."""
    c, s = np.cos(angle), np.sin(angle)
    return np.stack([c * v[..., 0] - s * v[..., 1], s * v[..., 0] + c * v[..., 1]], -1)


def wrap_angle(a):
    """Wrap to ``[-pi, pi)``."""
    return np.mod(np.asarray(a) + np.pi, TWO_PI) - np.pi


# ----------------------------------------------------------------------------
# parameter sets


@dataclass(frozen=True)
class ParamSet:
    """Set of admissible parameters.

    kinds
    -----
    ``none``      no parameter (dimension 0, sampled as empty vectors)
    ``interval``  scalar ``lo <= p <= hi``
    ``box``       vector ``lo <= p <= hi``
    ``subspace``  ``{p | <normal, p> = 0}``, sampled inside ``|p_i| <= bound``
    ``discrete``  finite list of parameter vectors
    """

    kind: str
    lo: Optional[np.ndarray] = None
    hi: Optional[np.ndarray] = None
    normal: Optional[np.ndarray] = None
    bound: float = 10.0
    values: Optional[np.ndarray] = None

    @classmethod
    def none(cls):
        return cls("none")

    @classmethod
    def interval(cls, lo, hi):
        if not hi >= lo:
            raise BadParam("interval needs hi >= lo")
        return cls("interval", lo=np.array([float(lo)]), hi=np.array([float(hi)]))

    @classmethod
    def box(cls, lo, hi):
        lo, hi = np.atleast_1d(np.asarray(lo, float)), np.atleast_1d(np.asarray(hi, float))
        if lo.shape != hi.shape or np.any(hi < lo):
            raise BadParam("box needs matching shapes and hi >= lo")
        return cls("box", lo=lo, hi=hi)

    @classmethod
    def subspace(cls, normal, bound=10.0):
        n = np.asarray(normal, float)
        nrm = np.linalg.norm(n)
        if nrm == 0:
            raise BadParam("subspace normal must be nonzero")
        return cls("subspace", normal=n / nrm, bound=float(bound))

    @classmethod
    def discrete(cls, values):
        v = np.atleast_2d(np.asarray(values, float))
        if v.size == 0:
            raise BadParam("discrete parameter set is empty")
        return cls("discrete", values=v)

    @property
    def dim(self):
        if self.kind == "none":
            return 0
        if self.kind in ("interval", "box"):
            return len(self.lo)
        if self.kind == "subspace":
            return len(self.normal)
        return self.values.shape[1]

    def sample(self, rng, n):
        if self.kind == "none":
            return np.zeros((n, 0))
        if self.kind in ("interval", "box"):
            return rng.uniform(self.lo, self.hi, size=(n, self.dim))
        if self.kind == "subspace":
            p = rng.uniform(-self.bound, self.bound, size=(n, self.dim))
            return p - np.outer(p @ self.normal, self.normal)
        return self.values[rng.integers(0, len(self.values), size=n)]

    def contains(self, p, tol=1e-9):
        p = np.atleast_2d(np.asarray(p, float))
        if self.kind == "none":
            return np.ones(len(p), dtype=bool)
        if self.kind in ("interval", "box"):
            return np.all((p >= self.lo - tol) & (p <= self.hi + tol), axis=-1)
        if self.kind == "subspace":
            return np.abs(p @ self.normal) <= tol * (1 + np.linalg.norm(p, axis=-1))
        d = np.min(np.linalg.norm(p[:, None, :] - self.values[None], axis=-1), axis=1)
        return d <= tol


# ----------------------------------------------------------------------------
# diffeomorphisms


@dataclass(frozen=True)
class ParametricDiffeomorphism:
    """``D(x; p)`` with inverse, Jacobian and optional input map.

    ``apply_raw``/``inverse_raw`` are the smooth maps without wrapping of
    periodic coordinates; :meth:`apply` and :meth:`inverse` wrap the outputs
    using ``periodic`` (index -> (lo, period)).
    """

    name: str
    state_dim: int
    param_set: ParamSet
    apply_raw: Callable
    inverse_raw: Callable
    jacobian_fn: Optional[Callable] = None
    input_map: Optional[Callable] = None
    input_inverse: Optional[Callable] = None
    periodic: Mapping[int, tuple] = field(default_factory=dict)
    params: Mapping[str, object] = field(default_factory=dict)

    def _wrap(self, x):
        if not self.periodic:
            return x
        x = np.array(x, dtype=float, copy=True)
        for i, (lo, period) in self.periodic.items():
            x[..., i] = lo + np.mod(x[..., i] - lo, period)
        return x

    def _p(self, p):
        if self.param_set.dim == 0:
            return np.zeros((0,))
        if p is None and self.param_set.kind == "discrete" and len(self.param_set.values) == 1:
            return self.param_set.values[0]
        return np.asarray(p, dtype=float)

    def apply(self, x, p=None):
        return self._wrap(self.apply_raw(np.asarray(x, float), self._p(p)))

    def inverse(self, x, p=None):
        return self._wrap(self.inverse_raw(np.asarray(x, float), self._p(p)))

    def __call__(self, x, p=None):
        return self.apply(x, p)

    def jacobian(self, x, p=None):
        """``dD/dx`` of shape ``(..., n, n)``; central differences if no closed form."""
        x = np.asarray(x, float)
        p = self._p(p)
        if self.jacobian_fn is not None:
            J = self.jacobian_fn(x, p)
            return np.broadcast_to(J, x.shape[:-1] + (self.state_dim, self.state_dim)).copy()
        return numeric_jacobian(lambda z: self.apply_raw(z, p), x)

    def map_input(self, u, p=None):
        if self.input_map is None:
            return np.asarray(u, float)
        return self.input_map(np.asarray(u, float), self._p(p))

    def unmap_input(self, u, p=None):
        if self.input_inverse is None:
            return np.asarray(u, float)
        return self.input_inverse(np.asarray(u, float), self._p(p))


def numeric_jacobian(fn, x):
    """Central-difference Jacobian with step ``1e-5 * (1 + ||x||)``."""
    x = np.asarray(x, float)
    n = x.shape[-1]
    step = 1e-5 * (1.0 + np.linalg.norm(x, axis=-1, keepdims=True))
    cols = []
    for j in range(n):
        e = np.zeros(n)
        e[j] = 1.0
        d = step * e
        cols.append((fn(x + d) - fn(x - d)) / (2.0 * step))
    return np.stack(cols, axis=-1)


def state_difference(a, b, periodic):
    """``a - b`` with periodic coordinates compared on the circle."""
    d = np.asarray(a, float) - np.asarray(b, float)
    for i, (lo, period) in (periodic or {}).items():
        d[..., i] = np.mod(d[..., i] + 0.5 * period, period) - 0.5 * period
    return d


def _pos_heading(x):
    return x[..., :2], x[..., 2]


def _compose3(pos, psi):
    return np.concatenate([pos, psi[..., None]], axis=-1)


def _translate(params):
    dim = int(params.get("dim", 3))
    pos = int(params.get("pos_dim", 2))
    if "normal" in params:
        pset = ParamSet.subspace(params["normal"], params.get("bound", 10.0))
    else:
        b = float(params.get("bound", 10.0))
        pset = ParamSet.box(-b * np.ones(pos), b * np.ones(pos))

    def pad(p):
        z = np.zeros(np.shape(p)[:-1] + (dim,))
        z[..., :pos] = p
        return z

    periodic = {2: (-np.pi, TWO_PI)} if dim == 3 and params.get("heading", True) else {}
    return ParametricDiffeomorphism(
        "translate", dim, pset,
        apply_raw=lambda x, p: x + pad(p),
        inverse_raw=lambda x, p: x - pad(p),
        jacobian_fn=lambda x, p: np.eye(dim),
        periodic=periodic, params=dict(params))


def _rotate_about_point(params):
    c = np.asarray([params.get("cx", 0.0), params.get("cy", 0.0)], float)
    heading = bool(params.get("heading", True))
    pset = ParamSet.interval(params.get("lo", -np.pi), params.get("hi", np.pi))
    dim = 3 if heading else 2

    def fwd(x, p):
        rho = p[..., 0]
        pos = rotate_vec(rho, x[..., :2] - c) + c
        if not heading:
            return pos
        return _compose3(pos, x[..., 2] + rho)

    def inv(x, p):
        rho = p[..., 0]
        pos = rotate_vec(-rho, x[..., :2] - c) + c
        if not heading:
            return pos
        return _compose3(pos, x[..., 2] - rho)

    def jac(x, p):
        rho = np.asarray(p)[..., 0]
        J = np.zeros(np.shape(rho) + (dim, dim))
        J[..., :2, :2] = rot(rho)
        if heading:
            J[..., 2, 2] = 1.0
        return J

    # the kinematic vehicles are equivariant with identity input map; for the
    # single integrator the input rotates along with the state
    rotate_input = bool(params.get("rotate_input", not heading))
    imap = (lambda u, p: rotate_vec(p[..., 0], u)) if rotate_input else None
    iinv = (lambda u, p: rotate_vec(-p[..., 0], u)) if rotate_input else None
    periodic = {2: (-np.pi, TWO_PI)} if heading else {}
    return ParametricDiffeomorphism("rotate_about_point", dim, pset, fwd, inv, jac, imap, iinv,
                                    periodic=periodic, params=dict(params))


def _polar_shift(params):
    pset = ParamSet.interval(params.get("lo", -np.pi), params.get("hi", np.pi))

    def shift(x, p, sign):
        out = np.array(np.broadcast_to(x, np.broadcast_shapes(x.shape, np.shape(p)[:-1] + (3,))), float)
        out[..., 1] = out[..., 1] + sign * p[..., 0]
        return out

    return ParametricDiffeomorphism(
        "polar_shift", 3, pset,
        apply_raw=lambda x, p: shift(x, p, 1.0),
        inverse_raw=lambda x, p: shift(x, p, -1.0),
        jacobian_fn=lambda x, p: np.eye(3),
        periodic={1: (-np.pi, TWO_PI), 2: (-np.pi, TWO_PI)}, params=dict(params))


def mirror_position(pos, rho, xp):
    """Reflect positions across the line through ``xp`` along ``R(rho) e2``."""
    t = np.stack([np.cos(rho), np.sin(rho)], -1)
    d = pos - xp
    return pos - 2.0 * np.sum(t * d, axis=-1, keepdims=True) * t


def mirror_matrix_form(pos, rho, xp):
    """The alternative matrix expression ``[I - 2 cos(rho) R(rho)](pos - xp) + xp``.

    Kept only to compare against :func:`mirror_position`. The matrix has
    determinant +1, i.e. it rotates by ``pi + 2 rho`` about ``xp`` (a point
    reflection at ``rho = 0``), so the two forms only agree on the line
    through ``xp`` along ``e1``.
    """
    rho = np.asarray(rho, float)
    M = np.eye(2) - 2.0 * np.cos(rho)[..., None, None] * rot(rho)
    return np.einsum("...ij,...j->...i", M, pos - xp) + xp


def _mirror(params):
    xp = np.asarray(params.get("xp", [0.0, 0.0]), float)
    if "rho" in params:
        r = float(params["rho"])
        pset = ParamSet.discrete([[r]])
    else:
        pset = ParamSet.interval(0.0, TWO_PI)

    def fwd(x, p):
        rho = p[..., 0]
        pos, psi = _pos_heading(x)
        return _compose3(mirror_position(pos, rho, xp), np.pi + 2.0 * rho - psi)

    def jac(x, p):
        rho = np.asarray(p)[..., 0]
        c, s = np.cos(rho), np.sin(rho)
        J = np.zeros(np.shape(rho) + (3, 3))
        J[..., 0, 0] = 1 - 2 * c * c
        J[..., 0, 1] = -2 * c * s
        J[..., 1, 0] = -2 * c * s
        J[..., 1, 1] = 1 - 2 * s * s
        J[..., 2, 2] = -1.0
        return J

    def umap(u, p):
        out = np.array(u, float, copy=True)
        out[..., 1] = -out[..., 1]
        return out

    return ParametricDiffeomorphism("mirror", 3, pset, fwd, fwd, jac, umap, umap,
                                    periodic={2: (-np.pi, TWO_PI)}, params=dict(params, xp=xp))


def _linear(params):
    """``D(x; p) = D_p x + dx`` with ``D_p = P diag(p) P^-1`` or a fixed matrix."""
    dx = params.get("dx")
    if "P" in params:
        P = np.asarray(params["P"], float)
        Pinv = np.linalg.inv(P)
        n = P.shape[0]
        if "fixed" in params:
            fixed = {int(k): float(v) for k, v in dict(params["fixed"]).items()}
        else:
            fixed = {}
        lo = float(params.get("lo", 0.25))
        hi = float(params.get("hi", 4.0))
        if params.get("values") is not None:
            pset = ParamSet.discrete(params["values"])
        else:
            full_lo = np.array([fixed.get(i, lo) for i in range(n)])
            full_hi = np.array([fixed.get(i, hi) for i in range(n)])
            pset = ParamSet.box(full_lo, full_hi)

        def mat(p):
            return np.einsum("ij,...j,jk->...ik", P, p, Pinv)

        def matinv(p):
            return np.einsum("ij,...j,jk->...ik", P, 1.0 / p, Pinv)
    elif "Dp" in params:
        M = np.asarray(params["Dp"], float)
        Minv = np.linalg.inv(M)
        n = M.shape[0]
        pset = ParamSet.none()

        def mat(p):
            return M

        def matinv(p):
            return Minv
    elif params.get("kind") == "rotation":
        blocks = int(params.get("blocks", 1))
        n = 2 * blocks
        pset = ParamSet.interval(params.get("lo", -np.pi), params.get("hi", np.pi))

        def mat(p):
            R = rot(np.asarray(p)[..., 0])
            M = np.zeros(R.shape[:-2] + (n, n))
            for b in range(blocks):
                M[..., 2 * b:2 * b + 2, 2 * b:2 * b + 2] = R
            return M

        def matinv(p):
            return mat(-np.asarray(p))
    else:
        raise BadParam("linear transform needs 'P', 'Dp' or kind=rotation")
    dx = np.zeros(n) if dx is None else np.asarray(dx, float)

    def fwd(x, p):
        return np.einsum("...ij,...j->...i", mat(p), x) + dx

    def inv(x, p):
        return np.einsum("...ij,...j->...i", matinv(p), x - dx)

    Du = params.get("Du")
    imap = iinv = None
    if Du is not None:
        if callable(Du):
            Du_fn = Du
        elif isinstance(Du, str):
            if Du != "rotation":
                raise BadParam(f"unknown input map '{Du}'")
            Du_fn = lambda p: rot(np.asarray(p)[..., 0])  # noqa: E731
        else:
            Du_const = np.atleast_2d(np.asarray(Du, float))
            Du_fn = lambda p: Du_const  # noqa: E731

        def imap(u, p):
            return np.einsum("...ij,...j->...i", Du_fn(p), u)

        def iinv(u, p):
            return np.einsum("...ij,...j->...i", np.linalg.inv(Du_fn(p)), u)

    return ParametricDiffeomorphism("linear", n, pset, fwd, inv, lambda x, p: mat(p), imap, iinv,
                                    params=dict(params, matrix=mat))


# ----------------------------------------------------------------------------
# boundary shifts


@dataclass(frozen=True)
class BoundaryCurve:
    """Parameterized boundary ``p(sigma)`` with outward-normal angle ``phi(sigma)``."""

    point: Callable
    normal_angle: Callable
    period: Optional[float] = None
    name: str = "curve"


def ellipse_curve(a, b, cx=0.0, cy=0.0):
    """Ellipse boundary; ``phi`` is the signed angle of the outward normal."""
    if a <= 0 or b <= 0:
        raise BadParam("ellipse semi-axes must be positive")

    def point(s):
        s = np.asarray(s, float)
        return np.stack([cx + a * np.cos(s), cy + b * np.sin(s)], -1)

    def normal_angle(s):
        s = np.asarray(s, float)
        # unwrap relative to the parameter so that phi is continuous in sigma
        phi = np.arctan2(a * np.sin(s), b * np.cos(s))
        return s + wrap_angle(phi - s)

    return BoundaryCurve(point, normal_angle, TWO_PI, "ellipse")


def corner_curve(p0, n1):
    """Degenerate curve for a corner: fixed point, normal angle grows with sigma."""
    p0 = np.asarray(p0, float)
    phi0 = float(np.arctan2(n1[1], n1[0]))

    def point(s):
        s = np.asarray(s, float)
        return np.broadcast_to(p0, np.shape(s) + (2,)).copy()

    return BoundaryCurve(point, lambda s: phi0 + np.asarray(s, float), None, "corner")


def polyline_curve(vertices, closed=True):
    """Convex polygon boundary with normals rotating continuously at vertices.

    The parameter advances by the edge length along edges and by the turning
    angle at each vertex (where the position stays fixed), so ``p`` and
    ``phi`` are both Lipschitz in ``sigma``.
    """
    V = np.asarray(vertices, float)
    if len(V) < 3:
        raise BadParam("polygon needs at least three vertices")
    area = 0.5 * np.sum(V[:, 0] * np.roll(V[:, 1], -1) - np.roll(V[:, 0], -1) * V[:, 1])
    if area < 0:
        V = V[::-1]
    E = np.roll(V, -1, axis=0) - V
    lengths = np.linalg.norm(E, axis=1)
    normal = np.arctan2(-E[:, 0], E[:, 1])  # outward for counter-clockwise order
    turns = wrap_angle(np.roll(normal, -1) - normal)
    if np.any(turns < -1e-12):
        raise BadParam("polygon must be convex")
    # pieces: edge k then vertex k+1
    seg_len = np.ravel(np.column_stack([lengths, turns]))
    knots = np.concatenate([[0.0], np.cumsum(seg_len)])
    total = knots[-1]
    phi_start = np.concatenate([[normal[0]], normal[0] + np.cumsum(turns)])

    def locate(s):
        s = np.mod(np.asarray(s, float), total)
        k = np.clip(np.searchsorted(knots, s, side="right") - 1, 0, len(seg_len) - 1)
        return s, k, s - knots[k]

    def point(s):
        s, k, r = locate(s)
        e = k // 2
        on_edge = (k % 2) == 0
        t = np.where(on_edge, r / np.where(lengths[e] > 0, lengths[e], 1.0), 1.0)
        return V[e] + t[..., None] * E[e]

    def normal_angle(s):
        raw = np.asarray(s, float)
        s, k, r = locate(raw)
        e = k // 2
        on_edge = (k % 2) == 0
        phi = np.where(on_edge, phi_start[e], phi_start[e] + r)
        laps = np.floor_divide(raw, total)
        return phi + TWO_PI * laps

    return BoundaryCurve(point, normal_angle, total, "polyline")


def _boundary_shift(curve, sigma0=0.0, lo=None, hi=None, name="boundary_shift", params=None):
    """``D(x; s) = [R(-dphi)(x_pos - p(s0 + s)) + p(s0); psi - dphi]``.

    ``dphi = phi(s0 + s) - phi(s0)``. Maps the normal ray at ``p(s0 + s)`` onto
    the normal ray at ``p(s0)``.
    """
    if lo is None:
        lo, hi = (0.0, curve.period) if curve.period else (0.0, np.pi / 2)
    pset = ParamSet.interval(lo, hi)
    p0 = curve.point(sigma0)
    phi0 = float(curve.normal_angle(sigma0))

    def dphi(s):
        return curve.normal_angle(sigma0 + s) - phi0

    def fwd(x, p):
        s = p[..., 0]
        a = dphi(s)
        pos = rotate_vec(-a, x[..., :2] - curve.point(sigma0 + s)) + p0
        return _compose3(pos, x[..., 2] - a)

    def inv(x, p):
        s = p[..., 0]
        a = dphi(s)
        pos = rotate_vec(a, x[..., :2] - p0) + curve.point(sigma0 + s)
        return _compose3(pos, x[..., 2] + a)

    def jac(x, p):
        a = dphi(np.asarray(p)[..., 0])
        J = np.zeros(np.shape(a) + (3, 3))
        J[..., :2, :2] = rot(-a)
        J[..., 2, 2] = 1.0
        return J

    d = ParametricDiffeomorphism(name, 3, pset, fwd, inv, jac,
                                 periodic={2: (-np.pi, TWO_PI)},
                                 params=dict(params or {}, sigma0=sigma0))
    object.__setattr__(d, "curve", curve)
    return d


def _ellipse_boundary_shift(params):
    a = float(params.get("a", 1.0))
    b = float(params.get("b", a))
    curve = ellipse_curve(a, b, params.get("cx", 0.0), params.get("cy", 0.0))
    return _boundary_shift(curve, float(params.get("sigma0", 0.0)),
                           params.get("lo", 0.0), params.get("hi", TWO_PI),
                           "ellipse_boundary_shift", params)


def _corner_pivot(params):
    p0 = np.asarray(params.get("p0", [0.0, 0.0]), float)
    n1 = np.asarray(params.get("n1", [1.0, 0.0]), float)
    curve = corner_curve(p0, n1 / np.linalg.norm(n1))
    lo, hi = float(params.get("lo", 0.0)), float(params.get("hi", np.pi / 2))
    return _boundary_shift(curve, 0.0, lo, hi, "corner_pivot", params)


def _polyline_shift(params):
    curve = polyline_curve(params["vertices"])
    return _boundary_shift(curve, float(params.get("sigma0", 0.0)), 0.0, curve.period,
                           "polyline_boundary_shift", params)


_NAMED = {
    "translate": _translate,
    "rotate_about_point": _rotate_about_point,
    "polar_shift": _polar_shift,
    "mirror": _mirror,
    "linear": _linear,
    "ellipse_boundary_shift": _ellipse_boundary_shift,
    "corner_pivot": _corner_pivot,
    "polyline_boundary_shift": _polyline_shift,
}


def make_named_transform(name, params=None) -> ParametricDiffeomorphism:
    """Build a catalogued transform.

    ======================  ===================================================
    translate               ``normal`` (restrict to the orthogonal subspace) or
                            ``bound``; ``dim`` (3), ``pos_dim`` (2)
    rotate_about_point      ``cx``, ``cy``; ``heading`` (True) adds the angle to psi
    polar_shift             shifts the polar angle of (r, phi, theta)
    mirror                  ``xp``; optional fixed ``rho``
    linear                  ``P`` (with ``fixed``/``values``), ``Dp``, or
                            ``kind=rotation`` with ``blocks``; ``dx``, ``Du``
    ellipse_boundary_shift  ``a``, ``b``, ``cx``, ``cy``, ``sigma0``
    corner_pivot            ``p0``, ``n1``, ``lo``, ``hi``
    polyline_boundary_shift ``vertices`` of a convex polygon
    ======================  ===================================================
    """
    try:
        builder = _NAMED[name]
    except KeyError:
        raise UnknownTransform(f"unknown transform '{name}'; known: {sorted(_NAMED)}") from None
    return builder(dict(params or {}))


def known_transforms():
    return sorted(_NAMED)


# ----------------------------------------------------------------------------
# verification


@dataclass(frozen=True)
class EquivarianceReport:
    max_residual: float
    mean_residual: float
    samples: int
    strong: bool
    passed: bool
    tol: float
    survival_fraction: float = 1.0
    worst_sample: Optional[dict] = None

    @property
    def verdict(self):
        return "pass" if self.passed else "fail"

    def to_dict(self):
        return dict(max_residual=self.max_residual, mean_residual=self.mean_residual,
                    samples=self.samples, strong=self.strong, verdict=self.verdict,
                    tol=self.tol, survival_fraction=self.survival_fraction)


def _sample_box(rng, domain, n):
    lo, hi = (np.asarray(d, float) for d in domain)
    return rng.uniform(lo, hi, size=(n, len(lo)))


def strong_input_check(system, diffeo, n_samples=1000, tol=1e-9, rng=None):
    """Sampled surjectivity test of ``D_u(U; p) = U``.

    Boundary and interior samples of U are mapped through ``D_u`` and its
    inverse; both images must stay in U. A pass does not prove the property.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    U = system.input_set
    if diffeo.input_map is None:
        return True
    u = np.concatenate([U.boundary_samples(rng, n_samples), U.sample(rng, n_samples)])
    p = diffeo.param_set.sample(rng, len(u))
    fwd = diffeo.map_input(u, p)
    back = diffeo.unmap_input(u, p)
    return bool(np.all(U.contains(fwd, tol)) and np.all(U.contains(back, tol)))


def _report(res, tol, strong, survival=1.0, worst=None):
    res = np.asarray(res, float)
    mx = float(np.max(res)) if res.size else 0.0
    mean = float(np.mean(res)) if res.size else 0.0
    return EquivarianceReport(mx, mean, int(res.size), bool(strong), bool(mx <= tol), float(tol),
                              float(survival), worst)


def equivariance_residuals(system, diffeo, x, u, p):
    """``||f(D(x;p), D_u(u;p)) - J_D(x;p) f(x, u)||`` per sample."""
    lhs = system(diffeo.apply(x, p), diffeo.map_input(u, p))
    rhs = np.einsum("...ij,...j->...i", diffeo.jacobian(x, p), system(x, u))
    return np.linalg.norm(lhs - rhs, axis=-1)


def check_equivariance(system, diffeo, tol=1e-4, n_samples=1000, domain=None, seed=0,
                       region=None):
    """Sampled equivariance certificate of ``system`` under ``diffeo``.

    ``domain`` is a ``(lo, hi)`` box of states to sample. With ``region`` (a
    predicate on states) only samples with ``x`` and ``D(x; p)`` in the region
    are kept; raises :class:`EmptyRegion` if none survive.
    """
    rng = np.random.default_rng(seed)
    if domain is None:
        domain = (-5 * np.ones(system.state_dim), 5 * np.ones(system.state_dim))
    x = _sample_box(rng, domain, n_samples)
    u = system.input_set.sample(rng, n_samples)
    p = diffeo.param_set.sample(rng, n_samples)
    if diffeo.param_set.dim == 0:
        p = None
    keep = np.ones(n_samples, dtype=bool)
    if region is not None:
        keep = np.asarray(region(x), bool) & np.asarray(region(diffeo.apply(x, p)), bool)
        if not np.any(keep):
            raise EmptyRegion("no sample lies in the region and its preimage")
    res = equivariance_residuals(system, diffeo, x, u, p)[keep]
    strong = strong_input_check(system, diffeo, rng=rng)
    k = int(np.argmax(res)) if res.size else 0
    worst = dict(x=x[keep][k].tolist(), u=u[keep][k].tolist()) if res.size else None
    return _report(res, tol, strong, keep.mean(), worst)


def check_symmetry(constraint, diffeo, tol=1e-4, n_samples=1000, domain=None, seed=0,
                   region=None, state_dim=None):
    """Sampled certificate of ``h(x) = h(D(x; p))``."""
    rng = np.random.default_rng(seed)
    n = state_dim or diffeo.state_dim
    if domain is None:
        domain = (-5 * np.ones(n), 5 * np.ones(n))
    x = _sample_box(rng, domain, n_samples)
    p = diffeo.param_set.sample(rng, n_samples)
    if diffeo.param_set.dim == 0:
        p = None
    y = diffeo.apply(x, p)
    keep = np.ones(n_samples, dtype=bool)
    if region is not None:
        keep = np.asarray(region(x), bool) & np.asarray(region(y), bool)
        if not np.any(keep):
            raise EmptyRegion("no sample lies in the region and its preimage")
    res = np.abs(constraint(x) - constraint(y))[keep]
    k = int(np.argmax(res)) if res.size else 0
    worst = dict(x=x[keep][k].tolist()) if res.size else None
    return _report(res, tol, True, keep.mean(), worst)


def check_local(target, diffeo, region, tol=1e-4, n_samples=1000, domain=None, seed=0):
    """Local symmetry (constraint) or local equivariance (system) check on ``region``."""
    if isinstance(target, ConstraintFunction):
        return check_symmetry(target, diffeo, tol, n_samples, domain, seed, region=region)
    return check_equivariance(target, diffeo, tol, n_samples, domain, seed, region=region)


def check_roundtrip(diffeo, n_samples=1000, domain=None, seed=0):
    """Max ``||D^-1(D(x;p);p) - x||`` over samples (periodic coordinates on the circle)."""
    rng = np.random.default_rng(seed)
    n = diffeo.state_dim
    if domain is None:
        domain = (-5 * np.ones(n), 5 * np.ones(n))
    x = diffeo._wrap(_sample_box(rng, domain, n_samples))
    p = diffeo.param_set.sample(rng, n_samples)
    if diffeo.param_set.dim == 0:
        p = None
    back = diffeo.inverse(diffeo.apply(x, p), p)
    return float(np.max(np.linalg.norm(state_difference(back, x, diffeo.periodic), axis=-1)))


def linear_commutation_residual(A, B, Dp, Du=None, dx=None):
    """Closed-form linear equivariance test: residuals of ``A Dp = Dp A``, ``Dp B = B Du`` and ``A dx = 0``."""
    A, B, Dp = (np.atleast_2d(np.asarray(M, float)) for M in (A, B, Dp))
    if B.shape[0] != A.shape[0]:
        B = B.reshape(A.shape[0], -1)
    Du = np.eye(B.shape[1]) if Du is None else np.atleast_2d(np.asarray(Du, float))
    r = max(np.max(np.abs(A @ Dp - Dp @ A)), np.max(np.abs(Dp @ B - B @ Du)))
    if dx is not None:
        r = max(r, float(np.max(np.abs(A @ np.asarray(dx, float)))))
    return float(r)


def linear_symmetric_constraints(Dp, C=0.0, coefficients=None, tol=1e-9):
    """Linear constraint ``h(x) = sum_i c_i w_i^T x + C`` symmetric under ``x -> Dp x``.

    The ``w_i`` are left eigenvectors of ``Dp`` with eigenvalue 1. Raises
    :class:`NoUnitEigenvalue` if there is none.
    """
    from .constraints import make_constraint

    Dp = np.atleast_2d(np.asarray(Dp, float))
    vals, vecs = np.linalg.eig(Dp.T)
    unit = np.abs(vals - 1.0) <= tol
    if not np.any(unit):
        raise NoUnitEigenvalue(f"eigenvalues {np.round(vals, 6).tolist()} contain no 1")
    W = np.real(vecs[:, unit]).T
    W = W / np.linalg.norm(W, axis=1, keepdims=True)
    c = np.ones(len(W)) if coefficients is None else np.asarray(coefficients, float)
    if len(c) != len(W):
        raise BadParam(f"expected {len(W)} coefficients, got {len(c)}")
    w = c @ W
    h = make_constraint("linear", dict(w=w, C=float(C)))
    object.__setattr__(h, "params", dict(h.params, left_eigenvectors=W.tolist()))
    return h
