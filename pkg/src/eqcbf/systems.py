"""
Dynamics, input sets and fixed-step trajectory integration.

Every vector field in this module is vectorized over leading axes: ``f(x, u)``
accepts states of shape ``(..., n)`` and inputs of shape ``(..., m)`` and
returns derivatives of shape ``(..., n)``. The solver relies on this to roll
out whole populations of input schedules at once.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np

from .errors import MissingParam, NonFiniteState, UnknownSystem

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class InputSet:
    """Admissible inputs U.

    ``kind="box"`` is a product of intervals ``lower <= u <= upper``; a positive
    entry of ``min_abs`` additionally excludes ``|u_i| < min_abs[i]``.
    ``kind="ball"`` is ``||u - center|| <= radius``.
    """

    kind: str
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None
    min_abs: Optional[np.ndarray] = None
    center: Optional[np.ndarray] = None
    radius: float = 0.0

    @classmethod
    def box(cls, lower, upper, min_abs=None):
        lower = np.atleast_1d(np.asarray(lower, dtype=float))
        upper = np.atleast_1d(np.asarray(upper, dtype=float))
        if lower.shape != upper.shape or np.any(lower > upper):
            raise ValueError("box bounds must have equal shape and lower <= upper")
        if min_abs is not None:
            min_abs = np.broadcast_to(np.asarray(min_abs, dtype=float), lower.shape).copy()
        return cls("box", lower=lower, upper=upper, min_abs=min_abs)

    @classmethod
    def ball(cls, center, radius):
        center = np.atleast_1d(np.asarray(center, dtype=float))
        if radius <= 0:
            raise ValueError("ball radius must be positive")
        return cls("ball", center=center, radius=float(radius))

    @property
    def dim(self) -> int:
        return len(self.lower) if self.kind == "box" else len(self.center)

    @property
    def bounding_box(self):
        if self.kind == "box":
            return self.lower, self.upper
        return self.center - self.radius, self.center + self.radius

    def contains(self, u, tol=1e-12):
        u = np.asarray(u, dtype=float)
        if self.kind == "box":
            ok = np.all((u >= self.lower - tol) & (u <= self.upper + tol), axis=-1)
            if self.min_abs is not None:
                ok &= np.all(np.abs(u) >= self.min_abs - tol, axis=-1)
            return ok
        return np.linalg.norm(u - self.center, axis=-1) <= self.radius + tol

    def project(self, u):
        u = np.asarray(u, dtype=float)
        if self.kind == "box":
            out = np.clip(u, self.lower, self.upper)
            if self.min_abs is not None:
                m = self.min_abs
                inside = np.abs(out) < m
                sign = np.where(out < 0, -1.0, 1.0)
                pushed = sign * m
                # pushing may leave the box when the box is one-sided
                pushed = np.where((pushed > self.upper) | (pushed < self.lower), -pushed, pushed)
                out = np.where(inside, pushed, out)
            return out
        d = u - self.center
        nrm = np.linalg.norm(d, axis=-1, keepdims=True)
        scale = np.where(nrm > self.radius, self.radius / np.maximum(nrm, 1e-300), 1.0)
        return self.center + d * scale

    def sample(self, rng, n):
        """Draw ``n`` members uniformly (rejection-free for both kinds)."""
        if self.kind == "box":
            u = rng.uniform(self.lower, self.upper, size=(n, self.dim))
            return self.project(u)
        d = rng.standard_normal((n, self.dim))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        r = self.radius * rng.uniform(size=(n, 1)) ** (1.0 / self.dim)
        return self.center + r * d

    def vertices(self):
        """Corner points of a box, or 2*m axis extremes of a ball."""
        if self.kind == "box":
            grids = np.meshgrid(*zip(self.lower, self.upper), indexing="ij")
            pts = np.stack([g.ravel() for g in grids], axis=-1)
            return np.unique(self.project(pts), axis=0)
        eye = np.eye(self.dim)
        return np.concatenate([self.center + self.radius * eye, self.center - self.radius * eye])

    def levels(self):
        """Per-dimension {lower, middle, upper} values used for bang/zero schedules."""
        lo, hi = self.bounding_box
        mid = self.project(0.5 * (lo + hi))
        return [np.unique([lo[i], mid[i], hi[i]]) for i in range(self.dim)]

    def boundary_samples(self, rng, n):
        """Points on the boundary of U (faces of the box, sphere of the ball)."""
        if self.kind == "ball":
            d = rng.standard_normal((n, self.dim))
            d /= np.linalg.norm(d, axis=1, keepdims=True)
            return self.center + self.radius * d
        u = rng.uniform(self.lower, self.upper, size=(n, self.dim))
        face = rng.integers(0, self.dim, size=n)
        side = rng.integers(0, 2, size=n)
        rows = np.arange(n)
        u[rows, face] = np.where(side == 0, self.lower[face], self.upper[face])
        return self.project(u)


@dataclass(frozen=True)
class ControlSystem:
    """Autonomous control system ``x' = f(x, u)`` with input set ``U``.

    ``periodic`` maps a state index to ``(lo, period)``; those coordinates are
    wrapped into ``[lo, lo + period)``. ``disturbance`` is an optional second
    bounded channel passed to ``f`` as the keyword ``d`` (zero by default).
    """

    name: str
    state_dim: int
    input_dim: int
    f: Callable
    input_set: InputSet
    periodic: Mapping[int, tuple] = field(default_factory=dict)
    params: Mapping[str, object] = field(default_factory=dict)
    disturbance: Optional[InputSet] = None

    def __call__(self, x, u, d=None):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        if self.disturbance is None:
            return self.f(x, u)
        if d is None:
            d = np.zeros(np.shape(u)[:-1] + (self.disturbance.dim,))
        return self.f(x, u, d)

    def wrap(self, x):
        """Wrap periodic coordinates; returns a new array."""
        x = np.array(x, dtype=float, copy=True)
        for i, (lo, period) in self.periodic.items():
            x[..., i] = lo + np.mod(x[..., i] - lo, period)
        return x


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    inputs: np.ndarray

    def __post_init__(self):
        assert len(self.states) == len(self.times)
        assert len(self.inputs) == len(self.times) - 1


def _rk4_step(system, x, u, h, d=None):
    k1 = system(x, u, d)
    k2 = system(x + 0.5 * h * k1, u, d)
    k3 = system(x + 0.5 * h * k2, u, d)
    k4 = system(x + h * k3, u, d)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rollout(system, x0, inputs, dt, substeps=4, d=None):
    """Batched RK4 shooting with piecewise-constant controls.

    Parameters
    ----------
    system : ControlSystem
    x0 : array, shape (..., n)
    inputs : array, shape (..., N, m)
        One input per control segment of length ``dt``.
    dt : float
    substeps : int
        RK4 steps per segment; every sub-step state is recorded.
    d : array, shape (..., k), optional
        Constant disturbance for the whole rollout.

    Returns
    -------
    times : array, shape (N * substeps + 1,)
    states : array, shape (..., N * substeps + 1, n)
    """
    x = system.wrap(np.asarray(x0, dtype=float))
    inputs = np.asarray(inputs, dtype=float)
    n_seg = inputs.shape[-2]
    h = dt / substeps
    out = np.empty(x.shape[:-1] + (n_seg * substeps + 1, system.state_dim))
    out[..., 0, :] = x
    k = 1
    for s in range(n_seg):
        u = inputs[..., s, :]
        for _ in range(substeps):
            x = system.wrap(_rk4_step(system, x, u, h, d))
            out[..., k, :] = x
            k += 1
    times = h * np.arange(n_seg * substeps + 1)
    return times, out


def integrate(system, x0, inputs, dt, substeps=4):
    """Integrate a single trajectory under a piecewise-constant schedule.

    Returns a :class:`Trajectory` whose states sit on the segment boundaries
    ``0, dt, 2 dt, ...``.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    x0 = np.asarray(x0, dtype=float)
    if not np.all(np.isfinite(x0)):
        raise NonFiniteState("initial state is not finite")
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    if not np.all(system.input_set.contains(inputs, tol=1e-9)):
        raise ValueError("input schedule leaves the input set")
    _, states = rollout(system, x0, inputs, dt, substeps)
    if not np.all(np.isfinite(states)):
        raise NonFiniteState(f"{system.name}: state became non-finite during integration")
    seg_states = states[::substeps]
    times = dt * np.arange(len(inputs) + 1)
    return Trajectory(times=times, states=seg_states, inputs=inputs)


# ----------------------------------------------------------------------------
# named systems


def _req(params, key):
    if key not in params:
        raise MissingParam(f"missing required parameter '{key}'")
    return params[key]


def _box_from_params(params, m, default=None):
    if "u_min" in params or "u_max" in params:
        if "u_min" in params and "u_max" in params:
            lo = np.broadcast_to(np.asarray(params["u_min"], dtype=float), (m,))
            hi = np.broadcast_to(np.asarray(params["u_max"], dtype=float), (m,))
        else:
            hi = np.broadcast_to(np.abs(np.asarray(params.get("u_max", params.get("u_min")), dtype=float)), (m,))
            lo = -hi
        return InputSet.box(lo, hi)
    if "u_norm_max" in params:
        return InputSet.ball(np.zeros(m), float(params["u_norm_max"]))
    if default is None:
        raise MissingParam("missing input bounds ('u_max' or 'u_min'/'u_max' or 'u_norm_max')")
    return InputSet.box(-default * np.ones(m), default * np.ones(m))


def bicycle_slip(zeta):
    """Slip angle of the kinematic bicycle, ``arctan(tan(zeta) / 2)``."""
    return np.arctan(0.5 * np.tan(zeta))


def _single_integrator(params):
    dim = int(params.get("dim", 2))
    U = _box_from_params(params, dim, default=1.0)

    def f(x, u):
        return np.broadcast_to(u, np.broadcast_shapes(np.shape(x), np.shape(u))).copy()

    return ControlSystem("single_integrator", dim, dim, f, U, params=dict(params))


def _double_integrator(params):
    dim = int(params.get("dim", 2))
    U = _box_from_params(params, dim, default=1.0)

    def f(x, u):
        x = np.asarray(x)
        return np.concatenate([np.broadcast_to(x[..., dim:], np.broadcast_shapes(x[..., dim:].shape, np.shape(u))),
                               np.broadcast_to(u, np.broadcast_shapes(x[..., dim:].shape, np.shape(u)))], axis=-1)

    return ControlSystem("double_integrator", 2 * dim, dim, f, U, params=dict(params))


def _bicycle(params):
    L = float(_req(params, "L"))
    v_min = float(_req(params, "v_min"))
    v_max = float(_req(params, "v_max"))
    zmax = float(params.get("zeta_max", 20 * np.pi / 180))
    U = InputSet.box([v_min, -zmax], [v_max, zmax])

    def f(x, u):
        v, zeta = u[..., 0], u[..., 1]
        beta = bicycle_slip(zeta)
        psi = x[..., 2]
        return np.stack([v * np.cos(psi + beta),
                         v * np.sin(psi + beta),
                         v * np.cos(beta) * np.tan(zeta) / L], axis=-1)

    p = dict(params, L=L, v_min=v_min, v_max=v_max, zeta_max=zmax)
    return ControlSystem("bicycle", 3, 2, f, U, periodic={2: (-np.pi, TWO_PI)}, params=p)


def _bicycle_polar(params):
    base = _bicycle(params)
    L = base.params["L"]

    def f(chi, u):
        v, zeta = u[..., 0], u[..., 1]
        beta = bicycle_slip(zeta)
        r, theta = chi[..., 0], chi[..., 2]
        s = np.sin(theta + beta)
        return np.stack([v * np.cos(theta + beta),
                         v / r * s,
                         v * np.cos(beta) * np.tan(zeta) / L - v / r * s], axis=-1)

    return ControlSystem("bicycle_polar", 3, 2, f, base.input_set,
                         periodic={1: (-np.pi, TWO_PI), 2: (-np.pi, TWO_PI)}, params=base.params)


def _unicycle(params):
    v_min = float(_req(params, "v_min"))
    v_max = float(_req(params, "v_max"))
    w_max = float(_req(params, "omega_max"))
    U = InputSet.box([v_min, -w_max], [v_max, w_max])

    def f(x, u):
        v, w = u[..., 0], u[..., 1]
        psi = x[..., 2]
        return np.stack([v * np.cos(psi), v * np.sin(psi), w * np.ones_like(psi)], axis=-1)

    p = dict(params, v_min=v_min, v_max=v_max, omega_max=w_max)
    return ControlSystem("unicycle", 3, 2, f, U, periodic={2: (-np.pi, TWO_PI)}, params=p)


def _pendulum(params):
    if "g_over_l" in params:
        gl = float(params["g_over_l"])
    else:
        gl = float(_req(params, "g")) / float(_req(params, "l"))
    d_max = float(params.get("d_max", 0.0))
    U = _box_from_params(params, 1, default=1.0)
    dist = InputSet.box([-d_max], [d_max]) if d_max > 0 else None

    if dist is None:
        def f(x, u):
            return np.stack([x[..., 1] + 0.0 * u[..., 0],
                             -gl * np.sin(x[..., 0]) + u[..., 0]], axis=-1)
    else:
        def f(x, u, d):
            return np.stack([x[..., 1] + 0.0 * u[..., 0],
                             -gl * np.sin(x[..., 0]) + d[..., 0] + u[..., 0]], axis=-1)

    p = dict(params, g_over_l=gl, d_max=d_max)
    return ControlSystem("pendulum", 2, 1, f, U, params=p, disturbance=dist)


def _linear(params):
    A = np.atleast_2d(np.asarray(_req(params, "A"), dtype=float))
    B = np.asarray(_req(params, "B"), dtype=float)
    if B.ndim == 1:
        B = B.reshape(-1, 1)
    n, m = B.shape
    if A.shape != (n, n):
        raise ValueError("A must be n x n with n = rows of B")
    U = _box_from_params(params, m)

    def f(x, u):
        x = np.asarray(x)
        u = np.asarray(u)
        return np.einsum("ij,...j->...i", A, x) + np.einsum("ij,...j->...i", B, u)

    return ControlSystem("linear", n, m, f, U, params=dict(params, A=A, B=B))


_NAMED = {
    "single_integrator": _single_integrator,
    "double_integrator": _double_integrator,
    "bicycle": _bicycle,
    "bicycle_polar": _bicycle_polar,
    "unicycle": _unicycle,
    "pendulum": _pendulum,
    "linear": _linear,
}


def make_named_system(name, params=None) -> ControlSystem:
    """Build one of the catalogued systems.

    Required keys per system:

    ===================  =========================================================
    single_integrator    ``u_max`` (default 1) or ``u_min``/``u_max``; ``dim`` (2)
    double_integrator    as above, state is (position, velocity)
    bicycle              ``L``, ``v_min``, ``v_max``; ``zeta_max`` (20 deg)
    bicycle_polar        as bicycle; state (r, phi, theta)
    unicycle             ``v_min``, ``v_max``, ``omega_max``
    pendulum             ``g_over_l`` (or ``g`` and ``l``), ``u_max``; ``d_max`` (0)
    linear               ``A``, ``B`` and ``u_min``/``u_max`` or ``u_norm_max``
    ===================  =========================================================
    """
    try:
        builder = _NAMED[name]
    except KeyError:
        raise UnknownSystem(f"unknown system '{name}'; known: {sorted(_NAMED)}") from None
    return builder(dict(params or {}))


def known_systems():
    return sorted(_NAMED)
